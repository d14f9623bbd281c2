#pragma once

#include <charconv>
#include <compare>
#include <cstdint>
#include <ostream>
#include <string>
#include <string_view>
#include <utility>

#include "tdmqtt/errors.hpp"

namespace tdmqtt
{
/// One-byte result code carried by acknowledgments and DISCONNECT.
/// Values outside the named set are preserved as-is.
enum class ReasonCode : std::uint8_t
{
    normal = 0x00,
    granted_qos_1 = 0x01,
    topic_filter_not_accepted = 0x8F,
    use_another_server = 0x9C,
    server_moved = 0x9D,
};

inline constexpr ReasonCode success = ReasonCode::normal;

[[nodiscard]] constexpr bool is_failure(ReasonCode rc) noexcept
{
    return static_cast<std::uint8_t>(rc) >= 0x80;
}

[[nodiscard]] constexpr bool is_redirect(ReasonCode rc) noexcept
{
    return rc == ReasonCode::use_another_server || rc == ReasonCode::server_moved;
}

inline constexpr char topic_level_separator = '/';
inline constexpr char multi_level_wildcard = '#';
inline constexpr char single_level_wildcard = '+';

/// Concrete topic name: non-empty, no wildcard characters.
class TopicName
{
public:
    explicit TopicName(std::string value) : value_(std::move(value))
    {
        if (value_.empty())
            throw InvalidTopicName("topic name is empty");
        if (value_.size() > 0xFFFF)
            throw InvalidTopicName("topic name longer than 65535 bytes");
        if (value_.find_first_of("#+") != std::string::npos)
            throw InvalidTopicName("topic name contains a wildcard: " + value_);
        if (value_.find('\0') != std::string::npos)
            throw InvalidTopicName("topic name contains NUL");
    }

    [[nodiscard]] const std::string& str() const noexcept { return value_; }

    friend auto operator<=>(const TopicName&, const TopicName&) = default;

private:
    std::string value_;
};

/// Subscription filter. Only the multi-level wildcard is supported and only as the final level.
class TopicFilter
{
public:
    [[nodiscard]] const std::string& str() const noexcept { return value_; }
    [[nodiscard]] bool has_wildcard() const noexcept { return !value_.empty() && value_.back() == multi_level_wildcard; }

    friend auto operator<=>(const TopicFilter&, const TopicFilter&) = default;

    friend TopicFilter validate_filter(std::string text);

private:
    explicit TopicFilter(std::string v) : value_(std::move(v)) {}
    std::string value_;
};

[[nodiscard]] inline TopicFilter validate_filter(std::string text)
{
    if (text.empty())
        throw MalformedFilter("topic filter is empty");
    if (text.size() > 0xFFFF)
        throw MalformedFilter("topic filter longer than 65535 bytes");
    if (text.find(single_level_wildcard) != std::string::npos)
        throw MalformedFilter("single-level wildcard is not supported: " + text);
    if (text.find('\0') != std::string::npos)
        throw MalformedFilter("topic filter contains NUL");
    const auto hash = text.find(multi_level_wildcard);
    if (hash != std::string::npos) {
        const bool last = hash == text.size() - 1;
        const bool own_level = hash == 0 || text[hash - 1] == topic_level_separator;
        if (!last || !own_level)
            throw MalformedFilter("'#' must be the last level on its own: " + text);
    }
    return TopicFilter(std::move(text));
}

[[nodiscard]] inline bool is_valid_filter(std::string_view text)
{
    try {
        (void)validate_filter(std::string(text));
        return true;
    } catch (const MalformedFilter&) {
        return false;
    }
}

/// True iff `name` equals `filter`, with a trailing '#' absorbing zero or more trailing levels.
/// "a/#" matches "a" as well as "a/b/c".
[[nodiscard]] inline bool topic_matches(std::string_view filter, std::string_view name) noexcept
{
    if (filter.empty() || filter.back() != multi_level_wildcard)
        return filter == name;
    if (filter.size() == 1)
        return true;
    // filter = prefix + "/#"
    const auto prefix = filter.substr(0, filter.size() - 2);
    if (name.size() < prefix.size() || name.substr(0, prefix.size()) != prefix)
        return false;
    return name.size() == prefix.size() || name[prefix.size()] == topic_level_separator;
}

[[nodiscard]] inline bool topic_matches(const TopicFilter& filter, const TopicName& name) noexcept
{
    return topic_matches(filter.str(), name.str());
}

/// Broker address in "name:port" form.
struct BrokerRef
{
    std::string name;
    std::uint16_t port = 0;

    [[nodiscard]] std::string to_string() const { return name + ':' + std::to_string(port); }

    [[nodiscard]] static BrokerRef parse(std::string_view text)
    {
        const auto colon = text.rfind(':');
        if (colon == std::string_view::npos || colon == 0)
            throw InvalidBrokerRef("expected name:port, got '" + std::string(text) + "'");
        auto name = text.substr(0, colon);
        const auto port_text = text.substr(colon + 1);
        unsigned value = 0;
        const auto [ptr, ec] = std::from_chars(port_text.data(), port_text.data() + port_text.size(), value);
        if (ec != std::errc{} || ptr != port_text.data() + port_text.size() || port_text.empty() || value == 0 ||
            value > 0xFFFF)
            throw InvalidBrokerRef("bad port in '" + std::string(text) + "'");
        if (name.size() >= 2 && name.front() == '[' && name.back() == ']')
            name = name.substr(1, name.size() - 2);
        return BrokerRef{std::string(name), static_cast<std::uint16_t>(value)};
    }

    // Ordering is by textual form so tie-breaks follow the "name:port" string.
    friend std::strong_ordering operator<=>(const BrokerRef& a, const BrokerRef& b)
    {
        const auto c = a.to_string().compare(b.to_string());
        return c < 0 ? std::strong_ordering::less : c > 0 ? std::strong_ordering::greater : std::strong_ordering::equal;
    }
    friend bool operator==(const BrokerRef&, const BrokerRef&) = default;

    friend std::ostream& operator<<(std::ostream& os, const BrokerRef& b) { return os << b.to_string(); }
};
} // namespace tdmqtt
