#pragma once

// MQTT 5 control-packet subset: CONNECT, CONNACK, SUBSCRIBE, SUBACK, PUBLISH (QoS 0/1),
// PUBACK, PINGREQ, PINGRESP and DISCONNECT with the Server Reference property.

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <type_traits>
#include <variant>
#include <vector>

#include "tdmqtt/errors.hpp"
#include "tdmqtt/types.hpp"

namespace tdmqtt
{
enum class PacketType : std::uint8_t
{
    connect = 1,
    connack = 2,
    publish = 3,
    puback = 4,
    subscribe = 8,
    suback = 9,
    pingreq = 12,
    pingresp = 13,
    disconnect = 14,
};

inline constexpr std::uint8_t protocol_level_v5 = 0x05;
inline constexpr std::uint32_t max_remaining_length = 268'435'455;

namespace property
{
inline constexpr std::uint8_t server_reference = 0x1C;
inline constexpr std::uint8_t reason_string = 0x1F;
} // namespace property

struct Connect
{
    std::string client_id;
    std::uint16_t keep_alive = 0; // seconds

    friend bool operator==(const Connect&, const Connect&) = default;
};

struct ConnAck
{
    ReasonCode reason = success;
    bool session_present = false;

    friend bool operator==(const ConnAck&, const ConnAck&) = default;
};

// Filters are carried as raw text: a broker answers a malformed filter with a
// per-filter reason code instead of dropping the connection.
struct Subscribe
{
    std::uint16_t packet_id = 0;
    std::vector<std::string> filters;

    friend bool operator==(const Subscribe&, const Subscribe&) = default;
};

struct SubAck
{
    std::uint16_t packet_id = 0;
    std::vector<ReasonCode> reasons;

    friend bool operator==(const SubAck&, const SubAck&) = default;
};

struct Publish
{
    TopicName topic;
    std::optional<std::uint16_t> packet_id; // present iff qos == 1
    std::uint8_t qos = 0;
    std::vector<std::uint8_t> payload;
    bool retain = false;

    friend bool operator==(const Publish&, const Publish&) = default;
};

struct PubAck
{
    std::uint16_t packet_id = 0;
    ReasonCode reason = success;

    friend bool operator==(const PubAck&, const PubAck&) = default;
};

struct PingReq
{
    friend bool operator==(const PingReq&, const PingReq&) = default;
};

struct PingResp
{
    friend bool operator==(const PingResp&, const PingResp&) = default;
};

struct Disconnect
{
    ReasonCode reason = ReasonCode::normal;
    std::optional<BrokerRef> server_reference; // only with 0x9C / 0x9D
    std::optional<std::string> reason_string;

    friend bool operator==(const Disconnect&, const Disconnect&) = default;
};

using ControlPacket = std::variant<Connect, ConnAck, Subscribe, SubAck, Publish, PubAck, PingReq, PingResp, Disconnect>;

[[nodiscard]] inline std::string_view packet_name(const ControlPacket& p)
{
    static constexpr std::string_view names[] = {"CONNECT", "CONNACK", "SUBSCRIBE", "SUBACK",    "PUBLISH",
                                                 "PUBACK",  "PINGREQ", "PINGRESP",  "DISCONNECT"};
    return names[p.index()];
}

struct Decoded
{
    ControlPacket packet;
    std::size_t consumed = 0;
};

struct Incomplete
{
    std::optional<std::size_t> needed; // additional bytes, when the fixed header is complete
};

struct Malformed
{
    std::string reason;
};

using DecodeResult = std::variant<Decoded, Incomplete, Malformed>;

namespace detail
{
class Writer
{
public:
    void u8(std::uint8_t v) { out_.push_back(v); }
    void u16(std::uint16_t v)
    {
        out_.push_back(static_cast<std::uint8_t>(v >> 8));
        out_.push_back(static_cast<std::uint8_t>(v & 0xFF));
    }
    void varint(std::uint32_t v)
    {
        do {
            std::uint8_t b = v % 128;
            v /= 128;
            if (v > 0)
                b |= 0x80;
            out_.push_back(b);
        } while (v > 0);
    }
    void string(std::string_view s)
    {
        if (s.size() > 0xFFFF)
            throw InvalidPacket("string longer than 65535 bytes");
        u16(static_cast<std::uint16_t>(s.size()));
        out_.insert(out_.end(), s.begin(), s.end());
    }
    void bytes(std::span<const std::uint8_t> b) { out_.insert(out_.end(), b.begin(), b.end()); }

    [[nodiscard]] std::vector<std::uint8_t>& data() noexcept { return out_; }

private:
    std::vector<std::uint8_t> out_;
};

struct MalformedInput
{
    std::string reason;
};

// Bounded to one packet body; running off the end is a malformed packet.
class Reader
{
public:
    explicit Reader(std::span<const std::uint8_t> in) : in_(in) {}

    [[nodiscard]] std::size_t remaining() const noexcept { return in_.size() - pos_; }
    [[nodiscard]] bool empty() const noexcept { return remaining() == 0; }

    std::uint8_t u8()
    {
        need(1);
        return in_[pos_++];
    }
    std::uint16_t u16()
    {
        need(2);
        const auto v = static_cast<std::uint16_t>((in_[pos_] << 8) | in_[pos_ + 1]);
        pos_ += 2;
        return v;
    }
    std::uint32_t u32()
    {
        need(4);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i)
            v = (v << 8) | in_[pos_++];
        return v;
    }
    std::uint32_t varint()
    {
        std::uint32_t value = 0;
        std::uint32_t multiplier = 1;
        for (int i = 0; i < 4; ++i) {
            const auto b = u8();
            value += (b & 0x7F) * multiplier;
            if ((b & 0x80) == 0)
                return value;
            multiplier *= 128;
        }
        throw MalformedInput{"variable byte integer longer than 4 bytes"};
    }
    std::string string()
    {
        const auto n = u16();
        need(n);
        std::string s(reinterpret_cast<const char*>(in_.data() + pos_), n);
        pos_ += n;
        return s;
    }
    std::span<const std::uint8_t> take(std::size_t n)
    {
        need(n);
        auto s = in_.subspan(pos_, n);
        pos_ += n;
        return s;
    }
    std::span<const std::uint8_t> rest() { return take(remaining()); }

private:
    void need(std::size_t n) const
    {
        if (remaining() < n)
            throw MalformedInput{"packet body shorter than its fields"};
    }

    std::span<const std::uint8_t> in_;
    std::size_t pos_ = 0;
};

struct Properties
{
    std::optional<std::string> server_reference;
    std::optional<std::string> reason_string;
};

inline Properties read_properties(Reader& r)
{
    const auto length = r.varint();
    Reader props(r.take(length));
    Properties out;
    while (!props.empty()) {
        const auto id = props.varint();
        switch (id) {
        case 0x01: case 0x17: case 0x19: case 0x24: case 0x25: case 0x28: case 0x29: case 0x2A:
            (void)props.u8();
            break;
        case 0x13: case 0x21: case 0x22: case 0x23:
            (void)props.u16();
            break;
        case 0x02: case 0x11: case 0x18: case 0x27:
            (void)props.u32();
            break;
        case 0x0B:
            (void)props.varint();
            break;
        case property::server_reference:
            out.server_reference = props.string();
            break;
        case property::reason_string:
            out.reason_string = props.string();
            break;
        case 0x03: case 0x08: case 0x12: case 0x15: case 0x1A:
            (void)props.string();
            break;
        case 0x09: case 0x16:
            (void)props.take(props.u16());
            break;
        case 0x26:
            (void)props.string();
            (void)props.string();
            break;
        default:
            throw MalformedInput{"unknown property id " + std::to_string(id)};
        }
    }
    return out;
}

inline std::uint8_t first_byte(PacketType t, std::uint8_t flags = 0)
{
    return static_cast<std::uint8_t>((static_cast<std::uint8_t>(t) << 4) | (flags & 0x0F));
}

inline void check_packet_id(std::uint16_t id, const char* what)
{
    if (id == 0)
        throw InvalidPacket(std::string(what) + " requires a non-zero packet identifier");
}

inline void encode_body(Writer& w, const Connect& p)
{
    w.string("MQTT");
    w.u8(protocol_level_v5);
    w.u8(0x02); // clean start
    w.u16(p.keep_alive);
    w.varint(0);
    w.string(p.client_id);
}

inline void encode_body(Writer& w, const ConnAck& p)
{
    w.u8(p.session_present ? 0x01 : 0x00);
    w.u8(static_cast<std::uint8_t>(p.reason));
    w.varint(0);
}

inline void encode_body(Writer& w, const Subscribe& p)
{
    check_packet_id(p.packet_id, "SUBSCRIBE");
    if (p.filters.empty())
        throw InvalidPacket("SUBSCRIBE without topic filters");
    w.u16(p.packet_id);
    w.varint(0);
    for (const auto& f : p.filters) {
        if (f.empty())
            throw InvalidPacket("empty topic filter");
        w.string(f);
        w.u8(0x01); // maximum QoS 1
    }
}

inline void encode_body(Writer& w, const SubAck& p)
{
    check_packet_id(p.packet_id, "SUBACK");
    if (p.reasons.empty())
        throw InvalidPacket("SUBACK without reason codes");
    w.u16(p.packet_id);
    w.varint(0);
    for (auto rc : p.reasons)
        w.u8(static_cast<std::uint8_t>(rc));
}

inline void encode_body(Writer& w, const Publish& p)
{
    if (p.qos > 1)
        throw InvalidPacket("QoS " + std::to_string(p.qos) + " is not supported");
    if (p.qos == 1 && !p.packet_id)
        throw InvalidPacket("QoS 1 PUBLISH requires a packet identifier");
    if (p.qos == 0 && p.packet_id)
        throw InvalidPacket("QoS 0 PUBLISH must not carry a packet identifier");
    w.string(p.topic.str());
    if (p.packet_id) {
        check_packet_id(*p.packet_id, "PUBLISH");
        w.u16(*p.packet_id);
    }
    w.varint(0);
    w.bytes(p.payload);
}

inline void encode_body(Writer& w, const PubAck& p)
{
    check_packet_id(p.packet_id, "PUBACK");
    w.u16(p.packet_id);
    if (p.reason != success)
        w.u8(static_cast<std::uint8_t>(p.reason));
}

inline void encode_body(Writer&, const PingReq&) {}
inline void encode_body(Writer&, const PingResp&) {}

inline void encode_body(Writer& w, const Disconnect& p)
{
    if (p.server_reference && !is_redirect(p.reason))
        throw InvalidPacket("Server Reference is only allowed with reason 0x9C or 0x9D");
    if (p.reason == ReasonCode::normal && !p.server_reference && !p.reason_string)
        return;
    w.u8(static_cast<std::uint8_t>(p.reason));
    Writer props;
    if (p.server_reference) {
        props.varint(property::server_reference);
        props.string(p.server_reference->to_string());
    }
    if (p.reason_string) {
        props.varint(property::reason_string);
        props.string(*p.reason_string);
    }
    w.varint(static_cast<std::uint32_t>(props.data().size()));
    w.bytes(props.data());
}

inline std::uint8_t fixed_header_byte(const ControlPacket& packet)
{
    return std::visit(
        [](const auto& p) -> std::uint8_t {
            using T = std::decay_t<decltype(p)>;
            if constexpr (std::is_same_v<T, Connect>)
                return first_byte(PacketType::connect);
            else if constexpr (std::is_same_v<T, ConnAck>)
                return first_byte(PacketType::connack);
            else if constexpr (std::is_same_v<T, Subscribe>)
                return first_byte(PacketType::subscribe, 0x02);
            else if constexpr (std::is_same_v<T, SubAck>)
                return first_byte(PacketType::suback);
            else if constexpr (std::is_same_v<T, Publish>)
                return first_byte(PacketType::publish,
                                  static_cast<std::uint8_t>((p.qos << 1) | (p.retain ? 0x01 : 0x00)));
            else if constexpr (std::is_same_v<T, PubAck>)
                return first_byte(PacketType::puback);
            else if constexpr (std::is_same_v<T, PingReq>)
                return first_byte(PacketType::pingreq);
            else if constexpr (std::is_same_v<T, PingResp>)
                return first_byte(PacketType::pingresp);
            else
                return first_byte(PacketType::disconnect);
        },
        packet);
}

inline ControlPacket decode_body(std::uint8_t header, Reader& r)
{
    const auto type = header >> 4;
    const auto flags = header & 0x0F;
    const auto expect_flags = [&](std::uint8_t f) {
        if (flags != f)
            throw MalformedInput{"invalid fixed header flags"};
    };

    switch (type) {
    case static_cast<int>(PacketType::connect): {
        expect_flags(0);
        if (r.string() != "MQTT")
            throw MalformedInput{"protocol name is not MQTT"};
        if (r.u8() != protocol_level_v5)
            throw MalformedInput{"unsupported protocol level"};
        const auto connect_flags = r.u8();
        if (connect_flags & ~0x02)
            throw MalformedInput{"unsupported CONNECT flags (will, username, password or reserved)"};
        Connect p;
        p.keep_alive = r.u16();
        (void)read_properties(r);
        p.client_id = r.string();
        return p;
    }
    case static_cast<int>(PacketType::connack): {
        expect_flags(0);
        const auto ack_flags = r.u8();
        if (ack_flags & ~0x01)
            throw MalformedInput{"reserved CONNACK flags set"};
        ConnAck p;
        p.session_present = ack_flags & 0x01;
        p.reason = static_cast<ReasonCode>(r.u8());
        if (!r.empty())
            (void)read_properties(r);
        return p;
    }
    case static_cast<int>(PacketType::subscribe): {
        expect_flags(0x02);
        Subscribe p;
        p.packet_id = r.u16();
        if (p.packet_id == 0)
            throw MalformedInput{"zero packet identifier"};
        (void)read_properties(r);
        while (!r.empty()) {
            auto filter = r.string();
            const auto options = r.u8();
            if ((options & 0xC0) || (options & 0x03) == 0x03)
                throw MalformedInput{"invalid subscription options"};
            p.filters.push_back(std::move(filter));
        }
        if (p.filters.empty())
            throw MalformedInput{"SUBSCRIBE without topic filters"};
        return p;
    }
    case static_cast<int>(PacketType::suback): {
        expect_flags(0);
        SubAck p;
        p.packet_id = r.u16();
        (void)read_properties(r);
        while (!r.empty())
            p.reasons.push_back(static_cast<ReasonCode>(r.u8()));
        if (p.reasons.empty())
            throw MalformedInput{"SUBACK without reason codes"};
        return p;
    }
    case static_cast<int>(PacketType::publish): {
        const std::uint8_t qos = (flags >> 1) & 0x03;
        if (qos > 1)
            throw MalformedInput{"QoS 2 and 3 are not supported"};
        auto topic_text = r.string();
        std::optional<std::uint16_t> packet_id;
        if (qos == 1) {
            packet_id = r.u16();
            if (*packet_id == 0)
                throw MalformedInput{"zero packet identifier"};
        }
        (void)read_properties(r);
        auto payload = r.rest();
        try {
            return Publish{TopicName(std::move(topic_text)), packet_id, qos, {payload.begin(), payload.end()},
                           (flags & 0x01) != 0};
        } catch (const InvalidTopicName& e) {
            throw MalformedInput{e.what()};
        }
    }
    case static_cast<int>(PacketType::puback): {
        expect_flags(0);
        PubAck p;
        p.packet_id = r.u16();
        if (!r.empty())
            p.reason = static_cast<ReasonCode>(r.u8());
        if (!r.empty())
            (void)read_properties(r);
        return p;
    }
    case static_cast<int>(PacketType::pingreq):
        expect_flags(0);
        return PingReq{};
    case static_cast<int>(PacketType::pingresp):
        expect_flags(0);
        return PingResp{};
    case static_cast<int>(PacketType::disconnect): {
        expect_flags(0);
        Disconnect p;
        if (!r.empty())
            p.reason = static_cast<ReasonCode>(r.u8());
        if (!r.empty()) {
            auto props = read_properties(r);
            p.reason_string = std::move(props.reason_string);
            if (props.server_reference) {
                if (!is_redirect(p.reason))
                    throw MalformedInput{"Server Reference on a non-redirect DISCONNECT"};
                try {
                    p.server_reference = BrokerRef::parse(*props.server_reference);
                } catch (const InvalidBrokerRef& e) {
                    throw MalformedInput{e.what()};
                }
            }
        }
        return p;
    }
    default:
        throw MalformedInput{"unsupported packet type " + std::to_string(type)};
    }
}
} // namespace detail

/// Serialize one packet. Throws InvalidPacket when the packet violates its invariants.
[[nodiscard]] inline std::vector<std::uint8_t> encode(const ControlPacket& packet)
{
    detail::Writer body;
    std::visit([&](const auto& p) { detail::encode_body(body, p); }, packet);
    if (body.data().size() > max_remaining_length)
        throw InvalidPacket("packet too large");

    detail::Writer out;
    out.u8(detail::fixed_header_byte(packet));
    out.varint(static_cast<std::uint32_t>(body.data().size()));
    out.bytes(body.data());
    return std::move(out.data());
}

/// Decode one packet from the front of `in`. Bytes after the packet are not read.
[[nodiscard]] inline DecodeResult decode(std::span<const std::uint8_t> in,
                                         std::size_t max_packet_size = max_remaining_length + 5)
{
    if (in.empty())
        return Incomplete{};

    std::uint32_t remaining = 0;
    std::uint32_t multiplier = 1;
    std::size_t header_len = 1;
    for (;;) {
        if (header_len > 4)
            return Malformed{"remaining length longer than 4 bytes"};
        if (in.size() <= header_len)
            return Incomplete{};
        const auto b = in[header_len];
        remaining += (b & 0x7F) * multiplier;
        multiplier *= 128;
        ++header_len;
        if ((b & 0x80) == 0)
            break;
    }

    const std::size_t total = header_len + remaining;
    if (total > max_packet_size)
        return Malformed{"packet exceeds maximum size"};
    if (in.size() < total)
        return Incomplete{total - in.size()};

    detail::Reader body(in.subspan(header_len, remaining));
    try {
        auto packet = detail::decode_body(in[0], body);
        if (!body.empty())
            return Malformed{"trailing bytes inside packet body"};
        return Decoded{std::move(packet), total};
    } catch (const detail::MalformedInput& e) {
        return Malformed{e.reason};
    }
}
} // namespace tdmqtt
