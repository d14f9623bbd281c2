#pragma once

// JSON configuration shared by every role. Sections: "master", "broker", "client", "eval".
// Master discovery keys may also appear at the top level.

#include <chrono>
#include <cstdint>
#include <fstream>
#include <optional>
#include <set>
#include <string>

#include <nlohmann/json.hpp>

#include "tdmqtt/client.hpp"
#include "tdmqtt/errors.hpp"
#include "tdmqtt/eval.hpp"
#include "tdmqtt/master_broker.hpp"
#include "tdmqtt/types.hpp"

namespace tdmqtt
{
struct MasterConfig
{
    BrokerRef listen{"0.0.0.0", 1884};
    DiscoveryConfig discovery;
    bool verify_on_resolve = true;
};

struct BrokerConfig
{
    BrokerRef listen{"0.0.0.0", 1883};
    std::optional<std::uint16_t> admin_port = 1893;
};

struct ClientConfig
{
    BrokerRef master{"127.0.0.1", 1884};
    ClientOptions options;
};

struct EvalConfig
{
    eval::EvalParams params;
    int steps = 50;
    eval::MobilityModel mobility;
    std::optional<eval::EmmaParams> emma; // defaults to probe = t_td, reconnection = t_tts
    std::uint64_t seed = 1;

    [[nodiscard]] eval::EmmaParams emma_or_default() const
    {
        if (emma)
            return *emma;
        return {eval::t_td(params), eval::t_tts(params)};
    }
};

struct Config
{
    MasterConfig master;
    BrokerConfig broker;
    ClientConfig client;
    EvalConfig eval;
};

namespace detail
{
using nlohmann::json;

inline void reject_unknown(const json& j, std::string_view section, std::initializer_list<std::string_view> known)
{
    for (const auto& [key, _] : j.items()) {
        if (std::find(known.begin(), known.end(), key) == known.end())
            throw ConfigError("unknown key '" + key + "' in section '" + std::string(section) + "'");
    }
}

template<class T>
T get(const json& j, std::string_view key, std::string_view section)
{
    try {
        return j.at(std::string(key)).get<T>();
    } catch (const json::exception& e) {
        throw ConfigError("bad value for " + std::string(section) + "." + std::string(key) + ": " + e.what());
    }
}

inline std::chrono::milliseconds positive_ms(const json& j, std::string_view key, std::string_view section)
{
    const auto v = get<std::int64_t>(j, key, section);
    if (v <= 0)
        throw ConfigError(std::string(section) + "." + std::string(key) + " must be positive");
    return std::chrono::milliseconds(v);
}

inline BrokerRef address(const json& j, std::string_view key, std::string_view section)
{
    try {
        return BrokerRef::parse(get<std::string>(j, key, section));
    } catch (const InvalidBrokerRef& e) {
        throw ConfigError(std::string(section) + "." + std::string(key) + ": " + e.what());
    }
}

inline void load_discovery(const json& j, std::string_view section, MasterConfig& m)
{
    auto& d = m.discovery;
    if (j.contains("listen"))
        m.listen = address(j, "listen", section);
    if (j.contains("address_range")) {
        const auto& r = j.at("address_range");
        d.address_range.clear();
        if (r.is_string())
            d.address_range.push_back(r.get<std::string>());
        else
            d.address_range = get<std::vector<std::string>>(j, "address_range", section);
        try {
            (void)expand_address_range(d.address_range);
        } catch (const ConfigError& e) {
            throw ConfigError(std::string(section) + ".address_range: " + e.what());
        }
    }
    if (j.contains("broker_port")) {
        const auto p = get<int>(j, "broker_port", section);
        if (p <= 0 || p > 0xFFFF)
            throw ConfigError(std::string(section) + ".broker_port out of range");
        d.port = static_cast<std::uint16_t>(p);
    }
    if (j.contains("timeout_ms"))
        d.timeout = positive_ms(j, "timeout_ms", section);
    if (j.contains("listen_window_ms"))
        d.listen_window = positive_ms(j, "listen_window_ms", section);
    if (j.contains("refresh_period_ms"))
        d.refresh_period = positive_ms(j, "refresh_period_ms", section);
    if (j.contains("parallelism")) {
        const auto p = get<int>(j, "parallelism", section);
        if (p <= 0)
            throw ConfigError(std::string(section) + ".parallelism must be positive");
        d.parallelism = static_cast<std::size_t>(p);
    }
    if (j.contains("verify_on_resolve"))
        m.verify_on_resolve = get<bool>(j, "verify_on_resolve", section);
}

inline eval::Mobility parse_mobility(const std::string& s)
{
    if (s == "frozen")
        return eval::Mobility::frozen;
    if (s == "increasing")
        return eval::Mobility::increasing;
    if (s == "random_walk")
        return eval::Mobility::random_walk;
    throw ConfigError("eval.mobility must be frozen, increasing or random_walk");
}

inline void load_eval(const json& j, EvalConfig& e)
{
    constexpr std::string_view s = "eval";
    reject_unknown(j, s,
                   {"throughput_bps", "sizes_bits", "service_time_s", "arrival_rate", "n_brokers", "timeout_s",
                    "per_hop_delay_s", "max_pub_hops", "steps", "mobility", "initial_hops", "seed", "emma"});
    auto& p = e.params;
    if (j.contains("throughput_bps"))
        p.throughput_bps = get<double>(j, "throughput_bps", s);
    if (j.contains("sizes_bits")) {
        const auto& sizes = j.at("sizes_bits");
        if (!sizes.is_object())
            throw ConfigError("eval.sizes_bits must be an object");
        for (const auto& [key, value] : sizes.items()) {
            const auto it = std::find(eval::packet_kind_names.begin(), eval::packet_kind_names.end(), key);
            if (it == eval::packet_kind_names.end())
                throw ConfigError("unknown packet kind '" + key + "' in eval.sizes_bits");
            if (!value.is_number())
                throw ConfigError("eval.sizes_bits." + key + " must be a number");
            p.sizes_bits[static_cast<std::size_t>(it - eval::packet_kind_names.begin())] = value.get<double>();
        }
    }
    if (j.contains("service_time_s"))
        p.service_time_s = get<double>(j, "service_time_s", s);
    if (j.contains("arrival_rate"))
        p.arrival_rate = get<double>(j, "arrival_rate", s);
    if (j.contains("n_brokers"))
        p.n_brokers = get<int>(j, "n_brokers", s);
    if (j.contains("timeout_s"))
        p.timeout_s = get<double>(j, "timeout_s", s);
    if (j.contains("per_hop_delay_s"))
        p.per_hop_delay_s = get<double>(j, "per_hop_delay_s", s);
    if (j.contains("max_pub_hops"))
        p.max_pub_hops = get<int>(j, "max_pub_hops", s);
    if (j.contains("steps")) {
        e.steps = get<int>(j, "steps", s);
        if (e.steps < 1)
            throw ConfigError("eval.steps must be >= 1");
    }
    if (j.contains("mobility"))
        e.mobility.kind = parse_mobility(get<std::string>(j, "mobility", s));
    if (j.contains("initial_hops")) {
        e.mobility.initial_hops = get<int>(j, "initial_hops", s);
        if (e.mobility.initial_hops < 1)
            throw ConfigError("eval.initial_hops must be >= 1");
    }
    if (j.contains("seed"))
        e.seed = get<std::uint64_t>(j, "seed", s);
    if (j.contains("emma")) {
        const auto& em = j.at("emma");
        reject_unknown(em, "eval.emma", {"probe_time_s", "reconnection_time_s"});
        eval::EmmaParams ep = e.emma_or_default();
        if (em.contains("probe_time_s"))
            ep.probe_time_s = get<double>(em, "probe_time_s", "eval.emma");
        if (em.contains("reconnection_time_s"))
            ep.reconnection_time_s = get<double>(em, "reconnection_time_s", "eval.emma");
        if (ep.probe_time_s < 0 || ep.reconnection_time_s < 0)
            throw ConfigError("eval.emma times must be non-negative");
        e.emma = ep;
    }
    p.validate();
}
} // namespace detail

/// Parse a configuration document. Missing keys keep their defaults. Throws ConfigError
/// (or UnstableQueue for an eval section with lambda*D >= 1).
[[nodiscard]] inline Config parse_config(const nlohmann::json& j)
{
    using detail::json;
    if (!j.is_object())
        throw ConfigError("configuration must be a JSON object");
    detail::reject_unknown(j, "<top>",
                           {"master", "broker", "client", "eval", "listen", "address_range", "broker_port",
                            "timeout_ms", "listen_window_ms", "refresh_period_ms", "parallelism",
                            "verify_on_resolve"});
    Config c;

    json top_master = json::object();
    for (const auto* key : {"address_range", "broker_port", "timeout_ms", "listen_window_ms", "refresh_period_ms",
                            "parallelism", "verify_on_resolve", "listen"}) {
        if (j.contains(key))
            top_master[key] = j.at(key);
    }
    detail::load_discovery(top_master, "<top>", c.master);
    if (j.contains("master")) {
        const auto& m = j.at("master");
        detail::reject_unknown(m, "master",
                               {"listen", "address_range", "broker_port", "timeout_ms", "listen_window_ms",
                                "refresh_period_ms", "parallelism", "verify_on_resolve"});
        detail::load_discovery(m, "master", c.master);
    }

    if (j.contains("broker")) {
        const auto& b = j.at("broker");
        detail::reject_unknown(b, "broker", {"listen", "admin_port"});
        if (b.contains("listen"))
            c.broker.listen = detail::address(b, "listen", "broker");
        if (b.contains("admin_port")) {
            if (b.at("admin_port").is_null()) {
                c.broker.admin_port.reset();
            } else {
                const auto p = detail::get<int>(b, "admin_port", "broker");
                if (p < 0 || p > 0xFFFF)
                    throw ConfigError("broker.admin_port out of range");
                c.broker.admin_port = static_cast<std::uint16_t>(p);
            }
        }
    }

    if (j.contains("client")) {
        const auto& cl = j.at("client");
        detail::reject_unknown(cl, "client",
                               {"master", "keepalive_ms", "timeout_ms", "connect_timeout_ms", "resolve_timeout_ms"});
        if (cl.contains("master"))
            c.client.master = detail::address(cl, "master", "client");
        auto& o = c.client.options;
        if (cl.contains("keepalive_ms"))
            o.keepalive_interval = detail::positive_ms(cl, "keepalive_ms", "client");
        if (cl.contains("timeout_ms"))
            o.timeout = detail::positive_ms(cl, "timeout_ms", "client");
        if (cl.contains("connect_timeout_ms"))
            o.connect_timeout = detail::positive_ms(cl, "connect_timeout_ms", "client");
        if (cl.contains("resolve_timeout_ms"))
            o.resolve_timeout = detail::positive_ms(cl, "resolve_timeout_ms", "client");
    }

    if (j.contains("eval"))
        detail::load_eval(j.at("eval"), c.eval);
    return c;
}

[[nodiscard]] inline Config load_config(const std::string& path)
{
    std::ifstream in(path);
    if (!in)
        throw ConfigError("cannot open config file '" + path + "'");
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError("invalid JSON in '" + path + "': " + e.what());
    }
    return parse_config(j);
}

/// The subscriber role's complete configuration as JSON, for audits.
[[nodiscard]] inline nlohmann::json to_json(const ClientConfig& c)
{
    return {
        {"master", c.master.to_string()},
        {"keepalive_ms", c.options.keepalive_interval.count()},
        {"timeout_ms", c.options.timeout.count()},
        {"connect_timeout_ms", c.options.connect_timeout.count()},
        {"resolve_timeout_ms", c.options.resolve_timeout.count()},
    };
}
} // namespace tdmqtt
