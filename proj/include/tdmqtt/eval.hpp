#pragma once

// Analytical delay model for transparent subscriptions, an M/M/1 simulation used to
// cross-check the broker residence time, and the broker-mobility / EMMA scenario generators.

#include <algorithm>
#include <array>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <ostream>
#include <random>
#include <string>
#include <string_view>
#include <vector>

#include "tdmqtt/codec.hpp"
#include "tdmqtt/errors.hpp"

namespace tdmqtt::eval
{
enum class PacketKind : std::size_t
{
    connect,
    connack,
    subscribe,
    suback,
    publish,
    puback,
    disconnect,
    tcp_syn,
    tcp_synack,
};

inline constexpr std::size_t packet_kind_count = 9;

inline constexpr std::array<std::string_view, packet_kind_count> packet_kind_names = {
    "connect", "connack", "subscribe", "suback", "publish", "puback", "disconnect", "tcp_syn", "tcp_synack"};

/// Wire size in bits of the canonical packets exchanged by a census and a transparent
/// subscription, measured from the codec. TCP SYN / SYN-ACK are 20-byte IPv4 + 20-byte TCP
/// headers + 20 bytes of options.
[[nodiscard]] inline std::array<double, packet_kind_count> canonical_sizes_bits()
{
    const auto bits = [](const ControlPacket& p) { return static_cast<double>(encode(p).size() * 8); };
    const TopicName topic("sensor/room1/temp");
    return {
        bits(Connect{"tdmqtt-client", 5}),
        bits(ConnAck{success}),
        bits(Subscribe{1, {"sensor/room1/temp"}}),
        bits(SubAck{1, {ReasonCode::granted_qos_1}}),
        bits(Publish{topic, 1, 1, std::vector<std::uint8_t>(8, 0), false}),
        bits(PubAck{1, success}),
        bits(Disconnect{}),
        60.0 * 8,
        60.0 * 8,
    };
}

struct EvalParams
{
    double throughput_bps = 250'000;
    std::array<double, packet_kind_count> sizes_bits = canonical_sizes_bits();
    double service_time_s = 0.001; // D = 1/mu
    double arrival_rate = 100;     // lambda, messages per second
    int n_brokers = 4;             // N
    double timeout_s = 1.0;        // TimeOut
    double per_hop_delay_s = 0.005;
    int max_pub_hops = 2;

    [[nodiscard]] double size(PacketKind k) const { return sizes_bits[static_cast<std::size_t>(k)]; }
    double& size(PacketKind k) { return sizes_bits[static_cast<std::size_t>(k)]; }

    void validate() const
    {
        if (!(throughput_bps > 0))
            throw ConfigError("throughput must be positive");
        for (std::size_t i = 0; i < packet_kind_count; ++i)
            if (!(sizes_bits[i] > 0))
                throw ConfigError("size of " + std::string(packet_kind_names[i]) + " must be positive");
        if (service_time_s < 0 || arrival_rate < 0)
            throw ConfigError("service time and arrival rate must be non-negative");
        if (arrival_rate * service_time_s >= 1)
            throw UnstableQueue("arrival_rate * service_time must be < 1");
        if (n_brokers < 0)
            throw ConfigError("n_brokers must be non-negative");
        if (timeout_s < 0 || per_hop_delay_s < 0)
            throw ConfigError("timeout and per-hop delay must be non-negative");
        if (max_pub_hops < 1)
            throw ConfigError("max_pub_hops must be at least 1");
    }
};

/// Transmission delay of one message.
[[nodiscard]] inline double t_message(double size_bits, double throughput_bps)
{
    if (!(throughput_bps > 0))
        throw ConfigError("throughput must be positive");
    return size_bits / throughput_bps;
}

[[nodiscard]] inline double t_message(const EvalParams& p, PacketKind k)
{
    return t_message(p.size(k), p.throughput_bps);
}

/// Mean residence time of a message in an M/M/1 broker: D / (1 - lambda*D).
[[nodiscard]] inline double t_mr(double service_time_s, double arrival_rate)
{
    const double rho = arrival_rate * service_time_s;
    if (rho >= 1)
        throw UnstableQueue("queue is unstable: lambda*D = " + std::to_string(rho));
    return service_time_s / (1 - rho);
}

/// Mean sojourn time over `n_samples` departures of a FIFO single-server queue with
/// Poisson(lambda) arrivals and exponential service of mean D, starting empty.
[[nodiscard]] inline double mm1_mean_sojourn(double service_time_s, double arrival_rate, std::uint64_t n_samples,
                                             std::uint64_t seed)
{
    if (arrival_rate * service_time_s >= 1)
        throw UnstableQueue("queue is unstable");
    if (n_samples == 0)
        return 0;
    std::mt19937_64 rng(seed);
    // Inverse-CDF sampling on 53-bit uniforms keeps the stream identical across standard libraries.
    const auto uniform = [&] { return (static_cast<double>(rng() >> 11) + 0.5) * 0x1.0p-53; };
    const auto exponential = [&](double mean) { return -mean * std::log(uniform()); };

    double arrival = 0;
    double server_free_at = 0;
    double total = 0;
    for (std::uint64_t i = 0; i < n_samples; ++i) {
        if (arrival_rate > 0)
            arrival += exponential(1.0 / arrival_rate);
        else
            arrival = server_free_at;
        const double start = std::max(arrival, server_free_at);
        const double departure = start + exponential(service_time_s);
        server_free_at = departure;
        total += departure - arrival;
    }
    return total / static_cast<double>(n_samples);
}

/// Topic discovery against one broker: the seven-message census exchange.
[[nodiscard]] inline double t_td(const EvalParams& p)
{
    using K = PacketKind;
    return t_message(p, K::connect) + t_message(p, K::connack) + t_message(p, K::subscribe) +
           t_message(p, K::suback) + t_message(p, K::publish) + t_message(p, K::puback) +
           t_message(p, K::disconnect);
}

/// Broker discovery: (N/2)*TimeOut + N*(T_TCP + T_TCPA).
[[nodiscard]] inline double t_bd(const EvalParams& p)
{
    const double n = p.n_brokers;
    return (n / 2) * p.timeout_s +
           n * (t_message(p, PacketKind::tcp_syn) + t_message(p, PacketKind::tcp_synack));
}

/// Transparent topic subscription: master round then broker round, one DISCONNECT.
[[nodiscard]] inline double t_tts(const EvalParams& p)
{
    using K = PacketKind;
    return 2 * t_message(p, K::connect) + 2 * t_message(p, K::connack) + 2 * t_message(p, K::subscribe) +
           2 * t_message(p, K::suback) + t_message(p, K::disconnect);
}

[[nodiscard]] inline double t_change(const EvalParams& p) { return t_td(p) + t_tts(p); }

[[nodiscard]] inline double t_broker_change(const EvalParams& p)
{
    return p.timeout_s + t_tts(p) + t_bd(p) + p.n_brokers * t_td(p);
}

struct DelayBreakdown
{
    std::array<double, packet_kind_count> t_message{};
    double t_mr = 0;
    double t_td = 0;
    double t_bd = 0;
    double t_tts = 0;
    double t_change = 0;
    double t_broker_change = 0;
};

[[nodiscard]] inline DelayBreakdown breakdown(const EvalParams& p)
{
    DelayBreakdown out;
    for (std::size_t i = 0; i < packet_kind_count; ++i)
        out.t_message[i] = t_message(p.sizes_bits[i], p.throughput_bps);
    out.t_mr = t_mr(p.service_time_s, p.arrival_rate);
    out.t_td = t_td(p);
    out.t_bd = t_bd(p);
    out.t_tts = t_tts(p);
    out.t_change = out.t_td + out.t_tts;
    out.t_broker_change = p.timeout_s + out.t_tts + out.t_bd + p.n_brokers * out.t_td;
    return out;
}

enum class Mobility
{
    frozen,     // broker stays put
    increasing, // broker moves one hop further every step
    random_walk // +/-1 hop per step, never closer than one hop
};

struct MobilityModel
{
    Mobility kind = Mobility::random_walk;
    int initial_hops = 1;
};

struct EmmaParams
{
    double probe_time_s = 0;        // per-broker QoS probe
    double reconnection_time_s = 0; // reconnect to the chosen broker
};

struct MobilityRow
{
    int step = 0;
    int hops = 0;
    double std_s = 0;
    double tdmqtt_s = 0;
};

struct EmmaRow
{
    int step = 0;
    double tdmqtt_s = 0;
    double emma_s = 0;
};

struct ScenarioTrace
{
    std::vector<MobilityRow> mobility;
    std::vector<EmmaRow> emma;
};

/// Publisher-to-subscriber response time through a broker `hops` away:
/// hop delay both ways, broker residence, PUBLISH in and out.
[[nodiscard]] inline double response_time(const EvalParams& p, int hops)
{
    return 2 * hops * p.per_hop_delay_s + t_mr(p.service_time_s, p.arrival_rate) +
           2 * t_message(p, PacketKind::publish);
}

/// Standard MQTT keeps its broker however far it drifts; tdmqtt rebinds to a broker within
/// max_pub_hops whenever the distance exceeds it and pays t_change on that step.
[[nodiscard]] inline ScenarioTrace scenario_broker_mobility(const EvalParams& p, int steps, MobilityModel model,
                                                           std::uint64_t seed)
{
    if (steps < 1)
        throw ConfigError("steps must be >= 1");
    if (model.initial_hops < 1)
        throw ConfigError("initial_hops must be >= 1");
    std::mt19937_64 rng(seed);
    const double change = t_change(p);

    ScenarioTrace trace;
    int std_hops = model.initial_hops;
    int td_hops = std::min(model.initial_hops, p.max_pub_hops);
    bool rebind = model.initial_hops > p.max_pub_hops;
    for (int step = 0; step < steps; ++step) {
        if (step > 0) {
            int delta = 0;
            if (model.kind == Mobility::increasing)
                delta = 1;
            else if (model.kind == Mobility::random_walk)
                delta = (rng() >> 63) ? 1 : -1;
            std_hops = std::max(1, std_hops + delta);
            td_hops = std::max(1, td_hops + delta);
            rebind = td_hops > p.max_pub_hops;
            if (rebind)
                td_hops = p.max_pub_hops;
        }
        trace.mobility.push_back(
            {step, std_hops, response_time(p, std_hops), response_time(p, td_hops) + (rebind ? change : 0.0)});
    }
    return trace;
}

/// Per broker move: tdmqtt pays one census plus a transparent subscription; the EMMA
/// stand-in probes every broker and then reconnects. The seed is accepted for interface
/// symmetry; both costs are deterministic.
[[nodiscard]] inline ScenarioTrace scenario_emma_comparison(const EvalParams& p, int steps, const EmmaParams& emma,
                                                           std::uint64_t /*seed*/)
{
    if (steps < 1)
        throw ConfigError("steps must be >= 1");
    const double td = t_td(p) + t_tts(p);
    const double em = p.n_brokers * emma.probe_time_s + emma.reconnection_time_s;
    ScenarioTrace trace;
    for (int step = 0; step < steps; ++step)
        trace.emma.push_back({step, td, em});
    return trace;
}

/// Locale-independent shortest-ish decimal: up to 12 significant digits.
[[nodiscard]] inline std::string format_number(double v)
{
    char buf[64];
    auto [end, ec] = std::to_chars(buf, buf + sizeof(buf), v, std::chars_format::general, 12);
    return std::string(buf, end);
}

inline void write_mobility_csv(std::ostream& os, const ScenarioTrace& t)
{
    os << "step,hops,std_ms,tdmqtt_ms\n";
    for (const auto& r : t.mobility)
        os << r.step << ',' << r.hops << ',' << format_number(r.std_s * 1e3) << ','
           << format_number(r.tdmqtt_s * 1e3) << '\n';
}

inline void write_emma_csv(std::ostream& os, const ScenarioTrace& t)
{
    os << "step,tdmqtt_ms,emma_ms\n";
    for (const auto& r : t.emma)
        os << r.step << ',' << format_number(r.tdmqtt_s * 1e3) << ',' << format_number(r.emma_s * 1e3) << '\n';
}

/// One header line and one row, all values in seconds.
inline void write_breakdown_csv(std::ostream& os, const DelayBreakdown& b)
{
    for (auto name : packet_kind_names)
        os << "t_" << name << "_s,";
    os << "t_mr_s,t_td_s,t_bd_s,t_tts_s,t_change_s,t_broker_change_s\n";
    for (double v : b.t_message)
        os << format_number(v) << ',';
    os << format_number(b.t_mr) << ',' << format_number(b.t_td) << ',' << format_number(b.t_bd) << ','
       << format_number(b.t_tts) << ',' << format_number(b.t_change) << ',' << format_number(b.t_broker_change)
       << '\n';
}
} // namespace tdmqtt::eval
