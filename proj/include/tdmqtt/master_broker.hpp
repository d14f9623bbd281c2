#pragma once

// Master broker: TCP sweep for live brokers, '#'-subscription topic census per broker,
// and redirection of subscribers to the broker that hosts their topic.

#include <arpa/inet.h>

#include <algorithm>
#include <atomic>
#include <chrono>
#include <condition_variable>
#include <cstdint>
#include <future>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <random>
#include <set>
#include <string>
#include <thread>
#include <vector>

#include "tdmqtt/codec.hpp"
#include "tdmqtt/log.hpp"
#include "tdmqtt/net.hpp"
#include "tdmqtt/types.hpp"

namespace tdmqtt
{
using namespace std::chrono_literals;

struct DiscoveryConfig
{
    std::vector<std::string> address_range;
    std::uint16_t port = 1883;
    std::chrono::milliseconds timeout = 1000ms;
    std::chrono::milliseconds listen_window = 500ms;
    std::chrono::milliseconds refresh_period = 30s;
    std::size_t parallelism = 32;

    void validate() const
    {
        if (timeout <= 0ms)
            throw ConfigError("timeout must be positive");
        if (listen_window <= 0ms)
            throw ConfigError("listen_window must be positive");
        if (refresh_period <= 0ms)
            throw ConfigError("refresh_period must be positive");
        if (parallelism == 0)
            throw ConfigError("parallelism must be positive");
    }
};

/// Expand "a.b.c.d/len" to its host addresses. Network and broadcast addresses are
/// excluded for prefixes up to /30. Anything without a '/' is returned unchanged.
[[nodiscard]] inline std::vector<std::string> expand_cidr(const std::string& cidr)
{
    const auto slash = cidr.find('/');
    if (slash == std::string::npos)
        return {cidr};
    const auto base_text = cidr.substr(0, slash);
    int prefix = -1;
    try {
        std::size_t used = 0;
        prefix = std::stoi(cidr.substr(slash + 1), &used);
        if (used != cidr.size() - slash - 1)
            prefix = -1;
    } catch (const std::exception&) {
    }
    in_addr base{};
    if (::inet_pton(AF_INET, base_text.c_str(), &base) != 1 || prefix < 0 || prefix > 32)
        throw ConfigError("invalid CIDR range '" + cidr + "'");
    if (prefix < 16)
        throw ConfigError("CIDR range '" + cidr + "' is too large (prefix must be >= 16)");

    const std::uint32_t mask = prefix == 0 ? 0 : ~std::uint32_t{0} << (32 - prefix);
    const std::uint32_t network = ntohl(base.s_addr) & mask;
    const std::uint32_t size = std::uint32_t{1} << (32 - prefix);
    std::uint32_t first = network;
    std::uint32_t last = network + size - 1;
    if (prefix <= 30) {
        ++first;
        --last;
    }
    std::vector<std::string> out;
    for (std::uint32_t a = first; a <= last && a >= first; ++a) {
        in_addr addr{htonl(a)};
        char text[INET_ADDRSTRLEN];
        ::inet_ntop(AF_INET, &addr, text, sizeof(text));
        out.emplace_back(text);
        if (a == last)
            break;
    }
    return out;
}

[[nodiscard]] inline std::vector<std::string> expand_address_range(const std::vector<std::string>& ranges)
{
    std::vector<std::string> out;
    for (const auto& s : ranges) {
        auto hosts = expand_cidr(s);
        out.insert(out.end(), hosts.begin(), hosts.end());
    }
    return out;
}

namespace detail
{
template<class T, class F>
void parallel_for_each(const std::vector<T>& items, std::size_t parallelism, F&& f)
{
    std::atomic<std::size_t> next{0};
    const auto workers = std::min(parallelism, items.size());
    std::vector<std::thread> pool;
    pool.reserve(workers);
    for (std::size_t w = 0; w < workers; ++w) {
        pool.emplace_back([&] {
            for (auto i = next++; i < items.size(); i = next++)
                f(items[i]);
        });
    }
    for (auto& t : pool)
        t.join();
}

inline std::string unique_client_id(const std::string& prefix)
{
    static std::atomic<std::uint64_t> counter{0};
    static const auto salt = std::random_device{}();
    return prefix + '-' + std::to_string(salt) + '-' + std::to_string(counter++);
}
} // namespace detail

/// Brokers accepting a TCP connection on cfg.port within cfg.timeout.
/// Every address is attempted; unreachable ones are simply absent from the result.
[[nodiscard]] inline std::set<BrokerRef> broker_discovery(const DiscoveryConfig& cfg)
{
    const auto addresses = expand_address_range(cfg.address_range);
    std::mutex mutex;
    std::set<BrokerRef> found;
    detail::parallel_for_each(addresses, cfg.parallelism, [&](const std::string& addr) {
        const BrokerRef candidate{addr, cfg.port};
        try {
            auto sock = net::Socket::connect(candidate, cfg.timeout);
            std::lock_guard lock(mutex);
            found.insert(candidate);
        } catch (const std::exception& e) {
            logger()->debug("discovery: {} not live: {}", candidate.to_string(), e.what());
        }
    });
    return found;
}

struct CensusOptions
{
    std::string filter = "#";
    bool stop_at_first_match = false;
};

/// Census exchange with one broker: CONNECT, SUBSCRIBE(filter), collect topic names from the
/// PUBLISH headers seen within the listen window (PUBACK for QoS 1), DISCONNECT.
/// A refused subscription returns an empty set. Throws BrokerUnreachable on transport failure.
[[nodiscard]] inline std::set<std::string> run_census(const BrokerRef& broker, const DiscoveryConfig& cfg,
                                                      const CensusOptions& opts)
{
    std::set<std::string> topics;
    try {
        auto ch = net::PacketChannel::connect(broker, cfg.timeout);
        ch->send(Connect{detail::unique_client_id("tdmqtt-master"), 0});
        auto ack = net::expect<ConnAck>(*ch, net::Clock::now() + cfg.timeout);
        if (!ack || is_failure(ack->reason))
            throw BrokerUnreachable("no CONNACK from " + broker.to_string());

        ch->send(Subscribe{1, {opts.filter}});
        std::optional<Disconnect> disconnect;
        auto suback = net::expect<SubAck>(*ch, net::Clock::now() + cfg.timeout, &disconnect);
        if (!suback) {
            if (disconnect)
                return topics;
            throw BrokerUnreachable("no SUBACK from " + broker.to_string());
        }
        if (is_failure(suback->reasons.at(0))) {
            ch->send(Disconnect{});
            return topics;
        }

        const auto window_end = net::Clock::now() + cfg.listen_window;
        while (auto p = ch->receive(window_end)) {
            if (auto* pub = std::get_if<Publish>(&*p)) {
                topics.insert(pub->topic.str());
                if (pub->qos == 1)
                    ch->send(PubAck{*pub->packet_id, success});
                if (opts.stop_at_first_match && topic_matches(opts.filter, pub->topic.str()))
                    break;
            } else if (std::holds_alternative<Disconnect>(*p)) {
                return topics; // broker ended the census, e.g. a topic was relocated
            }
        }
        ch->send(Disconnect{});
    } catch (const BrokerUnreachable&) {
        throw;
    } catch (const std::exception& e) {
        throw BrokerUnreachable("census of " + broker.to_string() + " failed: " + e.what());
    }
    return topics;
}

/// Topic names held by `broker`, learned through a '#' subscription.
[[nodiscard]] inline std::set<std::string> topic_discovery(const BrokerRef& broker, const DiscoveryConfig& cfg)
{
    return run_census(broker, cfg, CensusOptions{});
}

/// Live brokers and the topics each one holds.
struct Registry
{
    std::set<BrokerRef> brokers;
    std::map<BrokerRef, std::set<std::string>> topics;
    std::chrono::system_clock::time_point last_refresh{};

    /// Smallest (by "name:port" text) broker holding a topic that matches `filter`.
    [[nodiscard]] std::optional<BrokerRef> resolve(const std::string& filter) const
    {
        for (const auto& b : candidates(filter))
            return b;
        return std::nullopt;
    }

    [[nodiscard]] std::vector<BrokerRef> candidates(const std::string& filter) const
    {
        std::vector<BrokerRef> out;
        for (const auto& [broker, names] : topics) {
            if (std::any_of(names.begin(), names.end(), [&](const auto& t) { return topic_matches(filter, t); }))
                out.push_back(broker);
        }
        return out;
    }

    friend bool operator==(const Registry& a, const Registry& b)
    {
        return a.brokers == b.brokers && a.topics == b.topics;
    }
};

/// Discovery followed by a census of every live broker. Brokers whose census fails are dropped.
[[nodiscard]] inline Registry refresh_registry(const DiscoveryConfig& cfg)
{
    Registry reg;
    const auto live = broker_discovery(cfg);
    const std::vector<BrokerRef> brokers(live.begin(), live.end());
    std::mutex mutex;
    detail::parallel_for_each(brokers, cfg.parallelism, [&](const BrokerRef& b) {
        try {
            auto names = topic_discovery(b, cfg);
            std::lock_guard lock(mutex);
            reg.brokers.insert(b);
            reg.topics[b] = std::move(names);
        } catch (const std::exception& e) {
            logger()->warn("discovery: dropping {}: {}", b.to_string(), e.what());
        }
    });
    reg.last_refresh = std::chrono::system_clock::now();
    return reg;
}

/// Serves subscribers on behalf of a registry that is refreshed periodically and on demand.
class MasterBroker
{
public:
    struct Options
    {
        std::string host = "0.0.0.0";
        std::uint16_t port = 1884;
        DiscoveryConfig discovery;
        // Confirm a registry hit with a targeted census before redirecting, so stale entries
        // (relocated topics, dead brokers) are corrected instead of handed out.
        bool verify_on_resolve = true;
        std::chrono::milliseconds session_timeout = 30s;
    };

    struct Stats
    {
        std::uint64_t connections = 0;
        std::uint64_t subscribe_requests = 0;
        std::uint64_t redirects = 0;
        std::uint64_t rejections = 0;
        std::uint64_t refreshes = 0;
    };

    explicit MasterBroker(Options opts) : opts_(std::move(opts)) { opts_.discovery.validate(); }
    MasterBroker(const MasterBroker&) = delete;
    MasterBroker& operator=(const MasterBroker&) = delete;
    ~MasterBroker() { stop(); }

    void start()
    {
        listener_ = std::make_unique<net::Listener>(opts_.host, opts_.port);
        running_ = true;
        spawn([this] { accept_loop(); });
        spawn([this] { refresh_loop(); });
        logger()->info("master: listening on {}:{}", opts_.host, port());
    }

    void stop()
    {
        if (!running_.exchange(false))
            return;
        listener_->shutdown();
        {
            std::lock_guard lock(sessions_mutex_);
            for (auto* ch : sessions_)
                ch->shutdown();
        }
        timer_cv_.notify_all();
        std::unique_lock lock(threads_mutex_);
        threads_done_.wait(lock, [this] { return active_threads_ == 0; });
        listener_.reset();
    }

    [[nodiscard]] std::uint16_t port() const { return listener_->port(); }
    [[nodiscard]] BrokerRef address() const
    {
        return BrokerRef{opts_.host == "0.0.0.0" ? "127.0.0.1" : opts_.host, port()};
    }

    [[nodiscard]] Registry registry() const
    {
        std::lock_guard lock(registry_mutex_);
        return *registry_;
    }

    /// Re-run discovery and census and swap the result in. Callers arriving while a refresh
    /// is running share its result.
    Registry refresh()
    {
        const auto requested = std::chrono::system_clock::now();
        std::lock_guard refresh_lock(refresh_mutex_);
        {
            std::lock_guard lock(registry_mutex_);
            if (registry_->last_refresh > requested)
                return *registry_;
        }
        auto fresh = std::make_shared<const Registry>(refresh_registry(opts_.discovery));
        {
            std::lock_guard lock(registry_mutex_);
            registry_ = fresh;
            ++stats_.refreshes;
        }
        refreshed_.notify_all();
        logger()->info("master: refresh brokers={} topics={}", fresh->brokers.size(), topic_count(*fresh));
        return *fresh;
    }

    [[nodiscard]] std::optional<BrokerRef> resolve(const std::string& filter) const
    {
        return snapshot()->resolve(filter);
    }

    /// Registry lookup with verification, then one on-demand refresh when nothing is found.
    [[nodiscard]] std::optional<BrokerRef> locate(const std::string& filter)
    {
        if (!opts_.verify_on_resolve) {
            if (auto hit = resolve(filter))
                return hit;
            return refresh().resolve(filter);
        }
        for (const auto& candidate : snapshot()->candidates(filter)) {
            bool hosts = false;
            bool reachable = true;
            try {
                hosts = !run_census(candidate, opts_.discovery, CensusOptions{filter, true}).empty();
            } catch (const BrokerUnreachable& e) {
                reachable = false;
                logger()->info("master: candidate {} unreachable: {}", candidate.to_string(), e.what());
            }
            if (hosts)
                return candidate;
            forget(candidate, filter, reachable);
        }
        return refresh().resolve(filter);
    }

    /// Block until the initial refresh has completed.
    bool wait_for_first_refresh(std::chrono::milliseconds timeout) const
    {
        std::unique_lock lock(registry_mutex_);
        return refreshed_.wait_for(lock, timeout, [this] { return stats_.refreshes > 0; });
    }

    [[nodiscard]] Stats stats() const
    {
        std::lock_guard lock(registry_mutex_);
        return stats_;
    }

    /// Server side of a transparent subscription on an accepted connection.
    void serve_subscriber(net::PacketChannel& ch)
    {
        const auto deadline = [this] { return net::Clock::now() + opts_.session_timeout; };
        auto first = ch.receive(deadline());
        if (!first || !std::holds_alternative<Connect>(*first))
            return;
        ch.send(ConnAck{success});
        for (;;) {
            auto p = ch.receive(deadline());
            if (!p)
                return;
            if (auto* sub = std::get_if<Subscribe>(&*p)) {
                answer_subscribe(ch, *sub);
                return;
            }
            if (std::holds_alternative<PingReq>(*p)) {
                ch.send(PingResp{});
            } else if (auto* pub = std::get_if<Publish>(&*p)) {
                // the master never relays application messages
                if (pub->qos == 1)
                    ch.send(PubAck{*pub->packet_id, success});
            } else if (!std::holds_alternative<PubAck>(*p)) {
                return; // DISCONNECT, or nothing a subscriber should send
            }
        }
    }

private:
    static std::size_t topic_count(const Registry& r)
    {
        std::size_t n = 0;
        for (const auto& [_, t] : r.topics)
            n += t.size();
        return n;
    }

    std::shared_ptr<const Registry> snapshot() const
    {
        std::lock_guard lock(registry_mutex_);
        return registry_;
    }

    // Copy-on-write correction of a stale registry entry.
    void forget(const BrokerRef& broker, const std::string& filter, bool reachable)
    {
        std::lock_guard lock(registry_mutex_);
        auto next = std::make_shared<Registry>(*registry_);
        if (!reachable) {
            next->brokers.erase(broker);
            next->topics.erase(broker);
        } else if (auto it = next->topics.find(broker); it != next->topics.end()) {
            std::erase_if(it->second, [&](const auto& t) { return topic_matches(filter, t); });
        }
        registry_ = std::move(next);
    }

    void answer_subscribe(net::PacketChannel& ch, const Subscribe& sub)
    {
        {
            std::lock_guard lock(registry_mutex_);
            ++stats_.subscribe_requests;
        }
        const auto& filter = sub.filters.front();
        if (!is_valid_filter(filter)) {
            ch.send(SubAck{sub.packet_id, std::vector(sub.filters.size(), ReasonCode::topic_filter_not_accepted)});
            ch.send(Disconnect{ReasonCode::topic_filter_not_accepted, std::nullopt, "malformed topic filter"});
            count_rejection();
            return;
        }
        ch.send(SubAck{sub.packet_id, std::vector(sub.filters.size(), success)});
        if (auto target = locate(filter)) {
            ch.send(Disconnect{ReasonCode::use_another_server, *target, std::nullopt});
            std::lock_guard lock(registry_mutex_);
            ++stats_.redirects;
            logger()->info("master: redirect topic={} broker={}", filter, target->to_string());
        } else {
            ch.send(Disconnect{ReasonCode::topic_filter_not_accepted, std::nullopt, "no broker holds this topic"});
            count_rejection();
            logger()->info("master: no broker for topic={}", filter);
        }
    }

    void count_rejection()
    {
        std::lock_guard lock(registry_mutex_);
        ++stats_.rejections;
    }

    template<class F>
    void spawn(F&& f)
    {
        {
            std::lock_guard lock(threads_mutex_);
            ++active_threads_;
        }
        std::thread([this, f = std::forward<F>(f)]() mutable {
            f();
            std::lock_guard lock(threads_mutex_);
            if (--active_threads_ == 0)
                threads_done_.notify_all();
        }).detach();
    }

    void accept_loop()
    {
        while (running_) {
            auto sock = listener_->accept();
            if (!sock || !running_)
                break;
            {
                std::lock_guard lock(registry_mutex_);
                ++stats_.connections;
            }
            auto ch = std::make_shared<net::PacketChannel>(std::move(*sock));
            spawn([this, ch] {
                {
                    std::lock_guard lock(sessions_mutex_);
                    if (!running_)
                        return;
                    sessions_.insert(ch.get());
                }
                try {
                    serve_subscriber(*ch);
                } catch (const std::exception& e) {
                    logger()->debug("master: session ended: {}", e.what());
                }
                std::lock_guard lock(sessions_mutex_);
                sessions_.erase(ch.get());
            });
        }
    }

    void refresh_loop()
    {
        while (running_) {
            try {
                refresh();
            } catch (const std::exception& e) {
                logger()->error("master: refresh failed: {}", e.what());
            }
            std::unique_lock lock(timer_mutex_);
            timer_cv_.wait_for(lock, opts_.discovery.refresh_period, [this] { return !running_; });
        }
    }

    Options opts_;
    std::unique_ptr<net::Listener> listener_;
    std::atomic<bool> running_{false};

    mutable std::mutex registry_mutex_;
    std::shared_ptr<const Registry> registry_ = std::make_shared<const Registry>();
    Stats stats_;
    mutable std::condition_variable refreshed_;
    std::mutex refresh_mutex_;

    std::mutex timer_mutex_;
    std::condition_variable timer_cv_;

    std::mutex sessions_mutex_;
    std::set<net::PacketChannel*> sessions_;

    std::mutex threads_mutex_;
    std::condition_variable threads_done_;
    int active_threads_ = 0;
};
} // namespace tdmqtt
