#pragma once

// Subscriber side of transparent subscriptions: ask the master, follow the Server Reference,
// keep the data broker alive with PINGREQ, and re-resolve on failure or relocation.
// Also a one-shot publisher helper.

#include <algorithm>
#include <atomic>
#include <chrono>
#include <condition_variable>
#include <cstdint>
#include <exception>
#include <functional>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "tdmqtt/codec.hpp"
#include "tdmqtt/log.hpp"
#include "tdmqtt/master_broker.hpp"
#include "tdmqtt/net.hpp"
#include "tdmqtt/types.hpp"

namespace tdmqtt
{
using namespace std::chrono_literals;

struct Redirected : Error
{
    Redirected(BrokerRef to, ReasonCode rc) : Error("redirected to " + to.to_string()), target(std::move(to)), reason(rc)
    {
    }

    BrokerRef target;
    ReasonCode reason;
};

struct Message
{
    std::string topic;
    std::vector<std::uint8_t> payload;
    std::uint8_t qos = 0;
    bool retain = false;

    [[nodiscard]] std::string text() const { return {payload.begin(), payload.end()}; }
};

using MessageSink = std::function<void(const Message&)>;

struct ClientOptions
{
    std::chrono::milliseconds keepalive_interval = 5s;
    std::chrono::milliseconds timeout = 10s;          // PINGRESP / ack wait
    std::chrono::milliseconds connect_timeout = 5s;
    std::chrono::milliseconds resolve_timeout = 30s;  // master's redirect may follow a refresh
    std::chrono::milliseconds backoff_initial = 500ms;
    std::chrono::milliseconds backoff_max = 8s;
    int max_redirects = 8;
    std::string client_id; // generated when empty
};

enum class SessionState
{
    resolving,
    subscribed,
    reconnecting,
    closed,
};

[[nodiscard]] inline const char* to_string(SessionState s)
{
    switch (s) {
    case SessionState::resolving: return "resolving";
    case SessionState::subscribed: return "subscribed";
    case SessionState::reconnecting: return "reconnecting";
    case SessionState::closed: return "closed";
    }
    return "?";
}

/// Where an address the session connected to came from.
enum class AddressSource
{
    configuration,
    server_reference,
};

struct SessionEvent
{
    enum class Kind
    {
        master_contacted,
        redirect_received,
        broker_connected,
        broker_lost,
        keepalive_timeout,
        disconnect_received,
        closed,
    };

    Kind kind;
    std::optional<BrokerRef> broker;
    AddressSource source = AddressSource::configuration;
    ReasonCode reason = ReasonCode::normal;
    std::chrono::steady_clock::time_point at = std::chrono::steady_clock::now();
};

class SubscriberSession
{
public:
    SubscriberSession(BrokerRef master, TopicFilter filter, MessageSink sink, ClientOptions opts = {})
        : master_(std::move(master)), filter_(std::move(filter)), sink_(std::move(sink)), opts_(std::move(opts))
    {
        if (opts_.client_id.empty())
            opts_.client_id = detail::unique_client_id("tdmqtt-sub");
    }
    SubscriberSession(const SubscriberSession&) = delete;
    SubscriberSession& operator=(const SubscriberSession&) = delete;
    ~SubscriberSession() { close(); }

    /// Initial transparent subscription, then background delivery and keepalive.
    /// Throws NoSuchTopic or MasterUnreachable.
    void start()
    {
        try {
            establish(true);
        } catch (...) {
            set_state(SessionState::closed);
            throw;
        }
        worker_ = std::thread([this] { run(); });
    }

    /// Sends DISCONNECT(0x00) to the current broker and stops the session.
    void close()
    {
        if (stopping_.exchange(true)) {
            if (worker_.joinable() && worker_.get_id() != std::this_thread::get_id())
                worker_.join();
            return;
        }
        wake_.notify_all();
        {
            std::lock_guard lock(channel_mutex_);
            if (channel_) {
                try {
                    channel_->send(Disconnect{});
                } catch (const std::exception&) {
                }
                channel_->shutdown();
            }
        }
        if (worker_.joinable() && worker_.get_id() != std::this_thread::get_id())
            worker_.join();
        set_state(SessionState::closed);
    }

    [[nodiscard]] SessionState state() const
    {
        std::lock_guard lock(state_mutex_);
        return state_;
    }

    [[nodiscard]] std::optional<BrokerRef> current_broker() const
    {
        std::lock_guard lock(state_mutex_);
        return current_broker_;
    }

    [[nodiscard]] std::vector<SessionEvent> history() const
    {
        std::lock_guard lock(state_mutex_);
        return history_;
    }

    [[nodiscard]] std::optional<std::string> last_error() const
    {
        std::lock_guard lock(state_mutex_);
        return last_error_;
    }

    /// The error that ended the session, if it ended on its own.
    [[nodiscard]] std::exception_ptr failure() const
    {
        std::lock_guard lock(state_mutex_);
        return failure_;
    }

    [[nodiscard]] int max_open_connections() const noexcept { return max_open_; }
    [[nodiscard]] const BrokerRef& master() const noexcept { return master_; }
    [[nodiscard]] const TopicFilter& filter() const noexcept { return filter_; }

    /// Wait until `pred(state, current_broker)` holds or `timeout` elapses.
    template<class Pred>
    bool wait_until(Pred pred, std::chrono::milliseconds timeout) const
    {
        std::unique_lock lock(state_mutex_);
        return state_cv_.wait_for(lock, timeout, [&] { return pred(state_, current_broker_); });
    }

    bool wait_for_state(SessionState s, std::chrono::milliseconds timeout) const
    {
        return wait_until([s](SessionState st, const auto&) { return st == s; }, timeout);
    }

private:
    enum class AttachResult
    {
        subscribed,
        redirected,
        rejected,
        unreachable,
    };

    void run()
    {
        while (!stopping_) {
            std::optional<Disconnect> notice;
            bool lost = false;
            try {
                notice = pump();
                if (!notice && !stopping_)
                    lost = true; // keepalive timeout
            } catch (const std::exception& e) {
                if (stopping_)
                    break;
                logger()->info("sub: connection to {} lost: {}", describe_current(), e.what());
                record({SessionEvent::Kind::broker_lost, current_broker()});
                lost = true;
            }
            if (stopping_)
                break;
            try {
                if (notice) {
                    if (!on_disconnect(*notice))
                        break;
                } else if (lost) {
                    teardown();
                    set_state(SessionState::reconnecting);
                    establish(false);
                }
            } catch (const std::exception& e) {
                logger()->warn("sub: giving up on {}: {}", filter_.str(), e.what());
                {
                    std::lock_guard lock(state_mutex_);
                    last_error_ = e.what();
                    failure_ = std::current_exception();
                }
                teardown();
                record({SessionEvent::Kind::closed, std::nullopt});
                set_state(SessionState::closed);
                return;
            }
        }
        teardown();
        set_state(SessionState::closed);
    }

    // Deliver messages and run the keepalive until a DISCONNECT arrives (returned),
    // the keepalive times out (nullopt) or the connection fails (throws).
    std::optional<Disconnect> pump()
    {
        net::PacketChannel* ch = nullptr;
        {
            std::lock_guard lock(channel_mutex_);
            ch = channel_.get();
        }
        if (!ch)
            throw ConnectionClosed("no connection");

        auto next_ping = net::Clock::now() + opts_.keepalive_interval;
        std::optional<net::Clock::time_point> ping_deadline;
        while (!stopping_) {
            const auto deadline = ping_deadline ? std::min(*ping_deadline, next_ping) : next_ping;
            auto packet = ch->receive(deadline);
            if (packet) {
                if (auto* pub = std::get_if<Publish>(&*packet)) {
                    if (pub->qos == 1)
                        ch->send(PubAck{*pub->packet_id, success});
                    sink_(Message{pub->topic.str(), pub->payload, pub->qos, pub->retain});
                } else if (std::holds_alternative<PingResp>(*packet)) {
                    ping_deadline.reset();
                } else if (auto* d = std::get_if<Disconnect>(&*packet)) {
                    return *d;
                }
                continue;
            }
            const auto now = net::Clock::now();
            if (ping_deadline && now >= *ping_deadline) {
                logger()->info("sub: no PINGRESP from {} within {} ms", describe_current(), opts_.timeout.count());
                record({SessionEvent::Kind::keepalive_timeout, current_broker()});
                return std::nullopt;
            }
            if (now >= next_ping) {
                ch->send(PingReq{});
                if (!ping_deadline)
                    ping_deadline = now + opts_.timeout;
                next_ping = now + opts_.keepalive_interval;
            }
        }
        return std::nullopt;
    }

    // Returns false when the session should end.
    bool on_disconnect(const Disconnect& d)
    {
        record({SessionEvent::Kind::disconnect_received, current_broker(), AddressSource::configuration, d.reason});
        teardown();
        if (is_redirect(d.reason) && d.server_reference) {
            set_state(SessionState::reconnecting);
            record({SessionEvent::Kind::redirect_received, d.server_reference, AddressSource::server_reference,
                    d.reason});
            if (follow(*d.server_reference))
                return true;
            establish(false);
            return true;
        }
        if (d.reason == ReasonCode::topic_filter_not_accepted) {
            set_state(SessionState::reconnecting);
            establish(false);
            return true;
        }
        set_state(SessionState::closed);
        return false;
    }

    // Ask the master and attach, retrying per the recovery policy.
    void establish(bool initial)
    {
        auto backoff = opts_.backoff_initial;
        int rounds = 0;
        while (!stopping_) {
            try {
                const auto target = ask_master();
                if (follow(target))
                    return;
                if (++rounds > opts_.max_redirects)
                    throw NoSuchTopic("no broker accepted " + filter_.str());
            } catch (const MasterUnreachable& e) {
                if (initial)
                    throw;
                logger()->warn("sub: master unreachable ({}), retrying in {} ms", e.what(), backoff.count());
                std::unique_lock lock(state_mutex_);
                wake_.wait_for(lock, backoff, [this] { return stopping_.load(); });
                backoff = std::min(backoff * 2, opts_.backoff_max);
            }
        }
    }

    // Attach to `target`, following broker-issued redirects directly.
    bool follow(BrokerRef target)
    {
        for (int hop = 0; hop <= opts_.max_redirects && !stopping_; ++hop) {
            std::optional<BrokerRef> next;
            switch (attach(target, next)) {
            case AttachResult::subscribed:
                return true;
            case AttachResult::redirected:
                record({SessionEvent::Kind::redirect_received, next, AddressSource::server_reference});
                target = *next;
                continue;
            case AttachResult::rejected:
            case AttachResult::unreachable:
                return false;
            }
        }
        return false;
    }

    AttachResult attach(const BrokerRef& target, std::optional<BrokerRef>& redirect)
    {
        teardown();
        set_state(SessionState::reconnecting);
        try {
            open(net::PacketChannel::connect(target, opts_.connect_timeout));
        } catch (const std::exception& e) {
            logger()->info("sub: cannot reach {}: {}", target.to_string(), e.what());
            return AttachResult::unreachable;
        }
        try {
            auto& ch = *channel_;
            ch.send(Connect{opts_.client_id, keepalive_seconds()});
            auto ack = net::expect<ConnAck>(ch, net::Clock::now() + opts_.timeout);
            if (!ack || is_failure(ack->reason)) {
                teardown();
                return AttachResult::unreachable;
            }
            ch.send(Subscribe{next_packet_id(), {filter_.str()}});
            std::optional<Disconnect> notice;
            auto suback = net::expect<SubAck>(ch, net::Clock::now() + opts_.timeout, &notice);
            if (suback && is_failure(suback->reasons.at(0))) {
                // a relocation notice may follow the refusal
                try {
                    if (auto d = net::expect<Disconnect>(ch, net::Clock::now() + std::min(opts_.timeout, 2000ms)))
                        notice = std::move(*d);
                } catch (const ConnectionClosed&) {
                }
            }
            if (notice) {
                teardown();
                record({SessionEvent::Kind::disconnect_received, target, AddressSource::server_reference,
                        notice->reason});
                if (is_redirect(notice->reason) && notice->server_reference) {
                    redirect = notice->server_reference;
                    return AttachResult::redirected;
                }
                return AttachResult::rejected;
            }
            if (!suback) {
                teardown();
                return AttachResult::unreachable;
            }
            if (is_failure(suback->reasons.at(0))) {
                teardown();
                return AttachResult::rejected;
            }
        } catch (const std::exception& e) {
            logger()->info("sub: attach to {} failed: {}", target.to_string(), e.what());
            teardown();
            return AttachResult::unreachable;
        }
        {
            std::lock_guard lock(state_mutex_);
            current_broker_ = target;
            state_ = SessionState::subscribed;
            history_.push_back({SessionEvent::Kind::broker_connected, target, AddressSource::server_reference});
        }
        state_cv_.notify_all();
        logger()->info("sub: subscribed to {} at {}", filter_.str(), target.to_string());
        return AttachResult::subscribed;
    }

    BrokerRef ask_master()
    {
        teardown();
        set_state(SessionState::resolving);
        record({SessionEvent::Kind::master_contacted, master_, AddressSource::configuration});
        try {
            open(net::PacketChannel::connect(master_, opts_.connect_timeout));
        } catch (const std::exception& e) {
            throw MasterUnreachable(e.what());
        }
        std::optional<Disconnect> verdict;
        try {
            auto& ch = *channel_;
            ch.send(Connect{opts_.client_id, keepalive_seconds()});
            auto ack = net::expect<ConnAck>(ch, net::Clock::now() + opts_.timeout);
            if (!ack || is_failure(ack->reason))
                throw MasterUnreachable("master refused the connection");
            ch.send(Subscribe{next_packet_id(), {filter_.str()}});
            const auto deadline = net::Clock::now() + opts_.resolve_timeout;
            auto suback = net::expect<SubAck>(ch, deadline, &verdict);
            if (suback && !verdict) {
                if (auto d = net::expect<Disconnect>(ch, deadline))
                    verdict = std::move(*d);
            }
        } catch (const MasterUnreachable&) {
            teardown();
            throw;
        } catch (const std::exception& e) {
            teardown();
            throw MasterUnreachable(std::string("master exchange failed: ") + e.what());
        }
        teardown();
        if (!verdict)
            throw MasterUnreachable("master did not answer");
        if (is_redirect(verdict->reason) && verdict->server_reference) {
            record({SessionEvent::Kind::redirect_received, verdict->server_reference,
                    AddressSource::server_reference, verdict->reason});
            return *verdict->server_reference;
        }
        if (verdict->reason == ReasonCode::topic_filter_not_accepted)
            throw NoSuchTopic("no broker holds a topic matching " + filter_.str());
        throw MasterUnreachable("unexpected DISCONNECT from master");
    }

    void open(std::unique_ptr<net::PacketChannel> ch)
    {
        std::lock_guard lock(channel_mutex_);
        channel_ = std::move(ch);
        max_open_ = std::max(max_open_.load(), ++open_count_);
        if (stopping_)
            channel_->shutdown();
    }

    void teardown()
    {
        std::lock_guard lock(channel_mutex_);
        if (!channel_)
            return;
        channel_->shutdown();
        channel_.reset();
        --open_count_;
        std::lock_guard state_lock(state_mutex_);
        current_broker_.reset();
    }

    void set_state(SessionState s)
    {
        {
            std::lock_guard lock(state_mutex_);
            state_ = s;
        }
        state_cv_.notify_all();
    }

    void record(SessionEvent e)
    {
        std::lock_guard lock(state_mutex_);
        history_.push_back(std::move(e));
    }

    std::string describe_current() const
    {
        auto b = current_broker();
        return b ? b->to_string() : "<none>";
    }

    std::uint16_t keepalive_seconds() const
    {
        const auto s = std::chrono::ceil<std::chrono::seconds>(opts_.keepalive_interval).count();
        return static_cast<std::uint16_t>(std::clamp<long long>(s, 1, 0xFFFF));
    }

    std::uint16_t next_packet_id()
    {
        packet_id_ = packet_id_ == 0xFFFF ? 1 : packet_id_ + 1;
        return packet_id_;
    }

    const BrokerRef master_;
    const TopicFilter filter_;
    MessageSink sink_;
    ClientOptions opts_;

    std::atomic<bool> stopping_{false};
    std::thread worker_;
    std::condition_variable_any wake_;

    std::mutex channel_mutex_;
    std::unique_ptr<net::PacketChannel> channel_;
    std::atomic<int> open_count_{0};
    std::atomic<int> max_open_{0};
    std::uint16_t packet_id_ = 0;

    mutable std::mutex state_mutex_;
    mutable std::condition_variable state_cv_;
    SessionState state_ = SessionState::resolving;
    std::optional<BrokerRef> current_broker_;
    std::vector<SessionEvent> history_;
    std::optional<std::string> last_error_;
    std::exception_ptr failure_;
};

/// Subscribe to `filter` knowing only the master's address.
[[nodiscard]] inline std::unique_ptr<SubscriberSession> transparent_subscribe(const BrokerRef& master,
                                                                              TopicFilter filter, MessageSink sink,
                                                                              ClientOptions opts = {})
{
    auto s = std::make_unique<SubscriberSession>(master, std::move(filter), std::move(sink), std::move(opts));
    s->start();
    return s;
}

struct PublishOptions
{
    std::chrono::milliseconds timeout = 10s;
    std::string client_id;
};

/// CONNECT, PUBLISH, PUBACK (QoS 1 only), DISCONNECT.
/// Throws BrokerUnreachable, Redirected, or TopicNotAccepted.
inline void publish(const BrokerRef& broker, const TopicName& topic, std::vector<std::uint8_t> payload,
                    std::uint8_t qos, PublishOptions opts = {})
{
    if (qos > 1)
        throw InvalidPacket("QoS must be 0 or 1");
    std::unique_ptr<net::PacketChannel> ch;
    try {
        ch = net::PacketChannel::connect(broker, opts.timeout);
    } catch (const std::exception& e) {
        throw BrokerUnreachable(e.what());
    }
    std::optional<Disconnect> notice;
    try {
        ch->send(Connect{opts.client_id.empty() ? detail::unique_client_id("tdmqtt-pub") : opts.client_id, 0});
        auto ack = net::expect<ConnAck>(*ch, net::Clock::now() + opts.timeout);
        if (!ack || is_failure(ack->reason))
            throw BrokerUnreachable("no CONNACK from " + broker.to_string());
        Publish p{topic, std::nullopt, qos, std::move(payload), false};
        if (qos == 1)
            p.packet_id = 1;
        ch->send(p);
        if (qos == 1) {
            auto puback = net::expect<PubAck>(*ch, net::Clock::now() + opts.timeout, &notice);
            if (!puback && !notice)
                throw BrokerUnreachable("no PUBACK from " + broker.to_string());
        }
        if (!notice)
            ch->send(Disconnect{});
    } catch (const BrokerUnreachable&) {
        throw;
    } catch (const std::exception& e) {
        throw BrokerUnreachable(std::string("publish failed: ") + e.what());
    }
    if (notice) {
        if (is_redirect(notice->reason) && notice->server_reference)
            throw Redirected(*notice->server_reference, notice->reason);
        throw TopicNotAccepted("broker " + broker.to_string() + " no longer accepts " + topic.str());
    }
}

inline void publish(const BrokerRef& broker, const TopicName& topic, std::string_view payload, std::uint8_t qos,
                    PublishOptions opts = {})
{
    publish(broker, topic, std::vector<std::uint8_t>(payload.begin(), payload.end()), qos, std::move(opts));
}
} // namespace tdmqtt
