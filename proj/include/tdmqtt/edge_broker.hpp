#pragma once

// Minimal standard MQTT broker: sessions, '#'-aware fan-out, retained-by-default topics,
// and administrative topic relocation that redirects or rejects affected subscribers.

#include <atomic>
#include <condition_variable>
#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <variant>
#include <vector>

#include "tdmqtt/codec.hpp"
#include "tdmqtt/log.hpp"
#include "tdmqtt/net.hpp"
#include "tdmqtt/types.hpp"

namespace tdmqtt
{
/// Outbound half of a client connection as seen by the broker core.
/// Implementations must not call back into the core from send() or close().
class SessionLink
{
public:
    virtual ~SessionLink() = default;
    virtual void send(const ControlPacket& packet) = 0;
    virtual void close() = 0;
};

struct RetainedMessage
{
    std::vector<std::uint8_t> payload;
    std::uint8_t qos = 0;
};

struct Relocation
{
    std::optional<BrokerRef> target;
    bool permanent = false;
};

/// Transport-independent broker state machine. All methods are thread-safe; one mutex
/// serializes mutations and fan-out so a relocation is never overtaken by a forward.
class BrokerCore
{
public:
    using ConnectionId = std::uint64_t;

    ConnectionId open(std::shared_ptr<SessionLink> link)
    {
        std::lock_guard lock(mutex_);
        const auto id = next_connection_id_++;
        connections_.emplace(id, Connection{std::move(link), std::nullopt, {}});
        return id;
    }

    /// Dispatch one inbound packet. Protocol violations close the connection.
    void on_packet(ConnectionId id, const ControlPacket& packet)
    {
        std::lock_guard lock(mutex_);
        auto it = connections_.find(id);
        if (it == connections_.end())
            return;
        auto& conn = it->second;

        if (!conn.client_id) {
            if (const auto* c = std::get_if<Connect>(&packet))
                return handle_connect(id, conn, *c);
            logger()->debug("broker: first packet was {}, closing", packet_name(packet));
            return drop_locked(id);
        }

        std::visit(
            [&](const auto& p) {
                using T = std::decay_t<decltype(p)>;
                if constexpr (std::is_same_v<T, Subscribe>)
                    handle_subscribe(id, conn, p);
                else if constexpr (std::is_same_v<T, Publish>)
                    handle_publish(id, conn, p);
                else if constexpr (std::is_same_v<T, PingReq>)
                    conn.link->send(PingResp{});
                else if constexpr (std::is_same_v<T, PubAck>)
                    return;
                else if constexpr (std::is_same_v<T, Disconnect>)
                    drop_locked(id);
                else
                    drop_locked(id); // CONNECT twice, or a server-to-client packet
            },
            packet);
    }

    /// The transport reports the connection gone (EOF, error, malformed stream).
    void on_closed(ConnectionId id)
    {
        std::lock_guard lock(mutex_);
        drop_locked(id);
    }

    /// Move `topic` away from this broker. Matching subscribers are told where it went
    /// (0x9C / 0x9D with a Server Reference) or that it is no longer accepted here (0x8F).
    void relocate_topic(const TopicName& topic, std::optional<BrokerRef> target, bool permanent = false)
    {
        std::lock_guard lock(mutex_);
        retained_.erase(topic.str());
        relocations_[topic.str()] = Relocation{target, permanent};

        const auto notice = relocation_notice(relocations_[topic.str()]);
        std::vector<ConnectionId> affected;
        for (const auto& [id, conn] : connections_) {
            for (const auto& f : conn.filters) {
                if (topic_matches(f, topic.str())) {
                    affected.push_back(id);
                    break;
                }
            }
        }
        for (auto id : affected) {
            connections_.at(id).link->send(notice);
            drop_locked(id);
        }
        logger()->info("broker: relocated topic={} target={} notified={}", topic.str(),
                       target ? target->to_string() : "unknown", affected.size());
    }

    /// Close every connection, as if the broker process had died.
    void close_all()
    {
        std::lock_guard lock(mutex_);
        std::vector<ConnectionId> ids;
        for (const auto& [id, _] : connections_)
            ids.push_back(id);
        for (auto id : ids)
            drop_locked(id);
    }

    [[nodiscard]] std::set<std::string> retained_topics() const
    {
        std::lock_guard lock(mutex_);
        std::set<std::string> out;
        for (const auto& [t, _] : retained_)
            out.insert(t);
        return out;
    }

    [[nodiscard]] std::optional<Relocation> relocation(const std::string& topic) const
    {
        std::lock_guard lock(mutex_);
        auto it = relocations_.find(topic);
        if (it == relocations_.end())
            return std::nullopt;
        return it->second;
    }

    [[nodiscard]] std::size_t session_count() const
    {
        std::lock_guard lock(mutex_);
        return sessions_.size();
    }

    [[nodiscard]] std::map<std::string, std::set<std::string>> subscriptions() const
    {
        std::lock_guard lock(mutex_);
        return subscriptions_;
    }

private:
    struct Connection
    {
        std::shared_ptr<SessionLink> link;
        std::optional<std::string> client_id;
        std::set<std::string> filters;
        std::uint16_t next_packet_id = 1;

        std::uint16_t take_packet_id()
        {
            const auto id = next_packet_id;
            next_packet_id = next_packet_id == 0xFFFF ? 1 : next_packet_id + 1;
            return id;
        }
    };

    static Disconnect relocation_notice(const Relocation& r)
    {
        if (!r.target)
            return Disconnect{ReasonCode::topic_filter_not_accepted, std::nullopt, "topic moved"};
        return Disconnect{r.permanent ? ReasonCode::server_moved : ReasonCode::use_another_server, r.target,
                          std::nullopt};
    }

    void handle_connect(ConnectionId id, Connection& conn, const Connect& c)
    {
        auto client_id = c.client_id;
        if (client_id.empty())
            client_id = "auto-" + std::to_string(id);
        if (auto old = sessions_.find(client_id); old != sessions_.end()) {
            logger()->info("broker: client {} reconnected, evicting old session", client_id);
            drop_locked(old->second);
        }
        conn.client_id = client_id;
        sessions_[client_id] = id;
        conn.link->send(ConnAck{success});
    }

    void handle_subscribe(ConnectionId id, Connection& conn, const Subscribe& s)
    {
        SubAck ack{s.packet_id, {}};
        std::vector<std::string> accepted;
        std::optional<Relocation> moved;
        for (const auto& text : s.filters) {
            if (!is_valid_filter(text)) {
                ack.reasons.push_back(ReasonCode::topic_filter_not_accepted);
                continue;
            }
            // A filter naming a relocated topic exactly is refused; wildcard filters stay valid.
            if (auto r = relocations_.find(text); r != relocations_.end()) {
                ack.reasons.push_back(ReasonCode::topic_filter_not_accepted);
                if (!moved || (!moved->target && r->second.target))
                    moved = r->second;
                continue;
            }
            ack.reasons.push_back(ReasonCode::granted_qos_1);
            accepted.push_back(text);
        }

        for (const auto& f : accepted) {
            conn.filters.insert(f);
            subscriptions_[f].insert(*conn.client_id);
        }
        conn.link->send(ack);

        // Replay retained messages, one per matching topic.
        for (const auto& [topic, msg] : retained_) {
            const bool match =
                std::any_of(accepted.begin(), accepted.end(), [&](const auto& f) { return topic_matches(f, topic); });
            if (!match)
                continue;
            conn.link->send(make_forward(conn, topic, msg, true));
        }

        if (moved) {
            conn.link->send(relocation_notice(*moved));
            drop_locked(id);
        }
    }

    void handle_publish(ConnectionId id, Connection& conn, const Publish& p)
    {
        if (auto r = relocations_.find(p.topic.str()); r != relocations_.end()) {
            conn.link->send(relocation_notice(r->second));
            return drop_locked(id);
        }
        retained_[p.topic.str()] = RetainedMessage{p.payload, p.qos};

        std::set<ConnectionId> targets;
        for (const auto& [filter, clients] : subscriptions_) {
            if (!topic_matches(filter, p.topic.str()))
                continue;
            for (const auto& client : clients) {
                if (auto s = sessions_.find(client); s != sessions_.end())
                    targets.insert(s->second);
            }
        }
        const RetainedMessage msg{p.payload, p.qos};
        for (auto target : targets) {
            auto& dest = connections_.at(target);
            dest.link->send(make_forward(dest, p.topic.str(), msg, false));
        }
        if (p.qos == 1)
            conn.link->send(PubAck{*p.packet_id, success});
    }

    static Publish make_forward(Connection& dest, const std::string& topic, const RetainedMessage& msg, bool retain)
    {
        Publish out{TopicName(topic), std::nullopt, msg.qos, msg.payload, retain};
        if (out.qos == 1)
            out.packet_id = dest.take_packet_id();
        return out;
    }

    void drop_locked(ConnectionId id)
    {
        auto it = connections_.find(id);
        if (it == connections_.end())
            return;
        auto& conn = it->second;
        if (conn.client_id) {
            if (auto s = sessions_.find(*conn.client_id); s != sessions_.end() && s->second == id) {
                sessions_.erase(s);
                for (const auto& f : conn.filters) {
                    auto sub = subscriptions_.find(f);
                    if (sub == subscriptions_.end())
                        continue;
                    sub->second.erase(*conn.client_id);
                    if (sub->second.empty())
                        subscriptions_.erase(sub);
                }
            }
        }
        auto link = std::move(conn.link);
        connections_.erase(it);
        link->close();
    }

    mutable std::mutex mutex_;
    ConnectionId next_connection_id_ = 1;
    std::map<ConnectionId, Connection> connections_;
    std::map<std::string, ConnectionId> sessions_;                   // client-id -> connection
    std::map<std::string, std::set<std::string>> subscriptions_;     // filter -> client-ids
    std::map<std::string, RetainedMessage> retained_;                // topic -> last message
    std::map<std::string, Relocation> relocations_;                  // topic -> new home
};

/// Parse one admin line: "RELOCATE <topic> [host:port]".
struct RelocateCommand
{
    TopicName topic;
    std::optional<BrokerRef> target;
};

[[nodiscard]] inline RelocateCommand parse_admin_command(const std::string& line)
{
    std::istringstream in(line);
    std::string verb, topic, target, extra;
    in >> verb >> topic >> target >> extra;
    if (verb != "RELOCATE")
        throw ProtocolError("unknown admin command '" + verb + "'");
    if (topic.empty())
        throw ProtocolError("RELOCATE requires a topic");
    if (!extra.empty())
        throw ProtocolError("too many arguments");
    RelocateCommand cmd{TopicName(topic), std::nullopt};
    if (!target.empty())
        cmd.target = BrokerRef::parse(target);
    return cmd;
}

/// TCP front end for BrokerCore plus the loopback admin channel.
class EdgeBroker
{
public:
    struct Options
    {
        std::string host = "0.0.0.0";
        std::uint16_t port = 1883;
        std::optional<std::uint16_t> admin_port; // 0 picks a free port
        std::size_t max_packet_size = 1 << 20;
    };

    explicit EdgeBroker(Options opts) : opts_(std::move(opts)) {}
    EdgeBroker(const EdgeBroker&) = delete;
    EdgeBroker& operator=(const EdgeBroker&) = delete;
    ~EdgeBroker() { stop(); }

    void start()
    {
        listener_ = std::make_unique<net::Listener>(opts_.host, opts_.port);
        if (opts_.admin_port)
            admin_ = std::make_unique<net::Listener>("127.0.0.1", *opts_.admin_port);
        running_ = true;
        spawn([this] { accept_loop(); });
        if (admin_)
            spawn([this] { admin_loop(); });
        logger()->info("broker: listening on {}:{}", opts_.host, port());
    }

    /// Stop listening and drop every connection. Used for shutdown and to simulate a crash.
    void stop()
    {
        if (!running_.exchange(false))
            return;
        listener_->shutdown();
        if (admin_)
            admin_->shutdown();
        core_.close_all();
        {
            std::lock_guard lock(admin_mutex_);
            for (auto* s : admin_clients_)
                s->shutdown();
        }
        std::unique_lock lock(threads_mutex_);
        threads_done_.wait(lock, [this] { return active_threads_ == 0; });
        listener_.reset();
        admin_.reset();
    }

    [[nodiscard]] std::uint16_t port() const { return listener_->port(); }
    [[nodiscard]] std::optional<std::uint16_t> admin_port() const
    {
        return admin_ ? std::optional(admin_->port()) : std::nullopt;
    }
    [[nodiscard]] BrokerRef address() const
    {
        return BrokerRef{opts_.host == "0.0.0.0" ? "127.0.0.1" : opts_.host, port()};
    }

    void relocate_topic(const TopicName& t, std::optional<BrokerRef> target, bool permanent = false)
    {
        core_.relocate_topic(t, std::move(target), permanent);
    }

    [[nodiscard]] BrokerCore& core() noexcept { return core_; }
    [[nodiscard]] const BrokerCore& core() const noexcept { return core_; }

private:
    class TcpLink : public SessionLink
    {
    public:
        explicit TcpLink(net::PacketChannel& ch) : channel_(ch) {}
        void send(const ControlPacket& p) override
        {
            if (closed_)
                return;
            try {
                channel_.send(p);
            } catch (const std::exception&) {
                // the reader side notices and reports the close
                channel_.shutdown();
            }
        }
        void close() override
        {
            closed_ = true;
            channel_.shutdown();
        }

    private:
        net::PacketChannel& channel_;
        std::atomic<bool> closed_{false};
    };

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
            if (!sock)
                break;
            if (!running_)
                break;
            auto channel = std::make_shared<net::PacketChannel>(std::move(*sock), opts_.max_packet_size);
            spawn([this, channel] { serve(channel); });
        }
    }

    void serve(std::shared_ptr<net::PacketChannel> channel)
    {
        auto link = std::make_shared<TcpLink>(*channel);
        const auto id = core_.open(link);
        if (!running_)
            core_.on_closed(id);
        try {
            for (;;) {
                auto packet = channel->receive_blocking();
                core_.on_packet(id, packet);
            }
        } catch (const std::exception& e) {
            logger()->debug("broker: connection {} ended: {}", id, e.what());
        }
        core_.on_closed(id);
    }

    void admin_loop()
    {
        while (running_) {
            auto sock = admin_->accept();
            if (!sock)
                break;
            {
                std::lock_guard lock(admin_mutex_);
                admin_clients_.insert(&*sock);
            }
            serve_admin(*sock);
            std::lock_guard lock(admin_mutex_);
            admin_clients_.erase(&*sock);
        }
    }

    void serve_admin(const net::Socket& sock)
    {
        std::string pending;
        try {
            for (;;) {
                std::uint8_t buf[512];
                const auto n = sock.read_some(buf);
                if (n == 0)
                    return;
                pending.append(reinterpret_cast<const char*>(buf), n);
                for (auto nl = pending.find('\n'); nl != std::string::npos; nl = pending.find('\n')) {
                    auto line = pending.substr(0, nl);
                    pending.erase(0, nl + 1);
                    if (!line.empty() && line.back() == '\r')
                        line.pop_back();
                    if (line.empty())
                        continue;
                    std::string reply = "OK\n";
                    try {
                        auto cmd = parse_admin_command(line);
                        relocate_topic(cmd.topic, cmd.target);
                    } catch (const std::exception& e) {
                        reply = std::string("ERR ") + e.what() + "\n";
                    }
                    sock.write_all(std::span(reinterpret_cast<const std::uint8_t*>(reply.data()), reply.size()));
                }
            }
        } catch (const std::exception& e) {
            logger()->debug("broker: admin connection ended: {}", e.what());
        }
    }

    Options opts_;
    BrokerCore core_;
    std::unique_ptr<net::Listener> listener_;
    std::unique_ptr<net::Listener> admin_;
    std::atomic<bool> running_{false};

    std::mutex threads_mutex_;
    std::condition_variable threads_done_;
    int active_threads_ = 0;

    std::mutex admin_mutex_;
    std::set<const net::Socket*> admin_clients_;
};

/// Send one admin line and return the reply line (without the newline).
inline std::string send_admin_command(const BrokerRef& admin, const std::string& line,
                                      std::chrono::milliseconds timeout = std::chrono::seconds(5))
{
    const auto deadline = net::Clock::now() + timeout;
    auto sock = net::Socket::connect(admin, timeout);
    const auto text = line + "\n";
    sock.write_all(std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
    std::string reply;
    while (reply.find('\n') == std::string::npos) {
        if (!sock.wait_readable(deadline))
            throw ConnectionClosed("admin reply timed out");
        std::uint8_t buf[256];
        const auto n = sock.read_some(buf);
        if (n == 0)
            break;
        reply.append(reinterpret_cast<const char*>(buf), n);
    }
    if (auto nl = reply.find('\n'); nl != std::string::npos)
        reply.resize(nl);
    return reply;
}
} // namespace tdmqtt
