#include <gtest/gtest.h>

#include <future>

#include "support.hpp"

using namespace tdmqtt;
using namespace std::chrono_literals;

namespace
{
struct World
{
    int subnet = test::next_subnet();
    std::uint16_t port = test::free_port();
    std::map<int, std::unique_ptr<EdgeBroker>> brokers;
    std::unique_ptr<MasterBroker> master;

    BrokerRef ref(int host) const { return {test::fleet_host(subnet, host), port}; }

    EdgeBroker& start(int host)
    {
        brokers[host] = test::start_broker(test::fleet_host(subnet, host), port);
        return *brokers[host];
    }

    void start_master(int range)
    {
        master = std::make_unique<MasterBroker>(
            MasterBroker::Options{"127.0.0.1", 0, test::fleet_config(subnet, range, port)});
        master->start();
        ASSERT_TRUE(master->wait_for_first_refresh(5s));
    }

    static ClientOptions fast()
    {
        ClientOptions o;
        o.keepalive_interval = 200ms;
        o.timeout = 1s;
        o.connect_timeout = 1s;
        o.backoff_initial = 100ms;
        o.backoff_max = 400ms;
        return o;
    }
};

bool ends_subscribed_at(const SubscriberSession& s, const BrokerRef& b, std::chrono::milliseconds t)
{
    return s.wait_until([&](SessionState st, const std::optional<BrokerRef>& cur) {
        return st == SessionState::subscribed && cur == b;
    }, t);
}

// Every broker the session connected to was first handed to it in a Server Reference.
void expect_zero_prior_knowledge(const SubscriberSession& s)
{
    std::set<BrokerRef> referenced;
    for (const auto& e : s.history()) {
        if (e.kind == SessionEvent::Kind::master_contacted) {
            EXPECT_EQ(e.broker, s.master());
            EXPECT_EQ(e.source, AddressSource::configuration);
        }
        if (e.kind == SessionEvent::Kind::redirect_received && e.broker) {
            EXPECT_EQ(e.source, AddressSource::server_reference);
            referenced.insert(*e.broker);
        }
        if (e.kind == SessionEvent::Kind::broker_connected) {
            ASSERT_TRUE(e.broker);
            EXPECT_TRUE(referenced.count(*e.broker)) << *e.broker << " was never referenced";
        }
    }
}

int master_contacts(const SubscriberSession& s)
{
    int n = 0;
    for (const auto& e : s.history())
        n += e.kind == SessionEvent::Kind::master_contacted;
    return n;
}

// Accepts MQTT connections, answers CONNECT and SUBSCRIBE, then goes silent.
class SilentBroker
{
public:
    explicit SilentBroker(const std::string& host, std::uint16_t port) : listener_(host, port)
    {
        thread_ = std::thread([this] {
            while (auto s = listener_.accept()) {
                auto ch = std::make_shared<net::PacketChannel>(std::move(*s));
                channels_.push_back(ch);
                try {
                    while (auto p = ch->receive(net::Clock::now() + 500ms)) {
                        if (std::holds_alternative<Connect>(*p))
                            ch->send(ConnAck{success});
                        else if (auto* sub = std::get_if<Subscribe>(&*p)) {
                            ch->send(SubAck{sub->packet_id, {ReasonCode::granted_qos_1}});
                            ch->send(Publish{TopicName("a"), std::nullopt, 0, {'x'}, true});
                            break;
                        }
                    }
                } catch (const std::exception&) {
                }
            }
        });
    }
    ~SilentBroker()
    {
        listener_.shutdown();
        thread_.join();
    }

private:
    net::Listener listener_;
    std::vector<std::shared_ptr<net::PacketChannel>> channels_;
    std::thread thread_;
};
} // namespace

TEST(TransparentSubscribe, ReachesHostingBroker)
{
    World w;
    w.start(1);
    w.start(2);
    publish(w.ref(2), TopicName("a"), "first", 1);
    w.start_master(2);

    test::Inbox inbox;
    auto s = transparent_subscribe(w.master->address(), validate_filter("a"), inbox.sink(), World::fast());
    EXPECT_EQ(s->state(), SessionState::subscribed);
    EXPECT_EQ(s->current_broker(), w.ref(2));
    EXPECT_TRUE(inbox.wait_for_text("first", 2s)); // retained replay
    publish(w.ref(2), TopicName("a"), "second", 0);
    EXPECT_TRUE(inbox.wait_for_text("second", 2s));
    expect_zero_prior_knowledge(*s);
    EXPECT_EQ(s->max_open_connections(), 1);
    s->close();
    EXPECT_EQ(s->state(), SessionState::closed);
}

TEST(TransparentSubscribe, UnknownTopic)
{
    World w;
    w.start(1);
    w.start_master(1);
    test::Inbox inbox;
    EXPECT_THROW((void)transparent_subscribe(w.master->address(), validate_filter("nowhere"), inbox.sink(),
                                             World::fast()),
                 NoSuchTopic);
}

TEST(TransparentSubscribe, MasterDown)
{
    const BrokerRef nobody{"127.0.0.1", test::free_port()};
    test::Inbox inbox;
    const auto t0 = std::chrono::steady_clock::now();
    EXPECT_THROW((void)transparent_subscribe(nobody, validate_filter("a"), inbox.sink(), World::fast()),
                 MasterUnreachable);
    EXPECT_LT(std::chrono::steady_clock::now() - t0, 2s);
}

TEST(Keepalive, HealthyBrokerKeepsSession)
{
    World w;
    w.start(1);
    publish(w.ref(1), TopicName("a"), "x", 1);
    w.start_master(1);
    test::Inbox inbox;
    auto s = transparent_subscribe(w.master->address(), validate_filter("a"), inbox.sink(), World::fast());
    std::this_thread::sleep_for(1500ms); // several keepalive rounds
    EXPECT_EQ(s->state(), SessionState::subscribed);
    EXPECT_EQ(master_contacts(*s), 1);
    for (const auto& e : s->history())
        EXPECT_NE(e.kind, SessionEvent::Kind::keepalive_timeout);
}

TEST(Keepalive, SilentBrokerTriggersRecovery)
{
    World w;
    // host 1 answers the handshake and then never sends PINGRESP
    auto silent = std::make_unique<SilentBroker>(test::fleet_host(w.subnet, 1), w.port);
    w.start_master(2);

    test::Inbox inbox;
    auto s = transparent_subscribe(w.master->address(), validate_filter("a"), inbox.sink(), World::fast());
    ASSERT_EQ(s->current_broker(), w.ref(1));

    // the topic reappears on host 2 and host 1 goes away
    w.start(2);
    publish(w.ref(2), TopicName("a"), "moved", 1);
    silent.reset();

    EXPECT_TRUE(ends_subscribed_at(*s, w.ref(2), 10s));
    EXPECT_TRUE(inbox.wait_for_text("moved", 3s));
    bool timed_out = false;
    for (const auto& e : s->history())
        timed_out = timed_out || e.kind == SessionEvent::Kind::keepalive_timeout ||
                    e.kind == SessionEvent::Kind::broker_lost;
    EXPECT_TRUE(timed_out);
    EXPECT_EQ(s->max_open_connections(), 1);
    expect_zero_prior_knowledge(*s);
}

TEST(Keepalive, PingTimeoutWithoutEof)
{
    World w;
    SilentBroker silent(test::fleet_host(w.subnet, 1), w.port);
    w.start_master(1);
    test::Inbox inbox;
    auto opts = World::fast();
    opts.timeout = 600ms;
    auto s = transparent_subscribe(w.master->address(), validate_filter("a"), inbox.sink(), opts);
    // the silent broker keeps its socket open, so only the missing PINGRESP can end the session
    const bool noticed = s->wait_until([](SessionState st, const auto&) { return st != SessionState::subscribed; }, 5s);
    EXPECT_TRUE(noticed);
    bool keepalive_timeout = false;
    for (const auto& e : s->history())
        keepalive_timeout = keepalive_timeout || e.kind == SessionEvent::Kind::keepalive_timeout;
    EXPECT_TRUE(keepalive_timeout);
}

TEST(Recovery, BrokerKilledTopicNowhere)
{
    World w;
    w.start(1);
    publish(w.ref(1), TopicName("a"), "x", 1);
    w.start_master(1);
    test::Inbox inbox;
    auto s = transparent_subscribe(w.master->address(), validate_filter("a"), inbox.sink(), World::fast());
    w.brokers.at(1)->stop();
    ASSERT_TRUE(s->wait_for_state(SessionState::closed, 10s));
    ASSERT_TRUE(s->failure());
    EXPECT_THROW(std::rethrow_exception(s->failure()), NoSuchTopic);
}

TEST(Recovery, MasterOutageIsRetriedWithBackoff)
{
    World w;
    w.start(1);
    w.start(2);
    publish(w.ref(1), TopicName("a"), "x", 1);
    w.start_master(2);
    const auto master_port = w.master->port();
    test::Inbox inbox;
    auto s = transparent_subscribe(w.master->address(), validate_filter("a"), inbox.sink(), World::fast());

    w.master->stop();
    w.brokers.at(1)->stop();
    std::this_thread::sleep_for(1s); // several failed attempts
    EXPECT_EQ(s->state(), SessionState::resolving);
    publish(w.ref(2), TopicName("a"), "back", 1);
    w.master = std::make_unique<MasterBroker>(
        MasterBroker::Options{"127.0.0.1", master_port, test::fleet_config(w.subnet, 2, w.port)});
    w.master->start();
    EXPECT_TRUE(ends_subscribed_at(*s, w.ref(2), 10s));
    EXPECT_TRUE(inbox.wait_for_text("back", 3s));
    EXPECT_GE(master_contacts(*s), 3);
}

TEST(Relocation, UnknownTargetGoesThroughMaster)
{
    World w;
    w.start(1);
    w.start(2);
    publish(w.ref(1), TopicName("a"), "old", 1);
    w.start_master(2);
    test::Inbox inbox;
    auto s = transparent_subscribe(w.master->address(), validate_filter("a"), inbox.sink(), World::fast());
    ASSERT_EQ(s->current_broker(), w.ref(1));
    const auto before = w.master->stats().connections;

    publish(w.ref(2), TopicName("a"), "new", 1);
    w.brokers.at(1)->relocate_topic(TopicName("a"), std::nullopt);
    EXPECT_TRUE(ends_subscribed_at(*s, w.ref(2), 5s));
    EXPECT_TRUE(inbox.wait_for_text("new", 2s));
    EXPECT_GT(w.master->stats().connections, before);
    EXPECT_EQ(master_contacts(*s), 2);
    expect_zero_prior_knowledge(*s);
}

TEST(Relocation, KnownTargetBypassesMaster)
{
    World w;
    w.start(1);
    w.start(2);
    publish(w.ref(1), TopicName("a"), "old", 1);
    w.start_master(2);
    test::Inbox inbox;
    auto s = transparent_subscribe(w.master->address(), validate_filter("a"), inbox.sink(), World::fast());
    ASSERT_EQ(s->current_broker(), w.ref(1));
    const auto before = w.master->stats().connections;

    publish(w.ref(2), TopicName("a"), "new", 1);
    w.brokers.at(1)->relocate_topic(TopicName("a"), w.ref(2));
    EXPECT_TRUE(ends_subscribed_at(*s, w.ref(2), 5s));
    EXPECT_TRUE(inbox.wait_for_text("new", 2s));
    EXPECT_EQ(w.master->stats().connections, before);
    EXPECT_EQ(master_contacts(*s), 1);
    expect_zero_prior_knowledge(*s);
    EXPECT_EQ(s->max_open_connections(), 1);
}

TEST(Relocation, NormalDisconnectClosesSession)
{
    World w;
    w.start(1);
    publish(w.ref(1), TopicName("a"), "x", 1);
    w.start_master(1);

    // a one-shot broker that ends the session with DISCONNECT(0x00)
    World other;
    net::Listener l(test::fleet_host(other.subnet, 1), other.port);
    auto server = std::async(std::launch::async, [&] {
        auto sock = l.accept();
        if (!sock)
            return;
        try {
            net::PacketChannel ch(std::move(*sock));
            (void)net::expect<Connect>(ch, net::Clock::now() + 2s);
            ch.send(ConnAck{success});
            auto sub = net::expect<Subscribe>(ch, net::Clock::now() + 2s);
            ch.send(SubAck{sub->packet_id, {ReasonCode::granted_qos_1}});
            std::this_thread::sleep_for(100ms);
            ch.send(Disconnect{});
            std::this_thread::sleep_for(200ms);
        } catch (const std::exception&) {
        }
    });

    test::Inbox inbox;
    auto s = transparent_subscribe(w.master->address(), validate_filter("a"), inbox.sink(), World::fast());
    EXPECT_TRUE(ends_subscribed_at(*s, w.ref(1), 3s));
    w.brokers.at(1)->relocate_topic(TopicName("a"), other.ref(1));
    EXPECT_TRUE(s->wait_for_state(SessionState::closed, 3s));
    EXPECT_FALSE(s->failure());
    if (server.wait_for(0s) != std::future_status::ready) {
        try {
            (void)net::Socket::connect(other.ref(1), 1s); // unblocks accept
        } catch (const std::exception&) {
        }
    }
    server.get();
    const auto h = s->history();
    EXPECT_TRUE(std::any_of(h.begin(), h.end(), [&](const SessionEvent& e) {
        return e.kind == SessionEvent::Kind::broker_connected && e.broker == other.ref(1);
    }));
}

TEST(Publish, Qos1Acknowledged)
{
    auto b = test::start_broker("127.0.0.1", 0);
    EXPECT_NO_THROW(publish(b->address(), TopicName("p"), "v", 1));
    EXPECT_NO_THROW(publish(b->address(), TopicName("p"), "w", 0));
    EXPECT_EQ(b->core().retained_topics(), (std::set<std::string>{"p"}));
}

TEST(Publish, UnreachableBroker)
{
    EXPECT_THROW(publish(BrokerRef{"127.0.0.1", test::free_port()}, TopicName("p"), "v", 1), BrokerUnreachable);
}

TEST(Publish, RelocatedTopic)
{
    auto b = test::start_broker("127.0.0.1", 0);
    b->relocate_topic(TopicName("p"), BrokerRef{"b2", 1883});
    try {
        publish(b->address(), TopicName("p"), "v", 1);
        FAIL() << "expected Redirected";
    } catch (const Redirected& r) {
        EXPECT_EQ(r.target, (BrokerRef{"b2", 1883}));
    }
    b->relocate_topic(TopicName("q"), std::nullopt);
    EXPECT_THROW(publish(b->address(), TopicName("q"), "v", 1), TopicNotAccepted);
}
