#pragma once

#include <chrono>
#include <condition_variable>
#include <cstdint>
#include <functional>
#include <memory>
#include <mutex>
#include <random>
#include <string>
#include <thread>
#include <vector>

#include "tdmqtt/tdmqtt.hpp"

namespace tdmqtt::test
{
using namespace std::chrono_literals;

// A port that is free on every 127.0.0.x address right now.
inline std::uint16_t free_port()
{
    net::Listener probe("127.0.0.1", 0);
    return probe.port();
}

// Loopback fleet subnet: hosts 127.0.<subnet>.1 .. .n all share one port.
inline std::string fleet_host(int subnet, int host) { return "127.0." + std::to_string(subnet) + "." + std::to_string(host); }

// Subnets handed out to tests so concurrently running binaries do not collide.
inline int next_subnet()
{
    static std::mt19937 rng(std::random_device{}());
    static int next = 10 + static_cast<int>(rng() % 200);
    const int s = next;
    next = next >= 250 ? 10 : next + 1;
    return s;
}

inline std::unique_ptr<EdgeBroker> start_broker(const std::string& host, std::uint16_t port, bool admin = false)
{
    EdgeBroker::Options o;
    o.host = host;
    o.port = port;
    if (admin)
        o.admin_port = 0;
    auto b = std::make_unique<EdgeBroker>(o);
    b->start();
    return b;
}

inline DiscoveryConfig fleet_config(int subnet, int range, std::uint16_t port)
{
    DiscoveryConfig cfg;
    for (int h = 1; h <= range; ++h)
        cfg.address_range.push_back(fleet_host(subnet, h));
    cfg.port = port;
    cfg.timeout = 250ms;
    cfg.listen_window = 200ms;
    cfg.refresh_period = 1h;
    return cfg;
}

// Thread-safe collector for subscriber deliveries.
class Inbox
{
public:
    MessageSink sink()
    {
        return [this](const Message& m) {
            {
                std::lock_guard lock(mutex_);
                messages_.push_back(m);
            }
            cv_.notify_all();
        };
    }

    bool wait_for_text(const std::string& text, std::chrono::milliseconds timeout)
    {
        std::unique_lock lock(mutex_);
        return cv_.wait_for(lock, timeout, [&] {
            for (const auto& m : messages_)
                if (m.text() == text)
                    return true;
            return false;
        });
    }

    std::vector<Message> messages() const
    {
        std::lock_guard lock(mutex_);
        return messages_;
    }

private:
    mutable std::mutex mutex_;
    std::condition_variable cv_;
    std::vector<Message> messages_;
};

// Keeps publishing `payload` until `done` holds or the deadline passes.
inline bool publish_until(const BrokerRef& broker, const std::string& topic, const std::string& payload,
                          const std::function<bool()>& done, std::chrono::milliseconds timeout)
{
    const auto deadline = std::chrono::steady_clock::now() + timeout;
    while (std::chrono::steady_clock::now() < deadline) {
        try {
            publish(broker, TopicName(topic), payload, 1, PublishOptions{1s, {}});
        } catch (const std::exception&) {
        }
        if (done())
            return true;
        std::this_thread::sleep_for(50ms);
    }
    return done();
}
} // namespace tdmqtt::test
