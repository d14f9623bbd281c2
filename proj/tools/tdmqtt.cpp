// tdmqtt: master broker, edge broker, transparent subscriber, publisher, one-shot discovery
// and delay-model scenarios from a single binary.

#include <csignal>
#include <cstdlib>
#include <ctime>
#include <iostream>
#include <mutex>
#include <optional>
#include <string>

#include <CLI11.hpp>
#include <spdlog/spdlog.h>

#include "tdmqtt/tdmqtt.hpp"

namespace
{
constexpr int exit_ok = 0;
constexpr int exit_runtime = 1;
constexpr int exit_config = 2;
constexpr int exit_no_such_topic = 3;

struct Cli
{
    std::string config_path;
    std::string log_level = "warn";
    std::string listen;
    std::string master;
    std::string broker;
    std::string topic;
    std::string message;
    int qos = 0;
    int admin_port = -1;
    long long count = 0;
    std::string scenario = "breakdown";
    std::optional<std::uint64_t> seed;
};

tdmqtt::Config load(const Cli& cli)
{
    std::string path = cli.config_path;
    if (path.empty()) {
        if (const char* env = std::getenv("TDMQTT_CONFIG"))
            path = env;
    }
    return path.empty() ? tdmqtt::Config{} : tdmqtt::load_config(path);
}

tdmqtt::BrokerRef parse_address(const std::string& text, const char* flag)
{
    try {
        return tdmqtt::BrokerRef::parse(text);
    } catch (const tdmqtt::InvalidBrokerRef& e) {
        throw tdmqtt::ConfigError(std::string(flag) + ": " + e.what());
    }
}

// Signals are blocked in every thread and collected synchronously by the main thread.
sigset_t block_termination_signals()
{
    sigset_t set;
    sigemptyset(&set);
    sigaddset(&set, SIGINT);
    sigaddset(&set, SIGTERM);
    pthread_sigmask(SIG_BLOCK, &set, nullptr);
    return set;
}

bool wait_signal(const sigset_t& set, std::chrono::milliseconds slice)
{
    timespec ts{static_cast<time_t>(slice.count() / 1000), static_cast<long>((slice.count() % 1000) * 1'000'000)};
    return sigtimedwait(&set, nullptr, &ts) > 0;
}

int cmd_master(const Cli& cli, const sigset_t& signals)
{
    auto cfg = load(cli);
    if (!cli.listen.empty())
        cfg.master.listen = parse_address(cli.listen, "--listen");
    if (cfg.master.discovery.address_range.empty())
        throw tdmqtt::ConfigError("master.address_range is required");
    tdmqtt::MasterBroker master({cfg.master.listen.name, cfg.master.listen.port, cfg.master.discovery,
                                 cfg.master.verify_on_resolve});
    master.start();
    tdmqtt::logger()->warn("master: serving on {}:{}", cfg.master.listen.name, master.port());
    while (!wait_signal(signals, std::chrono::milliseconds(500))) {
    }
    master.stop();
    return exit_ok;
}

int cmd_broker(const Cli& cli, const sigset_t& signals)
{
    auto cfg = load(cli);
    if (!cli.listen.empty())
        cfg.broker.listen = parse_address(cli.listen, "--listen");
    if (cli.admin_port >= 0) {
        if (cli.admin_port > 0xFFFF)
            throw tdmqtt::ConfigError("--admin-port out of range");
        cfg.broker.admin_port = static_cast<std::uint16_t>(cli.admin_port);
    }
    tdmqtt::EdgeBroker broker({cfg.broker.listen.name, cfg.broker.listen.port, cfg.broker.admin_port});
    broker.start();
    tdmqtt::logger()->warn("broker: serving on {}:{} admin={}", cfg.broker.listen.name, broker.port(),
                           broker.admin_port() ? std::to_string(*broker.admin_port()) : "off");
    while (!wait_signal(signals, std::chrono::milliseconds(500))) {
    }
    broker.stop();
    return exit_ok;
}

int cmd_sub(const Cli& cli, const sigset_t& signals)
{
    auto cfg = load(cli);
    if (!cli.master.empty())
        cfg.client.master = parse_address(cli.master, "--master");
    tdmqtt::TopicFilter filter = [&] {
        try {
            return tdmqtt::validate_filter(cli.topic);
        } catch (const tdmqtt::MalformedFilter& e) {
            throw tdmqtt::ConfigError(std::string("--topic: ") + e.what());
        }
    }();

    std::mutex out_mutex;
    long long received = 0;
    auto session = tdmqtt::transparent_subscribe(
        cfg.client.master, filter,
        [&](const tdmqtt::Message& m) {
            std::lock_guard lock(out_mutex);
            std::cout << m.text() << '\n' << std::flush;
            ++received;
        },
        cfg.client.options);

    for (;;) {
        if (wait_signal(signals, std::chrono::milliseconds(100)))
            break;
        {
            std::lock_guard lock(out_mutex);
            if (cli.count > 0 && received >= cli.count)
                break;
        }
        if (session->state() == tdmqtt::SessionState::closed) {
            const auto failure = session->failure();
            session->close();
            if (failure)
                std::rethrow_exception(failure);
            return exit_ok;
        }
    }
    session->close();
    return exit_ok;
}

int cmd_pub(const Cli& cli)
{
    if (cli.broker.empty())
        throw tdmqtt::ConfigError("--broker is required");
    const auto broker = parse_address(cli.broker, "--broker");
    if (cli.qos != 0 && cli.qos != 1)
        throw tdmqtt::ConfigError("--qos must be 0 or 1");
    std::optional<tdmqtt::TopicName> topic;
    try {
        topic.emplace(cli.topic);
    } catch (const tdmqtt::InvalidTopicName& e) {
        throw tdmqtt::ConfigError(std::string("--topic: ") + e.what());
    }
    try {
        tdmqtt::publish(broker, *topic, cli.message, static_cast<std::uint8_t>(cli.qos));
    } catch (const tdmqtt::Redirected& r) {
        std::cerr << "tdmqtt pub: topic moved to " << r.target << '\n';
        std::cout << r.target << '\n';
        return exit_runtime;
    }
    return exit_ok;
}

int cmd_discover(const Cli& cli)
{
    const auto cfg = load(cli);
    const auto reg = tdmqtt::refresh_registry(cfg.master.discovery);
    for (const auto& [broker, topics] : reg.topics) {
        std::cout << broker.to_string() << '\t';
        bool first = true;
        for (const auto& t : topics) {
            std::cout << (first ? "" : ",") << t;
            first = false;
        }
        std::cout << '\n';
    }
    return exit_ok;
}

int cmd_eval(const Cli& cli)
{
    namespace ev = tdmqtt::eval;
    auto cfg = load(cli);
    if (cli.seed)
        cfg.eval.seed = *cli.seed;
    cfg.eval.params.validate();
    if (cli.scenario == "breakdown") {
        ev::write_breakdown_csv(std::cout, ev::breakdown(cfg.eval.params));
    } else if (cli.scenario == "fig5") {
        ev::write_mobility_csv(std::cout, ev::scenario_broker_mobility(cfg.eval.params, cfg.eval.steps,
                                                                       cfg.eval.mobility, cfg.eval.seed));
    } else if (cli.scenario == "fig6") {
        ev::write_emma_csv(std::cout, ev::scenario_emma_comparison(cfg.eval.params, cfg.eval.steps,
                                                                   cfg.eval.emma_or_default(), cfg.eval.seed));
    } else {
        throw tdmqtt::ConfigError("--scenario must be fig5, fig6 or breakdown");
    }
    return exit_ok;
}
} // namespace

int main(int argc, char** argv)
{
    const auto signals = block_termination_signals();

    CLI::App app{"MQTT edge brokers behind a redirecting master"};
    app.require_subcommand(1);
    app.fallthrough();
    Cli cli;
    app.add_option("--config", cli.config_path, "JSON configuration file (default: $TDMQTT_CONFIG)");
    app.add_option("--log-level", cli.log_level, "trace, debug, info, warn, error")->capture_default_str();

    auto* master = app.add_subcommand("master", "Run the master broker");
    master->add_option("--listen", cli.listen, "host:port to serve subscribers on");

    auto* broker = app.add_subcommand("broker", "Run an edge broker");
    broker->add_option("--listen", cli.listen, "host:port to serve MQTT on");
    broker->add_option("--admin-port", cli.admin_port, "loopback admin port (0 picks one)");

    auto* sub = app.add_subcommand("sub", "Subscribe through the master and print payloads, one per line");
    sub->add_option("--master", cli.master, "master broker host:port");
    sub->add_option("--topic", cli.topic, "topic filter")->required();
    sub->add_option("--count", cli.count, "exit after this many messages");

    auto* pub = app.add_subcommand("pub", "Publish one message to an edge broker");
    pub->add_option("--broker", cli.broker, "edge broker host:port")->required();
    pub->add_option("--topic", cli.topic, "topic name")->required();
    pub->add_option("--qos", cli.qos, "0 or 1")->capture_default_str();
    pub->add_option("--message", cli.message, "payload text");

    auto* discover = app.add_subcommand("discover", "Discover brokers and their topics once");

    auto* eval = app.add_subcommand("eval", "Print delay-model results as CSV");
    eval->add_option("--scenario", cli.scenario, "fig5, fig6 or breakdown")->capture_default_str();
    eval->add_option("--seed", cli.seed, "random seed");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? exit_ok : exit_config;
    }

    tdmqtt::logger()->set_level(spdlog::level::from_str(cli.log_level));

    try {
        if (*master)
            return cmd_master(cli, signals);
        if (*broker)
            return cmd_broker(cli, signals);
        if (*sub)
            return cmd_sub(cli, signals);
        if (*pub)
            return cmd_pub(cli);
        if (*discover)
            return cmd_discover(cli);
        if (*eval)
            return cmd_eval(cli);
    } catch (const tdmqtt::ConfigError& e) {
        std::cerr << "tdmqtt: configuration error: " << e.what() << '\n';
        return exit_config;
    } catch (const tdmqtt::UnstableQueue& e) {
        std::cerr << "tdmqtt: " << e.what() << '\n';
        return exit_config;
    } catch (const tdmqtt::NoSuchTopic& e) {
        std::cerr << "tdmqtt: " << e.what() << '\n';
        return exit_no_such_topic;
    } catch (const std::exception& e) {
        std::cerr << "tdmqtt: " << e.what() << '\n';
        return exit_runtime;
    }
    return exit_runtime;
}
