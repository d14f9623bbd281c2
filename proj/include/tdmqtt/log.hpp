#pragma once

#include <memory>

#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

namespace tdmqtt
{
/// Library logger. Always writes to standard error so standard output stays data-only.
inline std::shared_ptr<spdlog::logger> logger()
{
    static const auto instance = [] {
        if (auto existing = spdlog::get("tdmqtt"))
            return existing;
        auto l = spdlog::stderr_color_mt("tdmqtt");
        l->set_pattern("%Y-%m-%dT%H:%M:%S.%e %^%l%$ %v");
        l->set_level(spdlog::level::warn);
        return l;
    }();
    return instance;
}
} // namespace tdmqtt
