#include "svqa/core/log.hpp"

#include <atomic>

namespace svqa::log {

namespace {
std::atomic<Level> g_threshold{Level::info};
}

Level threshold() noexcept { return g_threshold.load(std::memory_order_relaxed); }
void set_threshold(Level level) noexcept { g_threshold.store(level, std::memory_order_relaxed); }

}  // namespace svqa::log
