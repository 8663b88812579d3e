#pragma once

#include <fmt/core.h>

#include <cstdio>
#include <utility>

namespace svqa::log {

enum class Level { debug = 0, info = 1, warn = 2, error = 3, quiet = 4 };

Level threshold() noexcept;
void set_threshold(Level level) noexcept;

template <typename... Args>
void emit(Level level, const char* tag, fmt::format_string<Args...> f, Args&&... args) {
  if (level < threshold()) return;
  fmt::print(stderr, "[{}] ", tag);
  fmt::print(stderr, f, std::forward<Args>(args)...);
  std::fputc('\n', stderr);
}

template <typename... Args>
void info(fmt::format_string<Args...> f, Args&&... args) {
  emit(Level::info, "info", f, std::forward<Args>(args)...);
}

template <typename... Args>
void warn(fmt::format_string<Args...> f, Args&&... args) {
  emit(Level::warn, "warn", f, std::forward<Args>(args)...);
}

template <typename... Args>
void debug(fmt::format_string<Args...> f, Args&&... args) {
  emit(Level::debug, "debug", f, std::forward<Args>(args)...);
}

}  // namespace svqa::log
