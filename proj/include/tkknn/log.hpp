#pragma once

#include <cstdlib>
#include <iostream>
#include <mutex>
#include <sstream>
#include <string>
#include <string_view>

namespace tkknn::log {

enum class Level { debug = 0, info = 1, warn = 2, error = 3, off = 4 };

inline Level parse_level(std::string_view s) {
  if (s == "debug") return Level::debug;
  if (s == "info") return Level::info;
  if (s == "warn" || s == "warning") return Level::warn;
  if (s == "error") return Level::error;
  if (s == "off" || s == "none") return Level::off;
  return Level::warn;
}

// Threshold read once from TKKNN_LOG; defaults to warn.
inline Level& threshold() {
  static Level level = [] {
    const char* env = std::getenv("TKKNN_LOG");
    return env ? parse_level(env) : Level::warn;
  }();
  return level;
}

inline void set_level(Level l) { threshold() = l; }

template <typename... Args>
void write(Level l, std::string_view tag, Args&&... args) {
  if (l < threshold()) return;
  std::ostringstream os;
  os << "[tkknn " << tag << "] ";
  (os << ... << args);
  os << '\n';
  static std::mutex mu;
  std::lock_guard lock(mu);
  std::cerr << os.str();
}

template <typename... Args> void debug(Args&&... a) { write(Level::debug, "debug", a...); }
template <typename... Args> void info(Args&&... a) { write(Level::info, "info", a...); }
template <typename... Args> void warn(Args&&... a) { write(Level::warn, "warn", a...); }
template <typename... Args> void error(Args&&... a) { write(Level::error, "error", a...); }

}  // namespace tkknn::log
