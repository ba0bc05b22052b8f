#pragma once

// Minimal stderr logger. REPKIT_LOG=error|warn|info|debug (default warn).

#include <cstdlib>
#include <iostream>
#include <string>
#include <string_view>

namespace repkit::log {

enum class Level { error = 0, warn = 1, info = 2, debug = 3 };

inline Level parse_level(std::string_view s) {
  if (s == "error") return Level::error;
  if (s == "info") return Level::info;
  if (s == "debug") return Level::debug;
  return Level::warn;
}

inline Level& threshold() {
  static Level level = [] {
    const char* env = std::getenv("REPKIT_LOG");
    return env ? parse_level(env) : Level::warn;
  }();
  return level;
}

inline void write(Level lvl, std::string_view tag, const std::string& msg) {
  if (static_cast<int>(lvl) <= static_cast<int>(threshold())) std::cerr << "[" << tag << "] " << msg << '\n';
}

inline void error(const std::string& msg) { write(Level::error, "error", msg); }
inline void warn(const std::string& msg) { write(Level::warn, "warn", msg); }
inline void info(const std::string& msg) { write(Level::info, "info", msg); }
inline void debug(const std::string& msg) { write(Level::debug, "debug", msg); }

}  // namespace repkit::log
