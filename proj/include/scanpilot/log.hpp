#pragma once

// Minimal stderr logger. Level comes from the SCANPILOT_LOG environment
// variable: error, warn (default), info, debug.

#include <cstdlib>
#include <iostream>
#include <string>

namespace scanpilot::log {

enum class Level { kError = 0, kWarn = 1, kInfo = 2, kDebug = 3 };

inline Level threshold() {
  static const Level level = [] {
    const char* env = std::getenv("SCANPILOT_LOG");
    if (!env) return Level::kWarn;
    const std::string v(env);
    if (v == "error") return Level::kError;
    if (v == "info") return Level::kInfo;
    if (v == "debug") return Level::kDebug;
    return Level::kWarn;
  }();
  return level;
}

inline void emit(Level level, const std::string& msg) {
  if (level > threshold()) return;
  static const char* names[] = {"error", "warn", "info", "debug"};
  std::cerr << "[scanpilot:" << names[static_cast<int>(level)] << "] " << msg << '\n';
}

inline void error(const std::string& msg) { emit(Level::kError, msg); }
inline void warn(const std::string& msg) { emit(Level::kWarn, msg); }
inline void info(const std::string& msg) { emit(Level::kInfo, msg); }
inline void debug(const std::string& msg) { emit(Level::kDebug, msg); }

}  // namespace scanpilot::log
