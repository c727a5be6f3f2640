#pragma once

#include <cstdio>
#include <cstdlib>
#include <cstring>

namespace abq {

/// Log levels, selected via the ABQ_LOG environment variable
/// (off | warn | info | debug). Default: warn.
enum class LogLevel : int { Off = 0, Warn = 1, Info = 2, Debug = 3 };

inline LogLevel log_level() {
  static LogLevel level = [] {
    const char* env = std::getenv("ABQ_LOG");
    if (!env) return LogLevel::Warn;
    if (!std::strcmp(env, "off")) return LogLevel::Off;
    if (!std::strcmp(env, "info")) return LogLevel::Info;
    if (!std::strcmp(env, "debug")) return LogLevel::Debug;
    return LogLevel::Warn;
  }();
  return level;
}

template <typename... Args>
inline void log(LogLevel lvl, const char* fmt, Args... args) {
  if (static_cast<int>(lvl) > static_cast<int>(log_level())) return;
  const char* tag = lvl == LogLevel::Warn ? "warn" : lvl == LogLevel::Info ? "info" : "debug";
  std::fprintf(stderr, "[abq:%s] ", tag);
  std::fprintf(stderr, fmt, args...);
  std::fprintf(stderr, "\n");
}

}  // namespace abq
