#pragma once

#include <chrono>
#include <compare>
#include <cstdint>
#include <cstdio>
#include <ctime>
#include <string>
#include <string_view>

#include "senaudit/error.hpp"

namespace senaudit {

/// Milliseconds since the Unix epoch, UTC. Rendered as `YYYY-MM-DDTHH:MM:SS.mmmZ`.
struct Timestamp {
  std::int64_t unix_ms = 0;

  auto operator<=>(const Timestamp&) const = default;

  static Timestamp now() {
    using namespace std::chrono;
    return {duration_cast<milliseconds>(system_clock::now().time_since_epoch()).count()};
  }

  std::string iso8601() const {
    std::int64_t secs = unix_ms / 1000;
    std::int64_t ms = unix_ms % 1000;
    if (ms < 0) {
      ms += 1000;
      --secs;
    }
    std::time_t t = static_cast<std::time_t>(secs);
    std::tm tm{};
    gmtime_r(&t, &tm);
    char buf[96];
    std::snprintf(buf, sizeof buf, "%04d-%02d-%02dT%02d:%02d:%02d.%03dZ", tm.tm_year + 1900,
                  tm.tm_mon + 1, tm.tm_mday, tm.tm_hour, tm.tm_min, tm.tm_sec, static_cast<int>(ms));
    return buf;
  }

  static Timestamp parse(std::string_view text) {
    std::tm tm{};
    int ms = 0;
    std::string s(text);
    int n = std::sscanf(s.c_str(), "%4d-%2d-%2dT%2d:%2d:%2d.%3dZ", &tm.tm_year, &tm.tm_mon,
                        &tm.tm_mday, &tm.tm_hour, &tm.tm_min, &tm.tm_sec, &ms);
    if (n != 7 && n != 6) throw Error(ErrorCode::format, "bad timestamp: " + s);
    tm.tm_year -= 1900;
    tm.tm_mon -= 1;
    std::int64_t secs = timegm(&tm);
    return {secs * 1000 + ms};
  }
};

}  // namespace senaudit
