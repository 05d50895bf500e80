#pragma once

#include <charconv>
#include <string>

namespace curvelang {

// Shortest round-trippable text for a double; locale independent.
inline std::string format_double(double x) {
  char buf[32];
  const auto res = std::to_chars(buf, buf + sizeof buf, x);
  return std::string(buf, res.ptr);
}

}  // namespace curvelang
