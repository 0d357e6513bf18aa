#pragma once

#include <charconv>
#include <string>
#include <string_view>
#include <system_error>

#include "smoothcert/error.hpp"

namespace smoothcert {

// Shortest decimal text that parses back to exactly `value`.
inline std::string format_double(double value) {
  char buf[32];
  const auto res = std::to_chars(buf, buf + sizeof(buf), value);
  return std::string(buf, res.ptr);
}

inline double parse_double(std::string_view text) {
  double value = 0.0;
  const auto res = std::from_chars(text.data(), text.data() + text.size(), value);
  if (res.ec != std::errc{} || res.ptr != text.data() + text.size()) {
    throw Error("not a number: '" + std::string(text) + "'");
  }
  return value;
}

}  // namespace smoothcert
