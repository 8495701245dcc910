#pragma once

#include <cstdio>
#include <cstdlib>
#include <string>

namespace oodtv {

/// Shortest text for `v` at `digits` significant digits (printf %g).
inline std::string format_significant(double v, int digits = 6) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.*g", digits, v);
  return buf;
}

/// Round-trip text (17 significant digits) for datasets and checkpoints.
inline std::string format_exact(double v) { return format_significant(v, 17); }

inline double round_significant(double v, int digits = 6) {
  return std::strtod(format_significant(v, digits).c_str(), nullptr);
}

}  // namespace oodtv
