#pragma once

#include <cstdio>
#include <string>

namespace ssrseg {

// Floating output everywhere in reports and manifests: 6 significant digits.
inline std::string fmt6(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6g", v);
  return buf;
}

}  // namespace ssrseg
