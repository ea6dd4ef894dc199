#include "roadq/csv.hpp"

#include <cstdio>

namespace roadq {

std::string fmt17(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace roadq
