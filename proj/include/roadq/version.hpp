#pragma once

namespace roadq {

inline constexpr const char* kVersion = "0.1.0";

}  // namespace roadq
