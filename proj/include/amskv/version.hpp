#pragma once

#include <string_view>

namespace amskv {

inline constexpr std::string_view kToolVersion = "0.1.0";

// Bumped whenever a report, trace, or CSV layout changes incompatibly.
inline constexpr int kSchemaVersion = 1;

}  // namespace amskv
