#pragma once

#include <string_view>

namespace mfgm {

inline constexpr std::string_view version = "0.1.0";

/// Bumped whenever a field of a written document changes meaning or disappears.
inline constexpr std::string_view schema_version = "1.0";

}  // namespace mfgm
