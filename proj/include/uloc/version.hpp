#pragma once

namespace uloc {

inline constexpr const char* kVersion = "1.0.0";

}  // namespace uloc
