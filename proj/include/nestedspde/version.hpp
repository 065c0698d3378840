#pragma once

namespace nspde {

inline constexpr const char* kVersion = "0.1.0";

}  // namespace nspde
