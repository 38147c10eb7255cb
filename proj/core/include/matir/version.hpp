#pragma once

namespace matir {

inline constexpr const char* kVersion = "0.1.0";

}  // namespace matir
