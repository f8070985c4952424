#pragma once

namespace sigprop {

inline constexpr const char* kToolVersion = "0.1.0";

}  // namespace sigprop
