#pragma once

#include <cstdint>

namespace esparse {

/// IEEE 754 binary16 -> binary32. Exact for every input, NaN payloads kept.
float half_to_float(std::uint16_t bits);

/// binary32 -> binary16 with round-to-nearest-even. Overflow saturates to inf.
std::uint16_t float_to_half(float value);

inline bool half_is_finite(std::uint16_t bits) { return (bits & 0x7c00u) != 0x7c00u; }

}  // namespace esparse
