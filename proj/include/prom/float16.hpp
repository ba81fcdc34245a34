#pragma once

#include <cstdint>
#include <cstring>

namespace prom {

// IEEE 754 binary16 conversion with round-to-nearest-even. Used for scale,
// BatchNorm and slope storage; inference code keeps fp32 values that are
// exactly representable in fp16 so serialization round-trips bit-exactly.

inline std::uint16_t float_to_half(float f) {
  std::uint32_t x;
  std::memcpy(&x, &f, 4);
  const std::uint32_t sign = (x >> 16) & 0x8000u;
  const std::uint32_t mant = x & 0x007fffffu;
  const int exp = static_cast<int>((x >> 23) & 0xffu) - 127;

  if (exp == 128) return static_cast<std::uint16_t>(sign | 0x7c00u | (mant ? 0x0200u : 0));
  if (exp > 15) return static_cast<std::uint16_t>(sign | 0x7c00u);  // overflow -> inf
  if (exp >= -14) {
    // normal half; round mantissa 23 -> 10 bits, ties to even
    std::uint32_t m = mant | 0x00800000u;
    const std::uint32_t shifted = m >> 13;
    const std::uint32_t rem = m & 0x1fffu;
    std::uint32_t h = (static_cast<std::uint32_t>(exp + 15) << 10) | (shifted & 0x03ffu);
    if (rem > 0x1000u || (rem == 0x1000u && (shifted & 1u))) ++h;  // may carry into exponent
    return static_cast<std::uint16_t>(sign | h);
  }
  if (exp >= -24) {
    // subnormal half
    std::uint32_t m = mant | 0x00800000u;
    const int shift = -exp - 14 + 13;
    const std::uint32_t shifted = m >> shift;
    const std::uint32_t rem = m & ((1u << shift) - 1u);
    const std::uint32_t half_point = 1u << (shift - 1);
    std::uint32_t h = shifted;
    if (rem > half_point || (rem == half_point && (shifted & 1u))) ++h;
    return static_cast<std::uint16_t>(sign | h);
  }
  return static_cast<std::uint16_t>(sign);  // underflow to signed zero
}

inline float half_to_float(std::uint16_t h) {
  const std::uint32_t sign = (static_cast<std::uint32_t>(h) & 0x8000u) << 16;
  const std::uint32_t exp = (h >> 10) & 0x1fu;
  const std::uint32_t mant = h & 0x03ffu;
  std::uint32_t x;
  if (exp == 0x1f) {
    x = sign | 0x7f800000u | (mant << 13);
  } else if (exp != 0) {
    x = sign | ((exp + 112u) << 23) | (mant << 13);
  } else if (mant != 0) {
    // subnormal: normalize
    std::uint32_t m = mant;
    int e = -1;
    do {
      m <<= 1;
      ++e;
    } while (!(m & 0x0400u));
    x = sign | ((113u - static_cast<std::uint32_t>(e) - 1u) << 23) | ((m & 0x03ffu) << 13);
  } else {
    x = sign;
  }
  float f;
  std::memcpy(&f, &x, 4);
  return f;
}

/// Round a float through the fp16 grid.
inline float fp16_round(float f) { return half_to_float(float_to_half(f)); }

}  // namespace prom
