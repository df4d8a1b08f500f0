#pragma once

#include <cmath>
#include <cstdint>
#include <limits>

#include "splitq/tensor.hpp"

namespace splitq {

// IEEE binary16 bit pattern (1 sign, 5 exponent, 10 mantissa bits),
// emulated in software.
struct Half {
  std::uint16_t bits{0};

  static constexpr std::uint16_t max_finite_bits = 0x7BFF;  // 65504
  static constexpr double max_finite = 65504.0;

  [[nodiscard]] constexpr bool is_finite() const noexcept { return (bits & 0x7C00u) != 0x7C00u; }

  friend constexpr bool operator==(Half, Half) = default;
};

// Exact decode to float. Infinity and NaN patterns decode to their float
// counterparts.
inline float to_float(Half h) noexcept {
  const bool negative = (h.bits & 0x8000u) != 0;
  const int exponent = (h.bits >> 10) & 0x1F;
  const int mantissa = h.bits & 0x3FF;
  float v;
  if (exponent == 0) {
    v = std::ldexp(static_cast<float>(mantissa), -24);
  } else if (exponent == 31) {
    v = mantissa == 0 ? std::numeric_limits<float>::infinity()
                      : std::numeric_limits<float>::quiet_NaN();
  } else {
    v = std::ldexp(static_cast<float>(mantissa + 1024), exponent - 25);
  }
  return negative ? -v : v;
}

// Nearest binary16 value with ties to even mantissa. Magnitudes beyond the
// largest finite half (including those that would round to infinity)
// saturate to +-65504. NaN maps to the canonical quiet NaN pattern.
inline Half to_half_rtne(double x) noexcept {
  if (std::isnan(x)) return Half{0x7E00};
  const std::uint16_t sign = std::signbit(x) ? 0x8000u : 0x0000u;
  const double mag = std::fabs(x);
  if (mag == 0.0) return Half{sign};
  if (mag >= Half::max_finite) return Half{static_cast<std::uint16_t>(sign | Half::max_finite_bits)};

  int e2 = 0;
  std::frexp(mag, &e2);
  const int unbiased = e2 - 1;
  // Quantum of the binade; subnormals share the 2^-24 step.
  const int quantum_exp = unbiased < -14 ? -24 : unbiased - 10;
  const double steps = round_half_even(std::ldexp(mag, -quantum_exp));

  std::uint32_t pattern;
  if (unbiased < -14) {
    // steps == 1024 lands exactly on the smallest normal, whose pattern is 0x0400.
    pattern = static_cast<std::uint32_t>(steps);
  } else {
    // steps == 2048 carries into the exponent field.
    pattern = (static_cast<std::uint32_t>(unbiased + 15) << 10) +
              static_cast<std::uint32_t>(steps) - 1024u;
  }
  if (pattern > Half::max_finite_bits) pattern = Half::max_finite_bits;
  return Half{static_cast<std::uint16_t>(sign | pattern)};
}

}  // namespace splitq
