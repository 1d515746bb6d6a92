#pragma once

// IEEE-754 single-precision decomposition, Hamming weight, the exact
// sign/exponent/mantissa rule of a product, and the hypothesis grids used by
// the value extraction.

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdio>
#include <cstdint>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "nnleak/error.hpp"

namespace nnleak {

inline constexpr std::uint32_t kMantissaBits = 23;
inline constexpr std::uint32_t kMantissaMask = (1u << kMantissaBits) - 1u;
inline constexpr std::int32_t kExponentBias = 127;

constexpr std::uint32_t to_bits(float v) noexcept { return std::bit_cast<std::uint32_t>(v); }
constexpr float from_bits(std::uint32_t b) noexcept { return std::bit_cast<float>(b); }

struct Float32Parts {
  std::uint32_t sign = 0;      // 0 or 1
  std::uint32_t exponent = 0;  // biased, [0, 255]
  std::uint32_t mantissa = 0;  // [0, 2^23 - 1]

  friend bool operator==(const Float32Parts&, const Float32Parts&) = default;
};

constexpr std::uint32_t exponent_field(float v) noexcept { return (to_bits(v) >> kMantissaBits) & 0xFFu; }

// True for +-0 and for every value whose exponent field lies in [1, 254].
constexpr bool in_usual_case(float v) noexcept {
  const std::uint32_t e = exponent_field(v);
  if (e == 0) return (to_bits(v) & 0x7FFFFFFFu) == 0;
  return e != 255;
}

inline Float32Parts decompose(float v) {
  if (!in_usual_case(v)) {
    throw OutOfModelError("decompose: value is subnormal, infinite or NaN (bits 0x" +
                          [](std::uint32_t b) {
                            char buf[9];
                            std::snprintf(buf, sizeof buf, "%08X", b);
                            return std::string(buf);
                          }(to_bits(v)) +
                          ")");
  }
  const std::uint32_t b = to_bits(v);
  return {b >> 31, (b >> kMantissaBits) & 0xFFu, b & kMantissaMask};
}

inline float recompose(const Float32Parts& p) {
  if (p.sign > 1 || p.exponent > 255 || p.mantissa > kMantissaMask)
    throw OutOfModelError("recompose: field out of range");
  return from_bits((p.sign << 31) | (p.exponent << kMantissaBits) | p.mantissa);
}

// Number of set bits in the 32-bit pattern.
constexpr int hamming_weight(float v) noexcept { return std::popcount(to_bits(v)); }

enum class ExponentFlag { in_range, overflow, underflow };

// Pre-normalization product triple. `mantissa_scaled` is the fraction M_c
// scaled by 2^46, the exact integer 2^23 (m_a + m_b) + m_a m_b over the stored
// 23-bit fields m_a, m_b.
struct ProductParts {
  std::uint32_t sign = 0;
  std::int32_t exponent = 0;
  std::uint64_t mantissa_scaled = 0;
  ExponentFlag flag = ExponentFlag::in_range;

  double mantissa() const noexcept { return std::ldexp(static_cast<double>(mantissa_scaled), -46); }
};

inline ProductParts product_parts(const Float32Parts& a, const Float32Parts& b) {
  auto check = [](const Float32Parts& p, const char* name) {
    if (p.exponent < 1 || p.exponent > 254 || p.sign > 1 || p.mantissa > kMantissaMask)
      throw OutOfModelError(std::string("product_parts: operand ") + name + " is not a normalized value");
  };
  check(a, "a");
  check(b, "b");
  ProductParts c;
  c.sign = a.sign ^ b.sign;
  c.exponent = static_cast<std::int32_t>(a.exponent) + static_cast<std::int32_t>(b.exponent) - kExponentBias;
  c.mantissa_scaled = (std::uint64_t{a.mantissa} + b.mantissa) << kMantissaBits;
  c.mantissa_scaled += std::uint64_t{a.mantissa} * b.mantissa;
  if (c.exponent > 254)
    c.flag = ExponentFlag::overflow;
  else if (c.exponent < 1)
    c.flag = ExponentFlag::underflow;
  return c;
}

// Normalizes the significand 1 + M_c 2^-23 back to [1, 2) and rounds it to 23
// fraction bits with round-to-nearest-even. Throws when the final exponent is
// outside [1, 254].
inline Float32Parts realign(const ProductParts& c) {
  // Significand with 46 fraction bits, in [2^46, 2^48).
  const std::uint64_t full = (std::uint64_t{1} << 46) + c.mantissa_scaled;
  std::int32_t e = c.exponent;
  unsigned shift = 23;
  if (full >= (std::uint64_t{1} << 47)) {
    shift = 24;
    ++e;
  }
  std::uint64_t q = full >> shift;
  const std::uint64_t rem = full & ((std::uint64_t{1} << shift) - 1);
  const std::uint64_t half = std::uint64_t{1} << (shift - 1);
  if (rem > half || (rem == half && (q & 1u))) ++q;
  if (q == (std::uint64_t{1} << 24)) {
    q >>= 1;
    ++e;
  }
  if (e < 1 || e > 254) throw OutOfModelError("realign: product exponent leaves the usual case");
  return {c.sign, static_cast<std::uint32_t>(e), static_cast<std::uint32_t>(q - (std::uint64_t{1} << 23))};
}

enum class GridOrigin { step1_grid, step2_refinement };

// Ordered, duplicate-free set of positive single-precision hypotheses.
struct HypothesisGrid {
  std::vector<float> values;
  GridOrigin origin = GridOrigin::step1_grid;

  std::size_t size() const noexcept { return values.size(); }
  bool empty() const noexcept { return values.empty(); }
};

// Mantissa bits that vary in the coarse grid (the 8 most significant ones).
inline constexpr std::uint32_t kGridMantissaBits = 8;
inline constexpr std::uint32_t kGridLowMask = (1u << (kMantissaBits - kGridMantissaBits)) - 1u;

// Every positive (exponent, 8-MSB mantissa) combination inside
// [max(center - width/2, 0), center + width/2], bounds inclusive.
inline HypothesisGrid step1_grid(double center, double width) {
  if (!(width >= 0.0) || !std::isfinite(center) || !std::isfinite(width))
    throw EmptyGridError("step1_grid: interval width must be finite and non-negative");
  const double lo = std::max(center - width / 2.0, 0.0);
  const double hi = center + width / 2.0;
  HypothesisGrid grid;
  grid.origin = GridOrigin::step1_grid;
  for (std::uint32_t e = 1; e <= 254; ++e) {
    for (std::uint32_t m = 0; m < (1u << kGridMantissaBits); ++m) {
      const float v = from_bits((e << kMantissaBits) | (m << (kMantissaBits - kGridMantissaBits)));
      const double dv = v;
      if (dv >= lo && dv <= hi) grid.values.push_back(v);
    }
  }
  if (grid.values.empty()) throw EmptyGridError("step1_grid: interval contains no grid point");
  return grid;  // bit patterns of positive floats are ordered like their values
}

// `per_center` evenly spaced values over an interval of size `width` around
// each center, rounded to single precision. The centers themselves are kept
// so a refinement round never loses the hypotheses it started from. Values
// that leave the positive normalized range are dropped.
inline HypothesisGrid refinement_grid(std::span<const float> centers, double width, int per_center) {
  if (per_center < 2) throw EmptyGridError("refinement_grid: need at least 2 samples per center");
  HypothesisGrid grid;
  grid.origin = GridOrigin::step2_refinement;
  grid.values.reserve(centers.size() * (static_cast<std::size_t>(per_center) + 1));
  const double step = width / static_cast<double>(per_center - 1);
  for (float c : centers) {
    const double start = static_cast<double>(c) - width / 2.0;
    for (int k = 0; k < per_center; ++k) {
      const float v = static_cast<float>(start + step * k);
      if (v >= std::numeric_limits<float>::min() && std::isfinite(v)) grid.values.push_back(v);
    }
    if (c >= std::numeric_limits<float>::min() && std::isfinite(c)) grid.values.push_back(c);
  }
  std::sort(grid.values.begin(), grid.values.end());
  grid.values.erase(std::unique(grid.values.begin(), grid.values.end()), grid.values.end());
  if (grid.values.empty()) throw EmptyGridError("refinement_grid: no positive hypothesis left");
  return grid;
}

// Magnitude grid mirrored to both signs, ascending.
inline std::vector<float> signed_pool(const HypothesisGrid& grid) {
  std::vector<float> out;
  out.reserve(grid.values.size() * 2);
  for (auto it = grid.values.rbegin(); it != grid.values.rend(); ++it) out.push_back(-*it);
  out.insert(out.end(), grid.values.begin(), grid.values.end());
  return out;
}

}  // namespace nnleak
