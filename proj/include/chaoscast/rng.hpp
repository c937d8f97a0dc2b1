#pragma once

#include <cstdint>
#include <random>

namespace chaoscast {

// SplitMix64 finalizer. A bijection on 64-bit words.
constexpr std::uint64_t mix64(std::uint64_t z) noexcept {
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

// Per-sequence seed. For a fixed base seed this is injective in the index:
// index -> base' + index * odd is a bijection mod 2^64, and so is mix64.
constexpr std::uint64_t derive_seed(std::uint64_t base_seed, std::uint64_t index) noexcept {
  return mix64(mix64(base_seed) + index * 0x9E3779B97F4A7C15ULL);
}

using Rng = std::mt19937_64;

// Uniform double in [0, 1) from the top 53 bits. Used instead of
// std::uniform_real_distribution so sampled values do not depend on the
// standard library implementation.
inline double uniform01(Rng& rng) {
  return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

inline double uniform(Rng& rng, double lo, double hi) {
  return lo + (hi - lo) * uniform01(rng);
}

}  // namespace chaoscast
