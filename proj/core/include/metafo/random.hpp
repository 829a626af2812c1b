#pragma once

#include <cstdint>
#include <random>
#include <string>

namespace metafo {

/// Engine used everywhere. Distributions below are written out so that
/// sequences do not depend on the standard library implementation.
using Rng = std::mt19937_64;

/// Uniform double in [0, 1) with 53 random bits.
inline double uniform01(Rng& rng) { return static_cast<double>(rng() >> 11) * 0x1.0p-53; }

inline double uniform(Rng& rng, double lo, double hi) { return lo + (hi - lo) * uniform01(rng); }

/// Uniform integer in [lo, hi].
std::uint64_t uniform_int(Rng& rng, std::uint64_t lo, std::uint64_t hi);

/// Standard normal via Box-Muller (one draw per call, second value discarded).
double standard_normal(Rng& rng);

/// Mixes a base seed with a stream id into an independent engine seed.
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream);

/// Fisher-Yates shuffle with uniform_int.
template <typename Vec>
void shuffle(Vec& v, Rng& rng) {
  for (std::size_t i = v.size(); i > 1; --i) {
    const auto j = static_cast<std::size_t>(uniform_int(rng, 0, i - 1));
    std::swap(v[i - 1], v[j]);
  }
}

std::string serialize_rng(const Rng& rng);
Rng deserialize_rng(const std::string& text);

}  // namespace metafo
