// Copyright 2026 The vidplug Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>

namespace vidplug {

/// SplitMix64 finalizer. Used as the mixing function of the counter RNG.
constexpr std::uint64_t mix64(std::uint64_t z) noexcept {
  z += 0x9E3779B97F4A7C15ULL;
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

/// Derives an independent stream key from a parent key and a label.
constexpr std::uint64_t derive_key(std::uint64_t key, std::uint64_t label) noexcept {
  return mix64(key ^ mix64(label + 0xD1B54A32D192ED03ULL));
}

/// Counter-based generator: the n-th draw is mix64(key + n * golden).
///
/// Output depends only on (key, counter), so streams are reproducible bit-exactly
/// across platforms and can be split per sample without shared state. Normal
/// variates use Box-Muller on two uniforms.
class CounterRng {
 public:
  explicit constexpr CounterRng(std::uint64_t key = 0) noexcept : key_(key) {}
  constexpr CounterRng(std::uint64_t seed, std::uint64_t stream) noexcept
      : key_(derive_key(seed, stream)) {}

  constexpr std::uint64_t next_u64() noexcept {
    return mix64(key_ + 0x9E3779B97F4A7C15ULL * (++counter_));
  }

  /// Uniform in [0, 1) with 53 random bits.
  constexpr double uniform() noexcept {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
  }

  double uniform(double lo, double hi) noexcept { return lo + (hi - lo) * uniform(); }

  double normal() noexcept {
    // (0, 1] avoids log(0).
    const double u1 = 1.0 - uniform();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }

  double normal(double mean, double stddev) noexcept { return mean + stddev * normal(); }

  /// Uniform integer in [0, n).
  constexpr std::uint64_t below(std::uint64_t n) noexcept { return n == 0 ? 0 : next_u64() % n; }

  constexpr CounterRng fork(std::uint64_t label) const noexcept {
    return CounterRng(derive_key(key_, label));
  }

  constexpr std::uint64_t key() const noexcept { return key_; }
  constexpr std::uint64_t counter() const noexcept { return counter_; }

 private:
  std::uint64_t key_ = 0;
  std::uint64_t counter_ = 0;
};

}  // namespace vidplug
