#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>

namespace cct {

/// SplitMix64 finalizer.
constexpr std::uint64_t mix64(std::uint64_t z) noexcept {
  z += 0x9E3779B97F4A7C15ULL;
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

/// Stateless hash of (seed, stream, counter). Every random decision in the
/// library is a pure function of such a triple, so results never depend on
/// call order across samples or threads.
constexpr std::uint64_t counter_hash(std::uint64_t seed, std::uint64_t stream,
                                     std::uint64_t counter) noexcept {
  return mix64(mix64(mix64(seed) ^ (stream * 0xD1B54A32D192ED03ULL)) ^
               (counter * 0x8CB92BA72F3D8DD7ULL));
}

/// Uniform double in [0, 1) from the top 53 bits of a hash.
constexpr double to_unit(std::uint64_t bits) noexcept {
  return static_cast<double>(bits >> 11) * 0x1.0p-53;
}

/// Counter-based generator keyed by (seed, stream). Draw k of a given key is
/// always the same value regardless of what other keys have been used.
class CounterRng {
 public:
  constexpr CounterRng(std::uint64_t seed, std::uint64_t stream) noexcept
      : seed_(seed), stream_(stream) {}

  constexpr std::uint64_t next_u64() noexcept { return counter_hash(seed_, stream_, counter_++); }

  constexpr double uniform() noexcept { return to_unit(next_u64()); }

  double uniform(double lo, double hi) noexcept { return lo + (hi - lo) * uniform(); }

  /// Value in [0, n). Slight modulo bias is irrelevant for the n used here.
  constexpr std::uint64_t below(std::uint64_t n) noexcept { return n == 0 ? 0 : next_u64() % n; }

  /// Standard normal via Box-Muller (one value per two uniforms).
  double normal() noexcept {
    double u1 = uniform();
    const double u2 = uniform();
    if (u1 < 1e-300) u1 = 1e-300;
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }

  constexpr std::uint64_t counter() const noexcept { return counter_; }

 private:
  std::uint64_t seed_;
  std::uint64_t stream_;
  std::uint64_t counter_ = 0;
};

}  // namespace cct
