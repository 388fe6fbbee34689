#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>

namespace hsi {

/// Deterministic counter-advancing generator (splitmix64, Steele/Lea/Flood).
/// Integer-only state transitions, so streams are bit-identical across
/// platforms and compilers. Every seeded operation in this project draws from
/// one of these; substreams are derived with fork() so parallel producers
/// stay reproducible.
class Rng {
public:
  explicit Rng(uint64_t seed) : state_(seed) {}

  uint64_t next_u64() {
    uint64_t z = (state_ += 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

  /// Uniform in [0, 1) with 53 random bits.
  double next_double() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  /// Uniform in [0, n); unbiased via rejection.
  uint64_t next_below(uint64_t n) {
    const uint64_t threshold = (0 - n) % n;  // 2^64 mod n
    for (;;) {
      const uint64_t r = next_u64();
      if (r >= threshold) return r % n;
    }
  }

  /// Standard normal via Box-Muller; one value per call, pair cached.
  double next_gaussian() {
    if (has_cached_) {
      has_cached_ = false;
      return cached_;
    }
    double u1 = next_double();
    const double u2 = next_double();
    if (u1 <= 0.0) u1 = 0x1.0p-53;
    const double radius = std::sqrt(-2.0 * std::log(u1));
    const double angle = 2.0 * std::numbers::pi * u2;
    cached_ = radius * std::sin(angle);
    has_cached_ = true;
    return radius * std::cos(angle);
  }

  /// Derives an independent substream keyed by `key`; keys may be built with
  /// mix_key for multi-part indices such as (window, copy).
  Rng fork(uint64_t key) const {
    Rng derived(state_ ^ (0x9e3779b97f4a7c15ULL * (key + 1)));
    derived.next_u64();
    return derived;
  }

  static uint64_t mix_key(uint64_t a, uint64_t b) {
    uint64_t z = a * 0xff51afd7ed558ccdULL + b;
    z = (z ^ (z >> 33)) * 0xc4ceb9fe1a85ec53ULL;
    return z ^ (z >> 33);
  }

  /// Deterministic Fisher-Yates shuffle.
  template <typename Vec>
  void shuffle(Vec& v) {
    for (size_t i = v.size(); i > 1; --i) {
      const size_t j = static_cast<size_t>(next_below(i));
      std::swap(v[i - 1], v[j]);
    }
  }

private:
  uint64_t state_;
  double cached_ = 0.0;
  bool has_cached_ = false;
};

}  // namespace hsi
