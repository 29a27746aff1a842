#pragma once

// Counter-based generator: draw i of stream `key` is mix64(key + i * golden).
// Output depends only on (key, counter), so independent streams can be derived
// per scene / per epoch and consumed in any order without changing results.
// std:: distributions are avoided because their output is implementation
// defined.

#include <cmath>
#include <cstdint>
#include <numbers>

namespace invdiff {

inline constexpr std::uint64_t mix64(std::uint64_t z) {
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

class Rng {
 public:
  static constexpr std::uint64_t kGolden = 0x9e3779b97f4a7c15ULL;

  explicit Rng(std::uint64_t seed = 0) : key_(mix64(seed ^ 0x6a09e667f3bcc908ULL)) {}

  std::uint64_t seed_key() const { return key_; }
  std::uint64_t counter() const { return counter_; }

  // Independent child stream; does not advance this generator.
  Rng derive(std::uint64_t stream) const {
    Rng r;
    r.key_ = mix64(key_ ^ mix64(stream + 0x3c6ef372fe94f82bULL));
    return r;
  }

  std::uint64_t next_u64() { return mix64(key_ + (++counter_) * kGolden); }

  // Uniform in [0, 1) with 53 random bits.
  double uniform() { return double(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Uniform integer in [0, n). Rejection sampling removes modulo bias.
  std::uint64_t below(std::uint64_t n) {
    if (n <= 1) return 0;
    const std::uint64_t limit = ~std::uint64_t(0) - (~std::uint64_t(0) % n);
    std::uint64_t x;
    do {
      x = next_u64();
    } while (x >= limit);
    return x % n;
  }

  // Uniform integer in [lo, hi].
  std::int64_t range(std::int64_t lo, std::int64_t hi) {
    return lo + std::int64_t(below(std::uint64_t(hi - lo + 1)));
  }

  // Standard normal via Box-Muller; uses two draws per value.
  double normal() {
    double u1 = uniform();
    const double u2 = uniform();
    if (u1 < 1e-300) u1 = 1e-300;
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }

 private:
  std::uint64_t key_ = 0;
  std::uint64_t counter_ = 0;
};

}  // namespace invdiff
