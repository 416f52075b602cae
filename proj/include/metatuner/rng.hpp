#pragma once

#include <cmath>
#include <cstdint>
#include <random>

namespace metatuner {

// splitmix64 finalizer, used to derive independent stream seeds.
constexpr std::uint64_t mix64(std::uint64_t x) noexcept {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

template <typename... Rest>
constexpr std::uint64_t derive_seed(std::uint64_t base, Rest... rest) noexcept {
  std::uint64_t s = mix64(base);
  ((s = mix64(s ^ static_cast<std::uint64_t>(rest))), ...);
  return s;
}

/// Portable random stream: std::mt19937_64 bits turned into values with
/// fixed formulas, so draws do not depend on the standard library's
/// distribution implementations.
///
///   uniform()    = (bits >> 11) * 2^-53, in [0, 1)
///   normal()     = Box-Muller cosine branch, one pair of uniforms per draw
///   below(n)     = rejection-sampled bits modulo n
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

  double normal() {
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
  }

  double normal(double mean, double stddev) { return mean + stddev * normal(); }

  std::uint64_t below(std::uint64_t n) {
    const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
    std::uint64_t r;
    do {
      r = engine_();
    } while (r >= limit);
    return r % n;
  }

  template <typename Container>
  void shuffle(Container& c) {
    for (std::size_t i = c.size(); i > 1; --i) {
      const std::size_t j = below(i);
      std::swap(c[i - 1], c[j]);
    }
  }

 private:
  std::mt19937_64 engine_;
};

}  // namespace metatuner
