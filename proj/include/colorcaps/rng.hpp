#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

namespace colorcaps {

// Deterministic RNG. mt19937 output is pinned by the standard; the
// distributions are hand-rolled because std:: distribution algorithms are
// implementation-defined and would break the bit-reproducibility contract
// across toolchains.
class Rng {
 public:
  explicit Rng(std::uint64_t seed)
      : gen_(static_cast<std::mt19937::result_type>(seed & 0xffffffffu)) {}

  static Rng for_epoch(std::uint64_t seed, std::uint64_t epoch) {
    return Rng(seed * 0x9e3779b97f4a7c15ull + epoch + 1);
  }

  // Uniform in [0, 1), 53-bit resolution.
  double uniform() {
    const std::uint64_t hi = gen_() >> 5;   // 27 bits
    const std::uint64_t lo = gen_() >> 6;   // 26 bits
    return static_cast<double>((hi << 26) | lo) * (1.0 / 9007199254740992.0);
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Standard normal via Box-Muller; second deviate cached.
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double theta = 6.283185307179586476925286766559 * u2;
    spare_ = r * std::sin(theta);
    has_spare_ = true;
    return r * std::cos(theta);
  }

  // Uniform integer in [0, n). Modulo bias is irrelevant at the sizes used.
  std::size_t below(std::size_t n) {
    const std::uint64_t x = (static_cast<std::uint64_t>(gen_()) << 32) | gen_();
    return static_cast<std::size_t>(x % n);
  }

  template <typename T>
  void shuffle(std::vector<T>& items) {
    for (std::size_t i = items.size(); i > 1; --i) {
      std::swap(items[i - 1], items[below(i)]);
    }
  }

 private:
  std::mt19937 gen_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace colorcaps
