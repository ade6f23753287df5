#pragma once

// Seeded RNG with hand-rolled uniform/normal draws so sequences are
// bit-identical across standard library implementations.

#include <cmath>
#include <cstdint>
#include <random>

#include "vglab/tensor.hpp"

namespace vg {

class Rng {
 public:
  explicit Rng(std::uint64_t seed) : gen_(seed) {}

  std::uint64_t next_u64() { return gen_(); }

  // uniform in [0, 1)
  double uniform() {
    return static_cast<double>(gen_() >> 11) * 0x1.0p-53;
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  int uniform_int(int lo, int hi) {  // inclusive range
    return lo + static_cast<int>(gen_() % static_cast<std::uint64_t>(hi - lo + 1));
  }

  // Box-Muller; the spare draw is cached
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    spare_ = r * std::sin(2.0 * kPi * u2);
    has_spare_ = true;
    return r * std::cos(2.0 * kPi * u2);
  }

  // resamples until |z| <= 2 sigma
  double trunc_normal(double stddev) {
    double z = normal();
    while (std::fabs(z) > 2.0) z = normal();
    return z * stddev;
  }

  // derives an independent per-item stream from a master seed
  static std::uint64_t derive(std::uint64_t master, std::uint64_t index) {
    std::uint64_t x = master ^ (0x9e3779b97f4a7c15ull + index * 0xbf58476d1ce4e5b9ull);
    x ^= x >> 30;
    x *= 0xbf58476d1ce4e5b9ull;
    x ^= x >> 27;
    x *= 0x94d049bb133111ebull;
    x ^= x >> 31;
    return x;
  }

 private:
  std::mt19937_64 gen_;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

template <typename T>
Tensor<T> randn(Shape s, Rng& rng, double stddev, bool rg = false) {
  Tensor<T> t = Tensor<T>::zeros(std::move(s), rg);
  for (auto& v : *t.data) v = static_cast<T>(rng.trunc_normal(stddev));
  return t;
}

}  // namespace vg
