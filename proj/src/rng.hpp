// SPDX-License-Identifier: Apache-2.0
#ifndef DFKD_RNG_HPP_
#define DFKD_RNG_HPP_

#include "tensor.hpp"

#include <cstdint>
#include <random>

namespace dfkd {

/// splitmix64 finaliser; used to derive independent stream seeds.
inline std::uint64_t mix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline std::uint64_t derive_seed(std::uint64_t base, std::uint64_t stream) {
  return mix64(base ^ mix64(stream + 0x632be59bd9b4e019ULL));
}

class Rng {
public:
  explicit Rng(std::uint64_t seed) : seed_(seed), eng_(seed) {}

  std::uint64_t seed() const { return seed_; }
  double uniform() { return std::uniform_real_distribution<double>(0.0, 1.0)(eng_); }
  double uniform(double lo, double hi) {
    return std::uniform_real_distribution<double>(lo, hi)(eng_);
  }
  double normal() { return normal_(eng_); }
  /// Integer in [lo, hi].
  long randint(long lo, long hi) {
    return std::uniform_int_distribution<long>(lo, hi)(eng_);
  }
  double beta(double a, double b) {
    const double x = std::gamma_distribution<double>(a, 1.0)(eng_);
    const double y = std::gamma_distribution<double>(b, 1.0)(eng_);
    return x / (x + y);
  }
  Tensor normal_tensor(const Shape &s) {
    Tensor t(s);
    for (auto &v : t.vec())
      v = normal();
    return t;
  }
  std::mt19937_64 &engine() { return eng_; }

private:
  std::uint64_t seed_;
  std::mt19937_64 eng_;
  std::normal_distribution<double> normal_{0.0, 1.0};
};

} // namespace dfkd

#endif // DFKD_RNG_HPP_
