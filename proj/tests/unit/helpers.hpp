// SPDX-License-Identifier: Apache-2.0
// Shared oracles for the unit tests.
#ifndef DFKD_TESTS_HELPERS_HPP_
#define DFKD_TESTS_HELPERS_HPP_

#include "autograd.hpp"
#include "rng.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <functional>
#include <string>

namespace dfkd::test {

inline Tensor random_tensor(const Shape &s, std::uint64_t seed, double scale = 1.0) {
  Rng rng(seed);
  Tensor t = rng.normal_tensor(s);
  t *= scale;
  return t;
}

/// Central differences of f at x, one coordinate at a time.
inline Tensor numeric_grad(const std::function<double(const Tensor &)> &f,
                           const Tensor &x, double h = 1e-5) {
  Tensor g(x.shape());
  Tensor probe = x;
  for (std::size_t i = 0; i < x.numel(); ++i) {
    const double v = probe[i];
    probe[i] = v + h;
    const double up = f(probe);
    probe[i] = v - h;
    const double down = f(probe);
    probe[i] = v;
    g[i] = (up - down) / (2.0 * h);
  }
  return g;
}

/// ||a - b|| / max(||a||, ||b||, tiny).
inline double norm_rel_error(const Tensor &a, const Tensor &b) {
  double diff = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) {
    diff += (a[i] - b[i]) * (a[i] - b[i]);
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  return std::sqrt(diff) / std::max({std::sqrt(na), std::sqrt(nb), 1e-30});
}

/// Analytic gradient of a scalar-valued Var function at x.
inline Tensor analytic_grad(const std::function<Var(const Var &)> &f, const Tensor &x) {
  Var in = Var::input(x);
  backward(f(in));
  return in.grad();
}

/// Relative gradient error of f at x.
inline double grad_check(const std::function<Var(const Var &)> &f, const Tensor &x,
                         double h = 1e-5) {
  const Tensor a = analytic_grad(f, x);
  const Tensor n = numeric_grad(
      [&](const Tensor &p) { return f(Var::constant(p)).item(); }, x, h);
  return norm_rel_error(a, n);
}

/// Fresh empty directory under the system temp dir.
inline std::filesystem::path scratch_dir(const std::string &name) {
  const auto p = std::filesystem::temp_directory_path() / ("dfkd_test_" + name);
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

} // namespace dfkd::test

#endif // DFKD_TESTS_HELPERS_HPP_
