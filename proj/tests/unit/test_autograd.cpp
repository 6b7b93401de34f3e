// SPDX-License-Identifier: Apache-2.0
#include "autograd.hpp"
#include "helpers.hpp"

#include <doctest.h>

#include <cmath>

using namespace dfkd;
using dfkd::test::grad_check;
using dfkd::test::random_tensor;

namespace {

/// Scalar probe: sum(op(x) * R) for a fixed random R shaped like op(x).
std::function<Var(const Var &)> probe(std::function<Var(const Var &)> op,
                                      std::uint64_t seed) {
  return [op = std::move(op), seed](const Var &x) {
    Var y = op(x);
    const Var r = Var::constant(random_tensor(y.shape(), seed));
    return ag::sum(ag::mul(y, r));
  };
}

Tensor positive(const Shape &s, std::uint64_t seed) {
  Tensor t = random_tensor(s, seed);
  for (auto &v : t.vec())
    v = 0.5 + std::abs(v);
  return t;
}

/// Values kept away from 0 so piecewise ops are smooth at the probe.
Tensor away_from_zero(const Shape &s, std::uint64_t seed) {
  Tensor t = random_tensor(s, seed);
  for (auto &v : t.vec())
    v = v >= 0 ? v + 0.1 : v - 0.1;
  return t;
}

constexpr double kTol = 1e-6;

} // namespace

TEST_CASE("elementwise ops match central differences") {
  const Tensor x = random_tensor({2, 3}, 1);
  const Tensor other = positive({2, 3}, 2);
  const Var o = Var::constant(other);
  CHECK(grad_check(probe([&](const Var &v) { return ag::add(v, o); }, 3), x) < kTol);
  CHECK(grad_check(probe([&](const Var &v) { return ag::sub(o, v); }, 4), x) < kTol);
  CHECK(grad_check(probe([&](const Var &v) { return ag::mul(v, v); }, 5), x) < kTol);
  CHECK(grad_check(probe([&](const Var &v) { return ag::div(o, ag::add_scalar(ag::square(v), 1.0)); }, 6), x) < kTol);
  CHECK(grad_check(probe([&](const Var &v) { return ag::scale(v, -2.5); }, 7), x) < kTol);
  CHECK(grad_check(probe([&](const Var &v) { return ag::log(v); }, 8), positive({2, 3}, 9)) < kTol);
  CHECK(grad_check(probe([&](const Var &v) { return ag::silu(v); }, 10), x) < kTol);
  const Tensor xa = away_from_zero({2, 3}, 11);
  CHECK(grad_check(probe([&](const Var &v) { return ag::relu(v); }, 12), xa) < kTol);
  CHECK(grad_check(probe([&](const Var &v) { return ag::clamp_min(v, 0.0); }, 13), xa) < kTol);
}

TEST_CASE("clamp passes gradient only strictly inside the interval") {
  const Tensor x({4}, std::vector<double>{-2.0, -0.5, 0.5, 2.0});
  Var in = Var::input(x);
  backward(ag::sum(ag::clamp(in, -1.0, 1.0)));
  const Tensor g = in.grad();
  CHECK(g[0] == 0.0);
  CHECK(g[1] == 1.0);
  CHECK(g[2] == 1.0);
  CHECK(g[3] == 0.0);
}

TEST_CASE("reductions and shape ops match central differences") {
  const Tensor x = random_tensor({2, 3, 4, 4}, 20);
  CHECK(grad_check([](const Var &v) { return ag::mean(ag::square(v)); }, x) < kTol);
  CHECK(grad_check(probe([](const Var &v) { return ag::reshape(v, {6, 16}); }, 21), x) < kTol);
  CHECK(grad_check(probe([](const Var &v) { return ag::concat0(v, ag::scale(v, 2.0)); }, 22), x) < kTol);
  CHECK(grad_check(probe([](const Var &v) { return ag::slice0(v, 1, 2); }, 23), x) < kTol);
  CHECK(grad_check(probe([](const Var &v) { return ag::channel_mean(v); }, 24), x) < kTol);
  CHECK(grad_check(probe([](const Var &v) { return ag::channel_var(v); }, 25), x) < kTol);
  CHECK(grad_check(probe([](const Var &v) { return ag::avg_pool2(v); }, 26), x) < kTol);
  CHECK(grad_check(probe([](const Var &v) { return ag::upsample_nearest2(v); }, 27), x) < kTol);
  CHECK(grad_check(probe([](const Var &v) { return ag::concat_channels(v, v); }, 28), x) < kTol);
  CHECK(grad_check(probe([](const Var &v) { return ag::global_avg_pool(v); }, 29), x) < kTol);
  const Var b = Var::constant(random_tensor({2, 3}, 30));
  CHECK(grad_check(probe([&](const Var &v) { return ag::add_channel_bias(v, b); }, 31), x) < kTol);
  const Var xc = Var::constant(x);
  CHECK(grad_check(probe([&](const Var &v) { return ag::add_channel_bias(xc, v); }, 32),
                   random_tensor({3}, 33)) < kTol);
}

TEST_CASE("convolution gradients match central differences") {
  const Tensor x = random_tensor({2, 2, 5, 5}, 40);
  const Tensor w = random_tensor({3, 2, 3, 3}, 41, 0.5);
  const Tensor bias = random_tensor({3}, 42);
  for (int stride : {1, 2}) {
    const Var W = Var::constant(w), B = Var::constant(bias), X = Var::constant(x);
    CHECK(grad_check(probe([&](const Var &v) { return ag::conv2d(v, W, B, stride, 1); }, 43), x) < kTol);
    CHECK(grad_check(probe([&](const Var &v) { return ag::conv2d(X, v, B, stride, 1); }, 44), w) < kTol);
    CHECK(grad_check(probe([&](const Var &v) { return ag::conv2d(X, W, v, stride, 1); }, 45), bias) < kTol);
  }
}

TEST_CASE("convolution matches a direct loop") {
  const Tensor x = random_tensor({1, 2, 4, 4}, 46);
  const Tensor w = random_tensor({2, 2, 3, 3}, 47);
  const Tensor y = ag::conv2d(Var::constant(x), Var::constant(w), Var(), 1, 1).value();
  for (std::size_t o = 0; o < 2; ++o)
    for (int i = 0; i < 4; ++i)
      for (int j = 0; j < 4; ++j) {
        double acc = 0.0;
        for (std::size_t c = 0; c < 2; ++c)
          for (int di = -1; di <= 1; ++di)
            for (int dj = -1; dj <= 1; ++dj) {
              const int a = i + di, bb = j + dj;
              if (a < 0 || a >= 4 || bb < 0 || bb >= 4)
                continue;
              acc += x.at4(0, c, a, bb) * w.at4(o, c, di + 1, dj + 1);
            }
        CHECK(y.at4(0, o, i, j) == doctest::Approx(acc).epsilon(1e-12));
      }
}

TEST_CASE("batch norm gradients match central differences") {
  const Tensor x = random_tensor({4, 2, 3, 3}, 50);
  const Var g = Var::constant(positive({2}, 51)), b = Var::constant(random_tensor({2}, 52));
  CHECK(grad_check(probe([&](const Var &v) {
                     return ag::batchnorm_train(v, g, b, 1e-5, nullptr, nullptr);
                   }, 53), x) < 1e-5);
  const Tensor rm = random_tensor({2}, 54), rv = positive({2}, 55);
  CHECK(grad_check(probe([&](const Var &v) { return ag::batchnorm_eval(v, g, b, rm, rv, 1e-5); }, 56), x) < kTol);
}

TEST_CASE("dense, gather and softmax ops match central differences") {
  const Tensor x = random_tensor({3, 4}, 60);
  const Var w = Var::constant(random_tensor({5, 4}, 61)), b = Var::constant(random_tensor({5}, 62));
  CHECK(grad_check(probe([&](const Var &v) { return ag::linear(v, w, b); }, 63), x) < kTol);
  CHECK(grad_check(probe([&](const Var &v) { return ag::linear(Var::constant(x), v, b); }, 64),
                   random_tensor({5, 4}, 65)) < kTol);
  CHECK(grad_check(probe([](const Var &v) { return ag::gather_rows(v, {2, 0, 2}); }, 66), x) < kTol);
  CHECK(grad_check(probe([](const Var &v) { return ag::pick(v, {1, 3, 0}); }, 67), x) < kTol);
  CHECK(grad_check(probe([](const Var &v) { return ag::log_softmax(v); }, 68), x) < kTol);
  CHECK(grad_check(probe([](const Var &v) { return ag::softmax(v); }, 69), x) < kTol);
}

TEST_CASE("map ops match central differences") {
  const Tensor f = random_tensor({2, 3, 4, 4}, 70);
  const Tensor w = random_tensor({2, 3}, 71);
  CHECK(grad_check(probe([&](const Var &v) { return ag::channel_contract(v, Var::constant(w)); }, 72), f) < kTol);
  CHECK(grad_check(probe([&](const Var &v) { return ag::channel_contract(Var::constant(f), v); }, 73), w) < kTol);
  const Tensor m = random_tensor({2, 4, 4}, 74);
  CHECK(grad_check(probe([](const Var &v) { return ag::l2_normalize_items(v); }, 75), m) < kTol);
  CHECK(grad_check(probe([](const Var &v) { return ag::resize_bilinear(v, 7, 3); }, 76), m) < kTol);
  CHECK(grad_check(probe([](const Var &v) { return ag::resize_bilinear(v, 2, 2); }, 77), f) < kTol);
}

TEST_CASE("softmax rows sum to one and survive large logits") {
  const Tensor x({2, 3}, std::vector<double>{1000.0, 0.0, -1000.0, 1.0, 2.0, 3.0});
  const Tensor p = ag::softmax(Var::constant(x)).value();
  CHECK(p[0] + p[1] + p[2] == doctest::Approx(1.0));
  CHECK(p[3] + p[4] + p[5] == doctest::Approx(1.0));
  CHECK(p.all_finite());
}

TEST_CASE("zero-norm items pass through normalisation as zeros") {
  Tensor m({2, 2, 2}, 0.0);
  m[4] = 3.0;
  m[5] = 4.0;
  std::vector<bool> zero;
  const Tensor n = ag::l2_normalize_items(Var::constant(m), &zero).value();
  CHECK(zero == std::vector<bool>{true, false});
  for (std::size_t i = 0; i < 4; ++i)
    CHECK(n[i] == 0.0);
  CHECK(n[4] == doctest::Approx(0.6));
  CHECK(n[5] == doctest::Approx(0.8));
}

TEST_CASE("bilinear resize is the identity at equal size") {
  const Tensor m = random_tensor({1, 2, 3, 3}, 80);
  CHECK(ag::resize_bilinear(Var::constant(m), 3, 3).value() == m);
}

TEST_CASE("parameters yield no gradient under the guard") {
  Parameter p("w", random_tensor({3}, 90));
  {
    NoParamGradGuard guard;
    CHECK(NoParamGradGuard::active());
    Var x = Var::input(random_tensor({3}, 91));
    backward(ag::sum(ag::mul(p.use(), x)));
    CHECK(p.grad.l2_norm() == 0.0);
    CHECK(x.grad().l2_norm() > 0.0);
  }
  CHECK_FALSE(NoParamGradGuard::active());
  backward(ag::sum(ag::square(p.use())));
  CHECK(p.grad.l2_norm() > 0.0);
}

TEST_CASE("gradients accumulate over shared subexpressions") {
  Var x = Var::input(Tensor({1}, std::vector<double>{3.0}));
  const Var y = ag::add(ag::mul(x, x), x); // x^2 + x
  backward(ag::sum(y));
  CHECK(x.grad()[0] == doctest::Approx(7.0));
}
