// SPDX-License-Identifier: Apache-2.0
#include "diffusion.hpp"
#include "helpers.hpp"

#include <doctest.h>

#include <cmath>

using namespace dfkd;
using dfkd::test::random_tensor;

namespace {

Tensor scalar(double v) { return Tensor({1}, std::vector<double>{v}); }

} // namespace

TEST_CASE("guidance with scale one returns the conditional prediction bit for bit") {
  const Tensor c = random_tensor({3, 1, 4, 4}, 1);
  const Tensor u = random_tensor({3, 1, 4, 4}, 2);
  GuidanceSpec g;
  g.scale = 1.0;
  CHECK(classifier_free_noise(c, u, g) == c);
  CHECK(classifier_free_noise(Var::constant(c), Var::constant(u), g).value() == c);
}

TEST_CASE("guidance with equal predictions returns them for any scale") {
  const Tensor e = random_tensor({2, 1, 3, 3}, 3);
  for (double s : {1.0, 2.5, 7.5, 40.0}) {
    GuidanceSpec g;
    g.scale = s;
    CHECK(classifier_free_noise(e, e, g) == e);
  }
}

TEST_CASE("guidance hand value: uncond 0.1, cond 0.3, scale 3 gives 0.7") {
  GuidanceSpec g;
  g.scale = 3.0;
  CHECK(classifier_free_noise(scalar(0.3), scalar(0.1), g)[0] ==
        doctest::Approx(0.7).epsilon(1e-12));
}

TEST_CASE("guidance rejects shape mismatch and scale below one") {
  GuidanceSpec g;
  CHECK_THROWS_AS(classifier_free_noise(Tensor({2}), Tensor({3}), g), ContractError);
  g.scale = 0.5;
  CHECK_THROWS_AS(classifier_free_noise(Tensor({2}), Tensor({2}), g), ContractError);
}

TEST_CASE("clean-latent prediction special cases") {
  const Tensor z = random_tensor({2, 1, 4, 4}, 4);
  const Tensor eps = random_tensor({2, 1, 4, 4}, 5);
  CHECK(predict_x0(z, eps, 1.0) == z);
  const Tensor zero(z.shape(), 0.0);
  const double a = 0.36;
  const Tensor r = predict_x0(z, zero, a);
  for (std::size_t i = 0; i < z.numel(); ++i)
    CHECK(r[i] == doctest::Approx(z[i] / std::sqrt(a)).epsilon(1e-15));
}

TEST_CASE("clean-latent prediction inverts forward noising at every timestep") {
  for (ScheduleKind kind : {ScheduleKind::Cosine, ScheduleKind::Linear}) {
    const NoiseSchedule s = NoiseSchedule::make(kind, 50);
    const Tensor z0 = random_tensor({2, 1, 4, 4}, 6);
    const Tensor eps = random_tensor({2, 1, 4, 4}, 7);
    for (int t = 1; t <= s.num_steps(); ++t) {
      // Hand-built z_t = sqrt(a) z0 + sqrt(1 - a) eps.
      const double a = s.alpha_bar(t);
      Tensor zt(z0.shape());
      for (std::size_t i = 0; i < z0.numel(); ++i)
        zt[i] = std::sqrt(a) * z0[i] + std::sqrt(1.0 - a) * eps[i];
      const LatentBatch b{zt, t, {0, 1}, 0};
      const Tensor rec = predict_x0(b, eps, s);
      CHECK(dfkd::test::norm_rel_error(rec, z0) < 1e-6);
    }
  }
}

TEST_CASE("clean-latent prediction rejects t = 0 and a singular schedule") {
  const NoiseSchedule s = NoiseSchedule::cosine(10);
  const LatentBatch b{Tensor({1, 1, 2, 2}), 0, {0}, 0};
  CHECK_THROWS_AS(predict_x0(b, Tensor({1, 1, 2, 2}), s), ContractError);
  CHECK_THROWS_AS(predict_x0(Tensor({2}), Tensor({2}), 0.0), NumericError);
}

TEST_CASE("ancestral step special cases and hand value") {
  const Tensor x0 = random_tensor({5}, 8);
  const Tensor noise = random_tensor({5}, 9);
  CHECK(ancestral_step(x0, 1.0, noise) == x0);
  CHECK(ancestral_step(x0, 0.0, noise) == noise);
  CHECK(ancestral_step(scalar(2.0), 0.25, scalar(1.0))[0] ==
        doctest::Approx(0.5 * 2.0 + std::sqrt(0.75)).epsilon(1e-12));
  CHECK(ancestral_step(scalar(2.0), 0.25, scalar(1.0))[0] ==
        doctest::Approx(1.8660).epsilon(1e-4));
}

TEST_CASE("ancestral step on a schedule uses alpha_bar of t - 1") {
  const NoiseSchedule s = NoiseSchedule::cosine(10);
  const Tensor x0 = random_tensor({4}, 10), noise = random_tensor({4}, 11);
  for (int t = 1; t <= 10; ++t)
    CHECK(ancestral_step(x0, s, t, noise) == ancestral_step(x0, s.alpha_bar(t - 1), noise));
  CHECK_THROWS_AS(ancestral_step(x0, s, 0, noise), ContractError);
  CHECK_THROWS_AS(ancestral_step(x0, s, 11, noise), ContractError);
}

TEST_CASE("schedules satisfy their invariants") {
  for (ScheduleKind kind : {ScheduleKind::Cosine, ScheduleKind::Linear})
    for (int T : {1, 2, 10, 70, 1000}) {
      const NoiseSchedule s = NoiseSchedule::make(kind, T);
      CHECK(s.num_steps() == T);
      CHECK(s.alpha_bar(0) == 1.0);
      for (int t = 1; t <= T; ++t) {
        CHECK(s.alpha_bar(t) > 0.0);
        CHECK(s.alpha_bar(t) <= s.alpha_bar(t - 1));
        CHECK(std::isfinite(std::sqrt(1.0 - s.alpha_bar(t))));
      }
    }
}

TEST_CASE("schedule construction rejects invalid coefficients") {
  CHECK_THROWS_AS(NoiseSchedule({0.9, 0.5}), ConfigError);
  CHECK_THROWS_AS(NoiseSchedule({1.0, 0.5, 0.7}), ConfigError);
  CHECK_THROWS_AS(NoiseSchedule({1.0, 0.0}), ConfigError);
  CHECK_THROWS_AS(NoiseSchedule::cosine(0), ConfigError);
  CHECK_THROWS_AS(parse_schedule_kind("quadratic"), ConfigError);
}

TEST_CASE("latent batch validation checks targets") {
  LatentBatch b{Tensor({2, 1, 2, 2}), 3, {0, 1}, 0};
  CHECK_NOTHROW(b.validate(2));
  b.class_targets = {0, 2};
  CHECK_THROWS_AS(b.validate(2), ContractError);
  b.class_targets = {0};
  CHECK_THROWS_AS(b.validate(2), ContractError);
}
