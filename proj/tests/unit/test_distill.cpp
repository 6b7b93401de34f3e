// SPDX-License-Identifier: Apache-2.0
#include "distill.hpp"
#include "helpers.hpp"
#include "losses.hpp"

#include <doctest.h>

#include <cmath>
#include <limits>

using namespace dfkd;
using dfkd::test::random_tensor;

namespace {

ClassifierSpec spec(std::size_t classes = 3) {
  ClassifierSpec s;
  s.image_size = 8;
  s.num_classes = classes;
  s.stem_width = 4;
  s.widths = {4, 6, 8};
  return s;
}

ClassifierSpec small_student() {
  ClassifierSpec s = spec();
  s.stem_width = 3;
  s.widths = {3, 4, 5};
  return s;
}

Var row(std::vector<double> v) {
  const std::size_t n = v.size();
  return Var::constant(Tensor({1, n}, std::move(v)));
}

/// T^2 * KL(softmax(t/T) || softmax(s/T)) for one row.
double kd_oracle(const std::vector<double> &t, const std::vector<double> &s, double T) {
  double zt = 0.0, zs = 0.0;
  for (std::size_t i = 0; i < t.size(); ++i) {
    zt += std::exp(t[i] / T);
    zs += std::exp(s[i] / T);
  }
  double kl = 0.0;
  for (std::size_t i = 0; i < t.size(); ++i) {
    const double p = std::exp(t[i] / T) / zt, q = std::exp(s[i] / T) / zs;
    kl += p * std::log(p / q);
  }
  return T * T * kl;
}

LabeledImages toy_data(std::size_t n, std::uint64_t seed) {
  LabeledImages d;
  d.images = random_tensor({n, 1, 8, 8}, seed);
  d.num_classes = 3;
  for (std::size_t i = 0; i < n; ++i)
    d.labels.push_back(static_cast<int>(i % 3));
  return d;
}

KDConfig quick_kd() {
  KDConfig c;
  c.epochs = 2;
  c.batch_size = 8;
  c.seed = 5;
  return c;
}

} // namespace

TEST_CASE("distillation KL matches the direct formula at two temperatures") {
  const std::vector<double> t = {2.0, -1.0, 0.5}, s = {0.1, 0.7, -0.4};
  for (double T : {1.0, 4.0})
    CHECK(kd_kl_loss(row(t), row(s), T).item() ==
          doctest::Approx(kd_oracle(t, s, T)).epsilon(1e-10));
}

TEST_CASE("distillation KL is zero on identical logits and never negative") {
  const Var a = Var::constant(random_tensor({5, 4}, 1, 3.0));
  CHECK(kd_kl_loss(a, a, 4.0).item() == doctest::Approx(0.0).scale(1.0));
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const Var t = Var::constant(random_tensor({5, 4}, 100 + seed, 3.0));
    const Var s = Var::constant(random_tensor({5, 4}, 200 + seed, 3.0));
    CHECK(kd_kl_loss(t, s, 1.0 + seed % 5).item() >= 0.0);
  }
  CHECK_THROWS(kd_kl_loss(a, row({1.0, 2.0}), 1.0));
}

TEST_CASE("class activation map hand value on a 2x2 grid") {
  // Two channels; class 0 weights (2, -1).
  const Var f = Var::constant(Tensor({1, 2, 2, 2}, std::vector<double>{1, 2, 3, 4, 0, 1, 1, 0}));
  const Var w = Var::constant(Tensor({2, 2}, std::vector<double>{2, -1, 0, 1}));
  const CAMap raw = compute_cam(f, w, {0}, false);
  const std::vector<double> expect = {2, 3, 5, 8};
  for (std::size_t i = 0; i < 4; ++i)
    CHECK(raw.map.value()[i] == doctest::Approx(expect[i]));
  const CAMap norm = compute_cam(f, w, {0}, true);
  const double n = std::sqrt(4.0 + 9.0 + 25.0 + 64.0);
  for (std::size_t i = 0; i < 4; ++i)
    CHECK(norm.map.value()[i] == doctest::Approx(expect[i] / n));
  const CAMap other = compute_cam(f, w, {1}, false);
  CHECK(other.map.value()[0] == doctest::Approx(0.0));
  CHECK(other.map.value()[1] == doctest::Approx(1.0));
}

TEST_CASE("single-channel map is the normalised feature map up to the weight sign") {
  const Tensor f = random_tensor({2, 1, 3, 3}, 2);
  const Var w = Var::constant(Tensor({2, 1}, std::vector<double>{3.0, -0.5}));
  const CAMap cam = compute_cam(Var::constant(f), w, {0, 1}, true);
  for (std::size_t n = 0; n < 2; ++n) {
    double norm = 0.0;
    for (std::size_t i = 0; i < 9; ++i)
      norm += f[n * 9 + i] * f[n * 9 + i];
    norm = std::sqrt(norm);
    const double sign = n == 0 ? 1.0 : -1.0;
    for (std::size_t i = 0; i < 9; ++i)
      CHECK(cam.map.value()[n * 9 + i] == doctest::Approx(sign * f[n * 9 + i] / norm));
  }
}

TEST_CASE("zero features give a zero map without NaN") {
  const Var f = Var::constant(Tensor({2, 3, 2, 2}, 0.0));
  const Var w = Var::constant(random_tensor({2, 3}, 3));
  const CAMap cam = compute_cam(f, w, {0, 1}, true);
  CHECK(cam.zero_items == std::vector<bool>{true, true});
  for (double v : cam.map.value().vec())
    CHECK(v == 0.0);
}

TEST_CASE("compute_cam rejects bad classes and weight shapes") {
  const Var f = Var::constant(random_tensor({2, 3, 2, 2}, 4));
  CHECK_THROWS(compute_cam(f, Var::constant(random_tensor({2, 4}, 5)), {0, 1}));
  CHECK_THROWS(compute_cam(f, Var::constant(random_tensor({2, 3}, 5)), {0, 2}));
  CHECK_THROWS(compute_cam(f, Var::constant(random_tensor({2, 3}, 5)), {0}));
}

TEST_CASE("map agreement is invariant to positive feature scaling and matches hand MSE") {
  const Tensor f = random_tensor({2, 3, 4, 4}, 6);
  const Var w = Var::constant(random_tensor({2, 3}, 7));
  Tensor f3 = f;
  f3 *= 3.7;
  const CAMap a = compute_cam(Var::constant(f), w, {0, 1});
  const CAMap b = compute_cam(Var::constant(f3), w, {0, 1});
  CHECK(cam_mse(a, b).item() == doctest::Approx(0.0).scale(1.0));

  const Tensor g = random_tensor({2, 3, 4, 4}, 8);
  const CAMap c = compute_cam(Var::constant(g), w, {0, 1});
  double mse = 0.0;
  for (std::size_t i = 0; i < 32; ++i) {
    const double d = a.map.value()[i] - c.map.value()[i];
    mse += d * d;
  }
  CHECK(cam_mse(a, c).item() == doctest::Approx(mse / 32.0).epsilon(1e-12));
}

TEST_CASE("a copy of the teacher has zero distillation loss") {
  const Classifier teacher(spec(), 10), copy(spec(), 10);
  const Var x = Var::constant(random_tensor({4, 1, 8, 8}, 11));
  const auto t = teacher.forward(x), s = copy.forward(x);
  const KDConfig cfg;
  const DistillTerms d = distill_loss(copy, s, teacher, t, {0, 1, 2, 0}, cfg);
  CHECK(d.kl == doctest::Approx(0.0).scale(1.0));
  CHECK(d.cam == doctest::Approx(0.0).scale(1.0));
  CHECK(d.total.item() == doctest::Approx(0.0).scale(1.0));
}

TEST_CASE("without the map term the loss is the weighted KL") {
  const Classifier teacher(spec(), 12), student(small_student(), 13);
  const Var x = Var::constant(random_tensor({4, 1, 8, 8}, 14));
  const auto t = teacher.forward(x), s = student.forward(x);
  KDConfig cfg;
  cfg.weight_cam = 0.0;
  cfg.weight_kl = 0.7;
  const DistillTerms d = distill_loss(student, s, teacher, t, {0, 1, 2, 0}, cfg);
  CHECK(d.total.item() ==
        doctest::Approx(0.7 * kd_kl_loss(t.logits, s.logits, cfg.temperature).item()));
  CHECK(d.cam == 0.0);
}

TEST_CASE("map term sums paired MSE after resizing student maps") {
  const Classifier teacher(spec(), 15), student(small_student(), 16);
  const Var x = Var::constant(random_tensor({3, 1, 8, 8}, 17));
  const std::vector<int> y = {0, 1, 2};
  const auto t = teacher.forward(x), s = student.forward(x);
  const std::vector<LayerPair> pairs = {{0, 1}, {2, 2}};
  double expect = 0.0;
  for (const auto &p : pairs) {
    const CAMap tc = classifier_cam(teacher, t, p.teacher_tap, y);
    const CAMap sc = classifier_cam(student, s, p.student_tap, y,
                                    std::make_pair(tc.map.dim(1), tc.map.dim(2)));
    expect += cam_mse(sc, tc).item();
  }
  CHECK(msarc_loss(student, s, teacher, t, y, pairs).item() == doctest::Approx(expect));
  CHECK_THROWS_AS(msarc_loss(student, s, teacher, t, y, {}), ConfigError);
}

TEST_CASE("distillation gradient reaches the student and matches central differences") {
  const Classifier teacher(spec(), 18);
  Classifier student(small_student(), 19);
  const Var x = Var::constant(random_tensor({3, 1, 8, 8}, 20));
  const auto t = teacher.forward(x);
  Parameter &head = *student.parameters().back();
  const Tensor w0 = head.value;
  const KDConfig cfg;
  auto loss = [&](const Var &) {
    const auto s = student.forward(x);
    return distill_loss(student, s, teacher, t, {0, 1, 2}, cfg).total;
  };
  // Perturb one student parameter tensor through its value.
  const Tensor numeric = dfkd::test::numeric_grad(
      [&](const Tensor &p) {
        head.value = p;
        const double v = loss(Var()).item();
        head.value = w0;
        return v;
      },
      w0);
  head.grad.fill(0.0);
  backward(loss(Var()));
  CHECK(dfkd::test::norm_rel_error(head.grad, numeric) < 1e-5);
}

TEST_CASE("training keeps the teacher frozen and the loss decomposition exact") {
  const Classifier teacher(spec(), 21);
  Classifier student(small_student(), 22);
  const auto before = teacher.parameter_checksum(), bn = teacher.bn_checksum();
  const DistillReport r = distill_round(student, teacher, toy_data(24, 23), quick_kd());
  CHECK(r.teacher_checksum_before == r.teacher_checksum_after);
  CHECK(teacher.parameter_checksum() == before);
  CHECK(teacher.bn_checksum() == bn);
  REQUIRE(r.epochs.size() == 2);
  for (const auto &e : r.epochs)
    CHECK(e.decomposition_error < 1e-6);
}

TEST_CASE("distillation lowers the loss on a fixed set") {
  const Classifier teacher(spec(), 24);
  Classifier student(small_student(), 25);
  KDConfig cfg = quick_kd();
  cfg.epochs = 15;
  const DistillReport r = distill_round(student, teacher, toy_data(32, 26), cfg);
  CHECK(r.epochs.back().total < r.epochs.front().total);
}

TEST_CASE("distillation is reproducible under a fixed seed") {
  const Classifier teacher(spec(), 27);
  Classifier a(small_student(), 28), b(small_student(), 28);
  const auto data = toy_data(16, 29);
  distill_round(a, teacher, data, quick_kd());
  distill_round(b, teacher, data, quick_kd());
  CHECK(a.parameter_checksum() == b.parameter_checksum());
}

TEST_CASE("a non-finite loss restores the student and raises") {
  Classifier teacher(spec(), 30);
  Classifier student(small_student(), 31);
  // A poisoned teacher head makes every target non-finite.
  for (auto &[name, t] : teacher.state())
    if (name.rfind("head", 0) == 0)
      t->fill(std::numeric_limits<double>::quiet_NaN());
  const auto before = state_checksum(student.state());
  CHECK_THROWS_AS(distill_round(student, teacher, toy_data(16, 32), quick_kd()), NumericError);
  CHECK(state_checksum(student.state()) == before);
}

TEST_CASE("distillation rejects empty or mismatched data") {
  const Classifier teacher(spec(), 33);
  Classifier student(small_student(), 34);
  LabeledImages empty;
  empty.images = Tensor({0, 1, 8, 8});
  empty.num_classes = 3;
  CHECK_THROWS_AS(distill_round(student, teacher, empty, quick_kd()), ConfigError);
  Classifier two(spec(2), 35);
  CHECK_THROWS_AS(distill_round(two, teacher, toy_data(8, 36), quick_kd()), ConfigError);
  KDConfig bad = quick_kd();
  bad.temperature = 0.0;
  CHECK_THROWS_AS(distill_round(student, teacher, toy_data(8, 36), bad), ConfigError);
}

TEST_CASE("teacher labels are the top-1 predictions") {
  const Classifier teacher(spec(), 37);
  const Tensor x = random_tensor({5, 1, 8, 8}, 38);
  const auto labels = teacher_labels(teacher, x);
  const Tensor logits = teacher.forward(Var::constant(x)).logits.value();
  for (std::size_t i = 0; i < 5; ++i)
    for (std::size_t k = 0; k < 3; ++k)
      CHECK(logits[i * 3 + static_cast<std::size_t>(labels[i])] >= logits[i * 3 + k]);
}
