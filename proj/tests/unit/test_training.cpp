// SPDX-License-Identifier: Apache-2.0
#include "helpers.hpp"
#include "training.hpp"

#include <doctest.h>

#include <cmath>

using namespace dfkd;

namespace {

ClassifierSpec spec(std::size_t classes) {
  ClassifierSpec s;
  s.image_size = 16;
  s.num_classes = classes;
  return s;
}

TrainConfig quick(std::uint64_t seed) {
  TrainConfig c;
  c.epochs = 8;
  c.seed = seed;
  return c;
}

} // namespace

TEST_CASE("teacher reaches high held-out accuracy on a 2-class 200-image set") {
  const auto train = make_shapes({2, 16, 100, "photo", 1});
  const auto held = make_shapes({2, 16, 100, "photo", 2});
  TrainReport rep;
  const auto net = train_classifier(train, &held, spec(2), quick(3), &rep);
  CHECK(rep.final_accuracy >= 0.95);
  CHECK(evaluate(*net, held).accuracy == rep.final_accuracy);
  CHECK(rep.curve.size() == 8);
}

TEST_CASE("classifier training is reproducible under a fixed seed") {
  const auto train = make_shapes({2, 16, 30, "photo", 4});
  TrainConfig c = quick(5);
  c.epochs = 2;
  const auto a = train_classifier(train, nullptr, spec(2), c);
  const auto b = train_classifier(train, nullptr, spec(2), c);
  CHECK(a->parameter_checksum() == b->parameter_checksum());
  CHECK(a->bn_checksum() == b->bn_checksum());
  c.seed = 6;
  const auto d = train_classifier(train, nullptr, spec(2), c);
  CHECK(d->parameter_checksum() != a->parameter_checksum());
}

TEST_CASE("training rejects empty data and impossible floors") {
  LabeledImages empty;
  empty.images = Tensor({0, 1, 16, 16});
  empty.num_classes = 2;
  CHECK_THROWS_AS(train_classifier(empty, nullptr, spec(2), quick(1)), ConfigError);
  const auto train = make_shapes({2, 16, 10, "photo", 7});
  CHECK_THROWS_AS(train_classifier(train, nullptr, spec(3), quick(1)), ConfigError);
  TrainConfig c = quick(1);
  c.epochs = 1;
  c.accuracy_floor = 1.01;
  CHECK_THROWS_AS(train_classifier(train, nullptr, spec(2), c), TrainingError);
}

TEST_CASE("an untrained classifier is at chance level") {
  const std::size_t C = 4;
  const auto held = make_shapes({C, 16, 100, "photo", 8});
  const double n = static_cast<double>(held.size());
  const double p = 1.0 / static_cast<double>(C);
  const double sigma = std::sqrt(p * (1.0 - p) / n);
  double mean = 0.0;
  for (std::uint64_t s = 0; s < 5; ++s)
    mean += evaluate(Classifier(spec(C), 100 + s), held).accuracy / 5.0;
  // Tolerance is the binomial sigma of a single evaluation.
  CHECK(std::abs(mean - p) <= 3.0 * sigma);
}

TEST_CASE("evaluation reports recall and a consistent confusion matrix") {
  const auto held = make_shapes({3, 16, 10, "photo", 9});
  const EvalResult r = evaluate(Classifier(spec(3), 10), held);
  CHECK(r.count == 30);
  std::size_t diag = 0, total = 0;
  for (std::size_t t = 0; t < 3; ++t) {
    std::size_t row = 0;
    for (std::size_t q = 0; q < 3; ++q) {
      row += r.confusion[t][q];
      total += r.confusion[t][q];
    }
    diag += r.confusion[t][t];
    CHECK(row == 10);
    CHECK(r.per_class_recall[t] == doctest::Approx(r.confusion[t][t] / 10.0));
  }
  CHECK(total == 30);
  CHECK(r.accuracy == doctest::Approx(diag / 30.0));
  LabeledImages wrong = held;
  wrong.num_classes = 2;
  CHECK_THROWS(evaluate(Classifier(spec(3), 10), wrong));
}

TEST_CASE("denoiser training lowers the noise-prediction loss") {
  const auto data = make_shapes({2, 16, 20, "mixed", 11});
  IdentityCodec codec;
  fit_latent_scale(codec, data.images);
  DenoiserSpec ds;
  ds.num_classes = 2;
  ds.width = 8;
  const NoiseSchedule sched = NoiseSchedule::cosine(10);
  DenoiserTrainConfig c;
  c.epochs = 6;
  c.seed = 12;
  TrainReport rep;
  train_denoiser(encode_images(codec, data.images), data.labels, ds, sched, c, &rep);
  REQUIRE(rep.curve.size() == 6);
  CHECK(rep.curve.back().loss < rep.curve.front().loss);
  ds.num_steps = 20;
  CHECK_THROWS_AS(train_denoiser(encode_images(codec, data.images), data.labels, ds, sched, c),
                  ConfigError);
}

TEST_CASE("autoencoder codec training lowers reconstruction error") {
  const auto data = make_shapes({2, 16, 20, "mixed", 13});
  auto codec = make_codec("autoencoder", 1, 2, 14);
  TrainConfig c;
  c.epochs = 6;
  c.seed = 15;
  TrainReport rep;
  train_codec(*codec, data.images, c, &rep);
  REQUIRE(rep.curve.size() == 6);
  CHECK(rep.curve.back().loss < rep.curve.front().loss);
}

TEST_CASE("shuffled indices are a permutation") {
  Rng rng(16);
  auto idx = shuffled_indices(50, rng);
  std::sort(idx.begin(), idx.end());
  for (std::size_t i = 0; i < 50; ++i)
    CHECK(idx[i] == i);
}
