// SPDX-License-Identifier: Apache-2.0
#include "training.hpp"

#include "losses.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <numeric>
#include <sstream>

namespace dfkd {

std::vector<std::size_t> shuffled_indices(std::size_t n, Rng &rng) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  for (std::size_t i = n; i > 1; --i)
    std::swap(idx[i - 1], idx[static_cast<std::size_t>(
                              rng.randint(0, static_cast<long>(i) - 1))]);
  return idx;
}

namespace {

std::size_t count_correct(const Tensor &logits, const std::vector<int> &y) {
  const std::size_t k = logits.dim(1);
  std::size_t ok = 0;
  for (std::size_t i = 0; i < y.size(); ++i) {
    const double *row = logits.data() + i * k;
    ok += static_cast<int>(std::max_element(row, row + k) - row) == y[i];
  }
  return ok;
}

// Cosine decay to 5% of the base rate.
double cosine_lr(double base, std::size_t epoch, std::size_t epochs) {
  const double frac = static_cast<double>(epoch) / static_cast<double>(epochs);
  return base * (0.05 + 0.475 * (1 + std::cos(std::numbers::pi * frac)));
}

// Throws once the smoothed loss stays above 1.5x its best for `patience`
// consecutive epochs. Plateaus are fine; smoothing keeps stochastic
// objectives from tripping it.
class DivergenceWatch {
public:
  DivergenceWatch(std::string what, std::size_t patience)
      : what_(std::move(what)), patience_(patience) {}

  void observe(std::size_t epoch, double loss) {
    if (!std::isfinite(loss))
      throw NumericError(what_ + ": non-finite loss at epoch " +
                         std::to_string(epoch));
    history_.push_back(loss);
    ema_ = history_.size() == 1 ? loss : 0.7 * ema_ + 0.3 * loss;
    best_ = std::min(best_, ema_);
    if (ema_ <= 1.5 * best_) {
      stall_ = 0;
      return;
    }
    if (patience_ > 0 && ++stall_ >= patience_) {
      std::ostringstream os;
      os << what_ << ": diverged, smoothed loss above 1.5x its best ("
         << best_ << ") for " << stall_ << " epochs; recent losses:";
      for (std::size_t i = history_.size() > 5 ? history_.size() - 5 : 0;
           i < history_.size(); ++i)
        os << ' ' << history_[i];
      throw TrainingError(os.str());
    }
  }

private:
  std::string what_;
  std::size_t patience_;
  double best_ = std::numeric_limits<double>::infinity();
  double ema_ = 0.0;
  std::size_t stall_ = 0;
  std::vector<double> history_;
};

} // namespace

Tensor predict_logits(const Classifier &net, const Tensor &images) {
  NoParamGradGuard guard;
  const std::size_t n = images.dim(0), chunk = 256;
  std::vector<Tensor> parts;
  for (std::size_t b = 0; b < n; b += chunk)
    parts.push_back(
        net.forward(Var::constant(images.slice0(b, std::min(n, b + chunk))))
            .logits.value());
  return concat0(parts);
}

EvalResult evaluate(const Classifier &net, const LabeledImages &data) {
  if (data.size() == 0)
    throw ConfigError("evaluate: empty evaluation set");
  if (data.num_classes != net.num_classes())
    throw ContractError("evaluate: class-space mismatch (data has " +
                        std::to_string(data.num_classes) + ", model has " +
                        std::to_string(net.num_classes()) + ")");
  const Tensor logits = predict_logits(net, data.images);
  const std::size_t k = net.num_classes();
  EvalResult r;
  r.count = data.size();
  r.confusion.assign(k, std::vector<std::size_t>(k, 0));
  std::size_t ok = 0;
  for (std::size_t i = 0; i < data.size(); ++i) {
    const double *row = logits.data() + i * k;
    const auto pred = static_cast<std::size_t>(std::max_element(row, row + k) - row);
    const auto y = static_cast<std::size_t>(data.labels[i]);
    ++r.confusion.at(y).at(pred);
    ok += pred == y;
  }
  r.accuracy = static_cast<double>(ok) / static_cast<double>(data.size());
  r.per_class_recall.resize(k);
  for (std::size_t c = 0; c < k; ++c) {
    const std::size_t total =
        std::accumulate(r.confusion[c].begin(), r.confusion[c].end(),
                        std::size_t{0});
    r.per_class_recall[c] =
        total ? static_cast<double>(r.confusion[c][c]) / total : 0.0;
  }
  return r;
}

std::unique_ptr<Classifier> train_classifier(const LabeledImages &train,
                                             const LabeledImages *heldout,
                                             const ClassifierSpec &spec,
                                             const TrainConfig &cfg,
                                             TrainReport *report) {
  if (train.size() == 0)
    throw ConfigError("train_classifier: empty training set");
  if (train.num_classes != spec.num_classes)
    throw ConfigError("train_classifier: dataset has " +
                      std::to_string(train.num_classes) +
                      " classes, model expects " +
                      std::to_string(spec.num_classes));
  if (cfg.epochs == 0 || cfg.batch_size == 0 || !(cfg.lr > 0))
    throw ConfigError("train_classifier: epochs, batch_size and lr must be positive");
  auto net = std::make_unique<Classifier>(spec, derive_seed(cfg.seed, 1));
  Adam opt(net->parameters(), cfg.lr);
  Rng rng(derive_seed(cfg.seed, 2));
  DivergenceWatch watch("train_classifier", cfg.patience);
  TrainReport local;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    opt.set_lr(cosine_lr(cfg.lr, epoch, cfg.epochs));
    const auto order = shuffled_indices(train.size(), rng);
    double loss_sum = 0.0;
    std::size_t correct = 0, batches = 0;
    for (std::size_t b = 0; b < order.size(); b += cfg.batch_size) {
      const std::vector<std::size_t> idx(
          order.begin() + b,
          order.begin() + std::min(order.size(), b + cfg.batch_size));
      if (idx.size() < 2)
        continue; // BN needs more than one item
      const auto y = train.gather_labels(idx);
      opt.zero_grad();
      ClassifierOutput out = net->train_forward(Var::constant(train.gather(idx)));
      Var loss = class_prior_loss(out.logits, y);
      for (std::size_t k = 0; k + 1 < Classifier::kStages && cfg.aux_weight > 0;
           ++k) {
        Var aux = ag::linear(ag::global_avg_pool(out.taps[k]),
                             net->tap_projection(k).use(), Var());
        loss = ag::add(loss, ag::scale(class_prior_loss(aux, y), cfg.aux_weight));
      }
      backward(loss);
      opt.step();
      loss_sum += loss.item();
      correct += count_correct(out.logits.value(), y);
      ++batches;
    }
    EpochMetric m;
    m.epoch = epoch;
    m.loss = loss_sum / std::max<std::size_t>(1, batches);
    m.train_accuracy = static_cast<double>(correct) / train.size();
    if (heldout)
      m.eval_accuracy = evaluate(*net, *heldout).accuracy;
    local.curve.push_back(m);
    watch.observe(epoch, m.loss);
  }
  local.final_accuracy =
      heldout ? local.curve.back().eval_accuracy : evaluate(*net, train).accuracy;
  if (report)
    *report = local;
  if (cfg.accuracy_floor > 0 && local.final_accuracy < cfg.accuracy_floor)
    throw TrainingError("train_classifier: accuracy " +
                        std::to_string(local.final_accuracy) +
                        " below the configured floor " +
                        std::to_string(cfg.accuracy_floor));
  return net;
}

std::unique_ptr<Denoiser> train_denoiser(const Tensor &latents,
                                         const std::vector<int> &labels,
                                         const DenoiserSpec &spec,
                                         const NoiseSchedule &schedule,
                                         const DenoiserTrainConfig &cfg,
                                         TrainReport *report) {
  if (latents.rank() != 4 || latents.dim(0) == 0)
    throw ConfigError("train_denoiser: empty training set");
  if (labels.size() != latents.dim(0))
    throw ConfigError("train_denoiser: label count mismatch");
  if (spec.num_steps != schedule.num_steps())
    throw ConfigError("train_denoiser: spec and schedule step counts differ");
  if (cfg.epochs == 0 || cfg.batch_size == 0 || !(cfg.lr > 0))
    throw ConfigError("train_denoiser: epochs, batch_size and lr must be positive");
  auto net = std::make_unique<Denoiser>(spec, derive_seed(cfg.seed, 1));
  Adam opt(net->parameters(), cfg.lr);
  Rng rng(derive_seed(cfg.seed, 2));
  DivergenceWatch watch("train_denoiser", cfg.patience);
  TrainReport local;
  const std::size_t n = latents.dim(0);
  const std::size_t inner = latents.numel() / n;
  const int steps = schedule.num_steps();
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    opt.set_lr(cosine_lr(cfg.lr, epoch, cfg.epochs));
    const auto order = shuffled_indices(n, rng);
    double loss_sum = 0.0;
    std::size_t batches = 0;
    for (std::size_t b = 0; b < n; b += cfg.batch_size) {
      const std::size_t m = std::min(n, b + cfg.batch_size) - b;
      Shape s = latents.shape();
      s[0] = m;
      Tensor z0(s), eps(s), zt(s);
      std::vector<int> ts(m), cond(m);
      for (std::size_t i = 0; i < m; ++i) {
        const std::size_t src = order[b + i];
        std::copy_n(latents.data() + src * inner, inner, z0.data() + i * inner);
        ts[i] = static_cast<int>(rng.randint(1, steps));
        cond[i] = rng.uniform() < cfg.cond_dropout ? net->null_condition()
                                                   : labels[src];
        const double a = schedule.alpha_bar(ts[i]);
        const double sa = std::sqrt(a), sn = std::sqrt(1.0 - a);
        for (std::size_t j = 0; j < inner; ++j) {
          const double e = rng.normal();
          eps[i * inner + j] = e;
          zt[i * inner + j] = sa * z0[i * inner + j] + sn * e;
        }
      }
      opt.zero_grad();
      Var pred = net->forward(Var::constant(zt), ts, cond);
      Var loss = ag::mean(ag::square(ag::sub(pred, Var::constant(eps))));
      backward(loss);
      opt.step();
      loss_sum += loss.item();
      ++batches;
    }
    EpochMetric em;
    em.epoch = epoch;
    em.loss = loss_sum / std::max<std::size_t>(1, batches);
    local.curve.push_back(em);
    watch.observe(epoch, em.loss);
  }
  local.final_accuracy = -1.0;
  if (report)
    *report = local;
  return net;
}

void train_codec(Codec &codec, const Tensor &images, const TrainConfig &cfg,
                 TrainReport *report) {
  auto params = codec.parameters();
  if (params.empty())
    return;
  if (images.rank() != 4 || images.dim(0) == 0)
    throw ConfigError("train_codec: empty training set");
  Adam opt(params, cfg.lr);
  Rng rng(derive_seed(cfg.seed, 3));
  DivergenceWatch watch("train_codec", cfg.patience);
  TrainReport local;
  const std::size_t n = images.dim(0);
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    const auto order = shuffled_indices(n, rng);
    double loss_sum = 0.0;
    std::size_t batches = 0;
    for (std::size_t b = 0; b < n; b += cfg.batch_size) {
      std::vector<Tensor> rows;
      for (std::size_t i = b; i < std::min(n, b + cfg.batch_size); ++i)
        rows.push_back(images.slice0(order[i], order[i] + 1));
      Var x = Var::constant(concat0(rows));
      opt.zero_grad();
      Var loss = ag::mean(ag::square(ag::sub(codec.decode(codec.encode(x)), x)));
      backward(loss);
      opt.step();
      loss_sum += loss.item();
      ++batches;
    }
    EpochMetric em;
    em.epoch = epoch;
    em.loss = loss_sum / std::max<std::size_t>(1, batches);
    local.curve.push_back(em);
    watch.observe(epoch, em.loss);
  }
  if (report)
    *report = local;
}

double fit_latent_scale(Codec &codec, const Tensor &images) {
  codec.set_latent_scale(1.0);
  const Tensor z = encode_images(codec, images);
  double mu = 0.0, sq = 0.0;
  for (double v : z.vec())
    mu += v;
  mu /= static_cast<double>(z.numel());
  for (double v : z.vec())
    sq += (v - mu) * (v - mu);
  const double sd = std::sqrt(sq / static_cast<double>(z.numel()));
  if (!(sd > 0.0))
    throw NumericError("fit_latent_scale: latents have zero variance");
  // Nearest power of two: scaling then unscaling is exact.
  const double scale = std::exp2(std::round(std::log2(1.0 / sd)));
  codec.set_latent_scale(scale);
  return scale;
}

Tensor encode_images(const Codec &codec, const Tensor &images) {
  NoParamGradGuard guard;
  return codec.encode(Var::constant(images)).value();
}

Tensor decode_latents(const Codec &codec, const Tensor &latents) {
  NoParamGradGuard guard;
  return codec.decode(Var::constant(latents)).value();
}

} // namespace dfkd
