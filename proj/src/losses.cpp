// SPDX-License-Identifier: Apache-2.0
#include "losses.hpp"

#include <cmath>

namespace dfkd {

namespace {

// Debug-build sign contracts; tolerance absorbs rounding of exact zeros.
void check_sign(double v, bool nonneg, const char *term) {
#ifndef NDEBUG
  if (nonneg ? v < -1e-9 : v > 1e-9)
    throw NumericError(std::string(term) + " violated its sign contract: " +
                       std::to_string(v));
#else
  (void)v;
  (void)nonneg;
  (void)term;
#endif
}

} // namespace

void InversionWeights::validate() const {
  for (double v : {alpha, beta, gamma, tau, eta})
    if (!std::isfinite(v))
      throw ConfigError("inversion weights must be finite");
  if (alpha < 0 || beta < 0 || gamma < 0 || eta < 0)
    throw ConfigError("inversion weights alpha, beta, gamma, eta must be >= 0");
  if (!(tau > 0))
    throw ConfigError("inversion temperature tau must be > 0");
}

Var bn_loss(const std::vector<BatchMoments> &batch,
            const std::vector<BNLayerStats> &running,
            const std::vector<std::size_t> &layer_subset) {
  require(batch.size() == running.size(),
          "bn_loss: layer count mismatch (" + std::to_string(batch.size()) +
              " vs " + std::to_string(running.size()) + ")");
  std::vector<std::size_t> layers = layer_subset;
  if (layers.empty())
    for (std::size_t l = 0; l < batch.size(); ++l)
      layers.push_back(l);
  Var total;
  for (std::size_t l : layers) {
    require(l < batch.size(), "bn_loss: layer index out of range");
    const auto &bm = batch[l];
    const auto &rs = running[l];
    const std::size_t c = bm.mean.numel();
    require(bm.var.numel() == c && rs.running_mean.numel() == c &&
                rs.running_var.numel() == c,
            "bn_loss: channel-count mismatch at layer " + std::to_string(l));
    Tensor inv2v({c}), konst({c});
    for (std::size_t i = 0; i < c; ++i) {
      const double v2 = std::max(rs.running_var[i], kVarianceFloor);
      inv2v[i] = 0.5 / v2;
      konst[i] = 0.5 * std::log(v2) - 0.5;
    }
    Var v1 = ag::clamp_min(bm.var, kVarianceFloor);
    Var gap = ag::square(ag::sub(bm.mean, Var::constant(rs.running_mean)));
    Var kl = ag::add(ag::scale(ag::log(v1), -0.5),
                     ag::mul(ag::add(v1, gap), Var::constant(inv2v)));
    kl = ag::add(kl, Var::constant(konst));
    Var s = ag::sum(kl);
    total = total ? ag::add(total, s) : s;
  }
  if (!total)
    return Var::constant(Tensor::scalar(0.0));
  return total;
}

Var class_prior_loss(const Var &logits, const std::vector<int> &targets) {
  require(logits.shape().size() == 2, "class_prior_loss: logits must be [N,C]");
  if (logits.dim(1) == 0)
    throw ContractError("class_prior_loss: zero classes");
  require(logits.dim(0) > 0, "class_prior_loss: empty batch");
  return ag::scale(ag::mean(ag::pick(ag::log_softmax(logits), targets)), -1.0);
}

Var softmax_kl(const Var &p_logits, const Var &q_logits, double tau) {
  require_same_shape(p_logits.value(), q_logits.value(), "softmax_kl");
  require(tau > 0, "softmax_kl: temperature must be > 0");
  require(p_logits.shape().size() == 2 && p_logits.dim(0) > 0,
          "softmax_kl: logits must be non-empty [N,C]");
  Var ps = ag::scale(p_logits, 1.0 / tau);
  Var qs = ag::scale(q_logits, 1.0 / tau);
  Var logp = ag::log_softmax(ps);
  Var kl = ag::mul(ag::softmax(ps), ag::sub(logp, ag::log_softmax(qs)));
  return ag::scale(ag::sum(kl), 1.0 / static_cast<double>(p_logits.dim(0)));
}

Var adversarial_loss(const Var &teacher_logits, const Var &student_logits,
                     double tau) {
  return ag::scale(softmax_kl(teacher_logits, student_logits, tau), -1.0);
}

InversionResult inversion_loss(const Var &images,
                               const std::vector<int> &targets,
                               const Classifier &teacher,
                               const Classifier *student,
                               const InversionWeights &w,
                               const std::vector<std::size_t> &bn_subset) {
  w.validate();
  ClassifierOutput t = teacher.forward(images, true);
  InversionResult r;
  r.teacher_logits = t.logits;
  std::vector<Var> parts;

  Var lbn = bn_loss(t.bn_moments, teacher.bn_layers(), bn_subset);
  Var lcls = class_prior_loss(t.logits, targets);
  Var ladv;
  if (w.gamma != 0.0) {
    if (!student)
      throw ContractError("inversion_loss: gamma > 0 requires a student");
    ladv = adversarial_loss(t.logits, student->forward(images).logits, w.tau);
  }

  r.terms.bn = lbn.item();
  check_sign(r.terms.bn, true, "L_bn");
  if (w.alpha != 0.0)
    parts.push_back(ag::scale(lbn, w.alpha));
  r.terms.cls = lcls.item();
  check_sign(r.terms.cls, true, "L_cls");
  if (w.beta != 0.0)
    parts.push_back(ag::scale(lcls, w.beta));
  if (ladv) {
    r.terms.adv = ladv.item();
    check_sign(r.terms.adv, false, "L_adv");
    parts.push_back(ag::scale(ladv, w.gamma));
  }

  if (parts.empty()) {
    // Keep the images in the graph so the gradient is an explicit zero.
    r.total = ag::scale(ag::sum(images), 0.0);
  } else {
    r.total = parts[0];
    for (std::size_t i = 1; i < parts.size(); ++i)
      r.total = ag::add(r.total, parts[i]);
  }
  r.terms.total = r.total.item();
  return r;
}

} // namespace dfkd
