// SPDX-License-Identifier: Apache-2.0
#include "distill.hpp"

#include "losses.hpp"
#include "training.hpp"

#include <algorithm>
#include <cmath>

namespace dfkd {

void KDConfig::validate() const {
  if (!(weight_kl >= 0.0) || !(weight_cam >= 0.0))
    throw ConfigError("kd: loss weights must be >= 0");
  if (!(temperature > 0.0))
    throw ConfigError("kd: temperature must be > 0");
  if (weight_cam > 0.0 && layer_pairs.empty())
    throw ConfigError("kd: weight_cam > 0 requires at least one layer pair");
  for (const auto &p : layer_pairs)
    if (p.student_tap >= Classifier::kStages || p.teacher_tap >= Classifier::kStages)
      throw ConfigError("kd: layer pair tap index out of range");
  if (batch_size < 2)
    throw ConfigError("kd: batch_size must be >= 2");
  if (!(lr > 0.0))
    throw ConfigError("kd: lr must be > 0");
}

Var kd_kl_loss(const Var &teacher_logits, const Var &student_logits,
               double temperature) {
  require_same_shape(teacher_logits.value(), student_logits.value(),
                     "kd_kl_loss");
  require(temperature > 0.0, "kd_kl_loss: temperature must be > 0");
  return ag::scale(softmax_kl(teacher_logits, student_logits, temperature),
                   temperature * temperature);
}

CAMap compute_cam(const Var &features, const Var &class_weights,
                  const std::vector<int> &classes, bool normalize,
                  std::optional<std::pair<std::size_t, std::size_t>> resize) {
  require(features.value().rank() == 4, "compute_cam: features must be [N,C,H,W]");
  require(class_weights.value().rank() == 2 &&
              class_weights.dim(1) == features.dim(1),
          "compute_cam: class weights must be [K," +
              std::to_string(features.dim(1)) + "], got " +
              shape_str(class_weights.shape()));
  require(classes.size() == features.dim(0),
          "compute_cam: one class per item required");
  for (int y : classes)
    require(y >= 0 && static_cast<std::size_t>(y) < class_weights.dim(0),
            "compute_cam: class " + std::to_string(y) + " out of range");
  CAMap cam;
  cam.classes = classes;
  cam.map = ag::channel_contract(features, ag::gather_rows(class_weights, classes));
  if (resize)
    cam.map = ag::resize_bilinear(cam.map, resize->first, resize->second);
  if (normalize) {
    cam.map = ag::l2_normalize_items(cam.map, &cam.zero_items);
    cam.normalized = true;
  } else {
    cam.zero_items.assign(classes.size(), false);
  }
  return cam;
}

CAMap classifier_cam(const Classifier &net, const ClassifierOutput &out,
                     std::size_t tap, const std::vector<int> &classes,
                     std::optional<std::pair<std::size_t, std::size_t>> resize) {
  require(tap < out.taps.size(), "classifier_cam: tap index out of range");
  CAMap cam = compute_cam(out.taps[tap], net.tap_projection(tap).use(), classes,
                          true, resize);
  cam.tap = tap;
  return cam;
}

Var cam_mse(const CAMap &a, const CAMap &b) {
  require_same_shape(a.map.value(), b.map.value(), "cam_mse");
  return ag::mean(ag::square(ag::sub(a.map, b.map)));
}

Var msarc_loss(const Classifier &student, const ClassifierOutput &student_out,
               const Classifier &teacher, const ClassifierOutput &teacher_out,
               const std::vector<int> &classes,
               const std::vector<LayerPair> &pairs) {
  if (pairs.empty())
    throw ConfigError("msarc_loss: no layer pairs configured");
  Var total;
  for (const auto &p : pairs) {
    CAMap t;
    {
      NoParamGradGuard frozen;
      t = classifier_cam(teacher, teacher_out, p.teacher_tap, classes);
    }
    const std::size_t h = t.map.dim(1), w = t.map.dim(2);
    const CAMap s = classifier_cam(student, student_out, p.student_tap, classes,
                                   std::make_pair(h, w));
    t.map = Var::constant(t.map.value());
    Var term = cam_mse(s, t);
    total = total ? ag::add(total, term) : term;
  }
  return total;
}

DistillTerms distill_loss(const Classifier &student,
                          const ClassifierOutput &student_out,
                          const Classifier &teacher,
                          const ClassifierOutput &teacher_out,
                          const std::vector<int> &classes, const KDConfig &cfg) {
  DistillTerms d;
  Var kl = kd_kl_loss(Var::constant(teacher_out.logits.value()),
                      student_out.logits, cfg.temperature);
  d.kl = kl.item();
  d.total = ag::scale(kl, cfg.weight_kl);
  if (cfg.weight_cam > 0.0) {
    Var cam = msarc_loss(student, student_out, teacher, teacher_out, classes,
                         cfg.layer_pairs);
    d.cam = cam.item();
    d.total = ag::add(d.total, ag::scale(cam, cfg.weight_cam));
  }
  return d;
}

namespace {

std::uint64_t frozen_checksum(const Classifier &net) {
  return mix64(net.parameter_checksum() ^ mix64(net.bn_checksum()));
}

std::vector<Tensor> snapshot(Classifier &net) {
  std::vector<Tensor> out;
  for (auto &[name, t] : net.state())
    out.push_back(*t);
  return out;
}

void restore(Classifier &net, const std::vector<Tensor> &saved) {
  auto state = net.state();
  for (std::size_t i = 0; i < state.size(); ++i)
    *state[i].second = saved[i];
}

} // namespace

DistillReport distill_round(Classifier &student, const Classifier &teacher,
                            const LabeledImages &data, const KDConfig &cfg,
                            const LabeledImages *heldout, int round) {
  cfg.validate();
  if (data.size() == 0)
    throw ConfigError("distill_round: empty synthetic dataset");
  if (student.num_classes() != teacher.num_classes() ||
      data.num_classes != teacher.num_classes())
    throw ConfigError("distill_round: class-space mismatch between teacher, "
                      "student and data");
  DistillReport report;
  report.teacher_checksum_before = frozen_checksum(teacher);
  Adam opt(student.parameters(), cfg.lr);
  Rng rng(derive_seed(cfg.seed, static_cast<std::uint64_t>(round)));

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    const auto last_good = snapshot(student);
    const auto order = shuffled_indices(data.size(), rng);
    DistillEpoch em;
    em.round = round;
    em.epoch = epoch;
    std::size_t batches = 0;
    for (std::size_t b = 0; b < order.size(); b += cfg.batch_size) {
      const std::vector<std::size_t> idx(
          order.begin() + b,
          order.begin() + std::min(order.size(), b + cfg.batch_size));
      if (idx.size() < 2)
        continue;
      const Var x = Var::constant(data.gather(idx));
      const auto y = data.gather_labels(idx);
      ClassifierOutput tout;
      {
        NoParamGradGuard frozen;
        tout = teacher.forward(x);
      }
      opt.zero_grad();
      ClassifierOutput sout = student.train_forward(x);
      DistillTerms d = distill_loss(student, sout, teacher, tout, y, cfg);
      const double total = d.total.item();
      if (!std::isfinite(total)) {
        restore(student, last_good);
        throw NumericError("distill_round: non-finite loss at round " +
                           std::to_string(round) + ", epoch " +
                           std::to_string(epoch) +
                           "; student restored to the last good state");
      }
      backward(d.total);
      opt.step();
      em.kl += d.kl;
      em.cam += d.cam;
      em.total += total;
      em.decomposition_error =
          std::max(em.decomposition_error,
                   std::abs(total - (cfg.weight_kl * d.kl + cfg.weight_cam * d.cam)));
      ++batches;
    }
    if (batches) {
      em.kl /= batches;
      em.cam /= batches;
      em.total /= batches;
    }
    if (heldout)
      em.eval_accuracy = evaluate(student, *heldout).accuracy;
    report.epochs.push_back(em);
  }
  report.teacher_checksum_after = frozen_checksum(teacher);
  if (report.teacher_checksum_after != report.teacher_checksum_before)
    throw ContractError("distill_round: teacher parameters changed");
  return report;
}

std::vector<int> teacher_labels(const Classifier &teacher, const Tensor &images) {
  const Tensor logits = predict_logits(teacher, images);
  const std::size_t n = logits.dim(0), k = logits.dim(1);
  std::vector<int> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double *row = logits.data() + i * k;
    out[i] = static_cast<int>(std::max_element(row, row + k) - row);
  }
  return out;
}

} // namespace dfkd
