// SPDX-License-Identifier: Apache-2.0
/**
 * @file   distill.hpp
 * @brief  Student training on synthetic data: temperature-scaled KL on the
 *         logits plus agreement of class activation maps at paired taps.
 */
#ifndef DFKD_DISTILL_HPP_
#define DFKD_DISTILL_HPP_

#include "dataset.hpp"
#include "nets.hpp"

#include <optional>
#include <vector>

namespace dfkd {

/// Student tap paired with a teacher tap.
struct LayerPair {
  std::size_t student_tap = 0;
  std::size_t teacher_tap = 0;
};

struct KDConfig {
  double weight_kl = 1.0;  // coefficient on the logit KL
  double weight_cam = 1.0; // coefficient on the CAM agreement term
  double temperature = 4.0;
  std::vector<LayerPair> layer_pairs{{0, 0}, {1, 1}, {2, 2}};
  std::size_t epochs = 10; // per round
  std::size_t batch_size = 64;
  double lr = 2e-3;
  std::uint64_t seed = 0;

  void validate() const;
};

/// temperature^2 * batch-mean KL(softmax(t/T) || softmax(s/T)).
Var kd_kl_loss(const Var &teacher_logits, const Var &student_logits,
               double temperature);

struct CAMap {
  Var map;                      // [N,H,W]
  std::vector<int> classes;     // class used per item
  std::size_t tap = 0;
  bool normalized = false;
  std::vector<bool> zero_items; // items whose map had zero norm
};

/// Per-item sum_c w[y_n, c] * F[n, c] over features [N,C,H,W] and class
/// weights [K,C]; optionally resized, then L2-normalised over the grid.
CAMap compute_cam(const Var &features, const Var &class_weights,
                  const std::vector<int> &classes, bool normalize = true,
                  std::optional<std::pair<std::size_t, std::size_t>> resize = {});

/// CAM of a classifier at tap k (head weights at the last tap, the stage
/// projection elsewhere).
CAMap classifier_cam(const Classifier &net, const ClassifierOutput &out,
                     std::size_t tap, const std::vector<int> &classes,
                     std::optional<std::pair<std::size_t, std::size_t>> resize = {});

/// Elementwise MSE between two normalised maps of equal shape.
Var cam_mse(const CAMap &a, const CAMap &b);

/// Sum over pairs of the MSE between normalised student and teacher CAMs;
/// student maps are resized to the teacher tap resolution first.
Var msarc_loss(const Classifier &student, const ClassifierOutput &student_out,
               const Classifier &teacher, const ClassifierOutput &teacher_out,
               const std::vector<int> &classes,
               const std::vector<LayerPair> &pairs);

struct DistillTerms {
  Var total;
  double kl = 0.0;
  double cam = 0.0;
};

/// weight_kl * KL + weight_cam * CAM term for precomputed outputs.
DistillTerms distill_loss(const Classifier &student,
                          const ClassifierOutput &student_out,
                          const Classifier &teacher,
                          const ClassifierOutput &teacher_out,
                          const std::vector<int> &classes, const KDConfig &cfg);

struct DistillEpoch {
  int round = 0;
  std::size_t epoch = 0;
  double kl = 0.0;
  double cam = 0.0;
  double total = 0.0;
  /// Largest |total - (w_kl*kl + w_cam*cam)| over logged steps.
  double decomposition_error = 0.0;
  double eval_accuracy = -1.0;
};

struct DistillReport {
  std::vector<DistillEpoch> epochs;
  std::uint64_t teacher_checksum_before = 0;
  std::uint64_t teacher_checksum_after = 0;
};

/// Trains `student` for cfg.epochs on `data` against the frozen teacher.
/// Throws NumericError on a non-finite loss after restoring the state the
/// student had at the start of the failing epoch.
DistillReport distill_round(Classifier &student, const Classifier &teacher,
                            const LabeledImages &data, const KDConfig &cfg,
                            const LabeledImages *heldout = nullptr,
                            int round = 0);

/// Labels each image with the teacher's top-1 prediction.
std::vector<int> teacher_labels(const Classifier &teacher, const Tensor &images);

} // namespace dfkd

#endif // DFKD_DISTILL_HPP_
