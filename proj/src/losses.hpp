// SPDX-License-Identifier: Apache-2.0
/**
 * @file   losses.hpp
 * @brief  Inversion losses: BN-statistic matching, class prior,
 *         teacher/student disagreement and their weighted sum.
 */
#ifndef DFKD_LOSSES_HPP_
#define DFKD_LOSSES_HPP_

#include "autograd.hpp"
#include "nets.hpp"

#include <vector>

namespace dfkd {

struct InversionWeights {
  double alpha = 1.0; // BN statistics
  double beta = 1.0;  // class prior
  double gamma = 1.0; // adversarial disagreement
  double tau = 4.0;   // softmax temperature of the disagreement term
  double eta = 0.0;   // latent edit step size

  void validate() const;
};

/// Floor applied to both variances before the Gaussian KL.
inline constexpr double kVarianceFloor = 1e-5;

/// Sum over layers and channels of KL(N(mu_b, var_b) || N(mu_r, var_r)).
/// `layer_subset` selects BN layers by index; empty means all.
Var bn_loss(const std::vector<BatchMoments> &batch,
            const std::vector<BNLayerStats> &running,
            const std::vector<std::size_t> &layer_subset = {});

/// Mean cross-entropy of logits [N,C] against integer targets.
Var class_prior_loss(const Var &logits, const std::vector<int> &targets);

/// Batch-mean KL(softmax(p/tau) || softmax(q/tau)).
Var softmax_kl(const Var &p_logits, const Var &q_logits, double tau);

/// Negated teacher/student KL at temperature tau; never positive.
Var adversarial_loss(const Var &teacher_logits, const Var &student_logits,
                     double tau);

struct InversionBreakdown {
  double bn = 0.0;
  double cls = 0.0;
  double adv = 0.0;
  double total = 0.0;
};

struct InversionResult {
  Var total;
  InversionBreakdown terms; // unweighted components and weighted total
  Var teacher_logits;
};

/// alpha * L_bn + beta * L_cls + gamma * L_adv on `images` (already in the
/// classifiers' input space). `student` may be null when gamma == 0.
InversionResult inversion_loss(const Var &images,
                               const std::vector<int> &targets,
                               const Classifier &teacher,
                               const Classifier *student,
                               const InversionWeights &w,
                               const std::vector<std::size_t> &bn_subset = {});

} // namespace dfkd

#endif // DFKD_LOSSES_HPP_
