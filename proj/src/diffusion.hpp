// SPDX-License-Identifier: Apache-2.0
/**
 * @file   diffusion.hpp
 * @brief  Noise schedules and the sampling primitives: classifier-free
 *         guidance, clean-latent prediction and the ancestral step.
 *
 * All functions are pure; noise is always injected by the caller.
 */
#ifndef DFKD_DIFFUSION_HPP_
#define DFKD_DIFFUSION_HPP_

#include "autograd.hpp"
#include "tensor.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace dfkd {

enum class ScheduleKind { Cosine, Linear };

ScheduleKind parse_schedule_kind(const std::string &s);
std::string to_string(ScheduleKind k);

/// Cumulative signal coefficients alpha_bar[t], t = 0..T, alpha_bar[0] = 1.
class NoiseSchedule {
public:
  /// Validates 0 < a_t <= 1, a_0 = 1, non-increasing.
  explicit NoiseSchedule(std::vector<double> alpha_bar);

  static NoiseSchedule cosine(int num_steps, double offset = 0.008);
  /// Linear betas, rescaled from the 1000-step DDPM range to num_steps.
  static NoiseSchedule linear(int num_steps, double beta_start = 1e-4,
                              double beta_end = 0.02);
  static NoiseSchedule make(ScheduleKind kind, int num_steps);

  int num_steps() const { return static_cast<int>(alpha_bar_.size()) - 1; }
  double alpha_bar(int t) const;
  const std::vector<double> &alpha_bars() const { return alpha_bar_; }

private:
  std::vector<double> alpha_bar_;
};

struct GuidanceSpec {
  double scale = 3.0;
  /// Condition id reserved for the unconditional ("null") prediction.
  int null_condition = 0;
};

/// A batch of latents sharing one timestep.
struct LatentBatch {
  Tensor data;                    // [N,C,H,W]
  int timestep = 0;
  std::vector<int> class_targets; // one per item
  std::uint64_t rng_seed = 0;

  std::size_t size() const { return data.rank() ? data.dim(0) : 0; }
  /// Throws unless targets match the batch and lie in [0, num_classes).
  void validate(int num_classes) const;
};

/// eps_uncond + s * (eps_cond - eps_uncond).
Tensor classifier_free_noise(const Tensor &eps_cond, const Tensor &eps_uncond,
                             const GuidanceSpec &spec);
Var classifier_free_noise(const Var &eps_cond, const Var &eps_uncond,
                          const GuidanceSpec &spec);

/// (z_t - sqrt(1 - a_t) eps) / sqrt(a_t) with explicit coefficient.
Tensor predict_x0(const Tensor &z_t, const Tensor &eps_hat, double alpha_t);
Var predict_x0(const Var &z_t, const Var &eps_hat, double alpha_t);
/// Schedule form; requires 1 <= z_t.timestep <= T.
Tensor predict_x0(const LatentBatch &z_t, const Tensor &eps_hat,
                  const NoiseSchedule &schedule);

/// sqrt(a_prev) x0 + sqrt(1 - a_prev) noise with explicit coefficient.
Tensor ancestral_step(const Tensor &x0_hat, double alpha_prev,
                      const Tensor &noise);
/// Schedule form: produces z_{t-1}; requires 1 <= t <= T.
Tensor ancestral_step(const Tensor &x0_hat, const NoiseSchedule &schedule,
                      int t, const Tensor &noise);

/// sqrt(a_t) z0 + sqrt(1 - a_t) eps.
Tensor forward_noise(const Tensor &z0, const Tensor &eps, double alpha_t);

} // namespace dfkd

#endif // DFKD_DIFFUSION_HPP_
