// SPDX-License-Identifier: Apache-2.0
#include "diffusion.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

namespace dfkd {

ScheduleKind parse_schedule_kind(const std::string &s) {
  if (s == "cosine")
    return ScheduleKind::Cosine;
  if (s == "linear")
    return ScheduleKind::Linear;
  throw ConfigError("unknown schedule kind '" + s + "'");
}

std::string to_string(ScheduleKind k) {
  return k == ScheduleKind::Cosine ? "cosine" : "linear";
}

NoiseSchedule::NoiseSchedule(std::vector<double> alpha_bar)
    : alpha_bar_(std::move(alpha_bar)) {
  if (alpha_bar_.size() < 2)
    throw ConfigError("schedule needs at least one step");
  if (alpha_bar_[0] != 1.0)
    throw ConfigError("schedule: alpha_bar[0] must be 1");
  for (std::size_t t = 0; t < alpha_bar_.size(); ++t) {
    const double a = alpha_bar_[t];
    if (!(a > 0.0 && a <= 1.0) || !std::isfinite(std::sqrt(1.0 - a)))
      throw ConfigError("schedule: alpha_bar[" + std::to_string(t) +
                        "] outside (0,1]");
    if (t > 0 && a > alpha_bar_[t - 1])
      throw ConfigError("schedule: alpha_bar increases at t=" +
                        std::to_string(t));
  }
}

NoiseSchedule NoiseSchedule::cosine(int num_steps, double offset) {
  if (num_steps < 1)
    throw ConfigError("schedule: num_steps must be positive");
  auto f = [&](double t) {
    const double v =
        std::cos((t / num_steps + offset) / (1.0 + offset) * std::numbers::pi / 2);
    return v * v;
  };
  std::vector<double> ab(num_steps + 1);
  ab[0] = 1.0;
  for (int t = 1; t <= num_steps; ++t) {
    // Clip per-step betas at 0.999 so the last coefficient stays positive.
    const double beta = std::min(1.0 - f(t) / f(t - 1), 0.999);
    ab[t] = ab[t - 1] * (1.0 - beta);
  }
  return NoiseSchedule(std::move(ab));
}

NoiseSchedule NoiseSchedule::linear(int num_steps, double beta_start,
                                    double beta_end) {
  if (num_steps < 1)
    throw ConfigError("schedule: num_steps must be positive");
  const double rescale = 1000.0 / num_steps;
  std::vector<double> ab(num_steps + 1);
  ab[0] = 1.0;
  for (int t = 1; t <= num_steps; ++t) {
    const double frac =
        num_steps == 1 ? 1.0 : static_cast<double>(t - 1) / (num_steps - 1);
    const double beta = std::min(
        (beta_start + frac * (beta_end - beta_start)) * rescale, 0.999);
    ab[t] = ab[t - 1] * (1.0 - beta);
  }
  return NoiseSchedule(std::move(ab));
}

NoiseSchedule NoiseSchedule::make(ScheduleKind kind, int num_steps) {
  return kind == ScheduleKind::Cosine ? cosine(num_steps) : linear(num_steps);
}

double NoiseSchedule::alpha_bar(int t) const {
  if (t < 0 || t > num_steps())
    throw ContractError("schedule: timestep " + std::to_string(t) +
                        " outside [0," + std::to_string(num_steps()) + "]");
  return alpha_bar_[t];
}

void LatentBatch::validate(int num_classes) const {
  require(data.rank() == 4, "LatentBatch: data must be [N,C,H,W]");
  require(class_targets.size() == size(),
          "LatentBatch: one class target per item required");
  for (int y : class_targets)
    require(y >= 0 && y < num_classes,
            "LatentBatch: class target " + std::to_string(y) +
                " outside [0," + std::to_string(num_classes) + ")");
}

Tensor classifier_free_noise(const Tensor &eps_cond, const Tensor &eps_uncond,
                             const GuidanceSpec &spec) {
  require_same_shape(eps_cond, eps_uncond, "classifier_free_noise");
  require(spec.scale >= 1.0, "classifier_free_noise: scale must be >= 1");
  if (spec.scale == 1.0)
    return eps_cond;
  Tensor out(eps_cond.shape());
  const double s = spec.scale;
  for (std::size_t i = 0; i < out.numel(); ++i)
    out[i] = eps_uncond[i] + s * (eps_cond[i] - eps_uncond[i]);
  return out;
}

Var classifier_free_noise(const Var &eps_cond, const Var &eps_uncond,
                          const GuidanceSpec &spec) {
  require_same_shape(eps_cond.value(), eps_uncond.value(),
                     "classifier_free_noise");
  require(spec.scale >= 1.0, "classifier_free_noise: scale must be >= 1");
  if (spec.scale == 1.0)
    return eps_cond;
  return ag::add(eps_uncond,
                 ag::scale(ag::sub(eps_cond, eps_uncond), spec.scale));
}

namespace {
void check_alpha_for_x0(double alpha_t) {
  if (!(alpha_t > 0.0))
    throw NumericError("predict_x0: singular schedule (alpha_t = 0)");
  require(alpha_t <= 1.0, "predict_x0: alpha_t > 1");
}
} // namespace

Tensor predict_x0(const Tensor &z_t, const Tensor &eps_hat, double alpha_t) {
  require_same_shape(z_t, eps_hat, "predict_x0");
  check_alpha_for_x0(alpha_t);
  const double sn = std::sqrt(1.0 - alpha_t), ss = std::sqrt(alpha_t);
  Tensor out(z_t.shape());
  for (std::size_t i = 0; i < out.numel(); ++i)
    out[i] = (z_t[i] - sn * eps_hat[i]) / ss;
  return out;
}

Var predict_x0(const Var &z_t, const Var &eps_hat, double alpha_t) {
  require_same_shape(z_t.value(), eps_hat.value(), "predict_x0");
  check_alpha_for_x0(alpha_t);
  const double sn = std::sqrt(1.0 - alpha_t), ss = std::sqrt(alpha_t);
  return ag::scale(ag::sub(z_t, ag::scale(eps_hat, sn)), 1.0 / ss);
}

Tensor predict_x0(const LatentBatch &z_t, const Tensor &eps_hat,
                  const NoiseSchedule &schedule) {
  require(z_t.timestep >= 1 && z_t.timestep <= schedule.num_steps(),
          "predict_x0: timestep " + std::to_string(z_t.timestep) +
              " outside [1," + std::to_string(schedule.num_steps()) + "]");
  return predict_x0(z_t.data, eps_hat, schedule.alpha_bar(z_t.timestep));
}

Tensor ancestral_step(const Tensor &x0_hat, double alpha_prev,
                      const Tensor &noise) {
  require_same_shape(x0_hat, noise, "ancestral_step");
  require(alpha_prev >= 0.0 && alpha_prev <= 1.0,
          "ancestral_step: alpha outside [0,1]");
  const double ss = std::sqrt(alpha_prev), sn = std::sqrt(1.0 - alpha_prev);
  Tensor out(x0_hat.shape());
  for (std::size_t i = 0; i < out.numel(); ++i)
    out[i] = ss * x0_hat[i] + sn * noise[i];
  return out;
}

Tensor ancestral_step(const Tensor &x0_hat, const NoiseSchedule &schedule,
                      int t, const Tensor &noise) {
  require(t >= 1 && t <= schedule.num_steps(),
          "ancestral_step: timestep " + std::to_string(t) + " outside [1," +
              std::to_string(schedule.num_steps()) + "]");
  return ancestral_step(x0_hat, schedule.alpha_bar(t - 1), noise);
}

Tensor forward_noise(const Tensor &z0, const Tensor &eps, double alpha_t) {
  require_same_shape(z0, eps, "forward_noise");
  const double ss = std::sqrt(alpha_t), sn = std::sqrt(1.0 - alpha_t);
  Tensor out(z0.shape());
  for (std::size_t i = 0; i < out.numel(); ++i)
    out[i] = ss * z0[i] + sn * eps[i];
  return out;
}

} // namespace dfkd
