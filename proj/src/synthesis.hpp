// SPDX-License-Identifier: Apache-2.0
/**
 * @file   synthesis.hpp
 * @brief  Teacher-guided generation: gradient edits of the noisy latent,
 *         latent augmentation every k steps and harvesting of intermediate
 *         clean-latent predictions into a synthetic dataset.
 */
#ifndef DFKD_SYNTHESIS_HPP_
#define DFKD_SYNTHESIS_HPP_

#include "dataset.hpp"
#include "diffusion.hpp"
#include "losses.hpp"
#include "nets.hpp"
#include "rng.hpp"

#include <filesystem>
#include <functional>
#include <string>
#include <vector>

namespace dfkd {

enum class Augmentation { None, Traditional, MixUp, CutMix };

Augmentation parse_augmentation(const std::string &s);
std::string to_string(Augmentation a);

struct SynthesisConfig {
  int total_steps = 10;  // T
  int lca_period = 0;    // k; 0 selects default_lca_period(T)
  int rounds = 1;        // N
  std::size_t batch_size = 16;
  GuidanceSpec guidance;
  InversionWeights weights;
  int edit_steps_per_t = 1;
  double lca_area_max = 0.5;
  /// Harvest every k-th intermediate; when false only t = 0 is kept.
  bool harvest_intermediates = true;
  Augmentation augmentation = Augmentation::CutMix;
  /// Pair augmentation partners across classes (ablation only).
  bool cross_class_pairs = false;
  /// Treat the predicted noise as a constant inside the edit gradient.
  bool stop_gradient_eps = false;
  /// Reuse the predicted noise instead of fresh noise in the ancestral step.
  bool deterministic_noise = false;
  /// Per-item L2 clip on the latent gradient; <= 0 disables.
  double grad_clip = 1.0;
  /// Clamp of clean-latent predictions to [-x0_clip, x0_clip]; 0 = off.
  double x0_clip = 0.0;
  /// Linear ramp of gamma over the first R rounds (1 = no ramp).
  int gamma_ramp_rounds = 1;
  std::vector<std::size_t> bn_layers; // empty = all
  std::uint64_t seed = 0;

  int period() const;
  void validate() const;
};

/// ceil(T/4): yields four harvested intermediates for T = 10.
int default_lca_period(int total_steps);
/// Multiples of k in [0, T), descending; equals {T-k, T-2k, ..., 0} when
/// k divides T.
std::vector<int> harvest_timesteps(int total_steps, int period);
/// Timesteps at which latent augmentation runs: harvest steps with t >= 1.
std::vector<int> augmentation_timesteps(int total_steps, int period);
/// gamma scaled for round `round_index` (0-based) by the linear ramp.
double ramped_gamma(double gamma, int round_index, int ramp_rounds);

/// Everything the editing step differentiates through.
struct GuidedModels {
  const Classifier &teacher;
  const Classifier *student = nullptr;
  const Denoiser &denoiser;
  const Codec &codec;
  const NoiseSchedule &schedule;
};

/// Guided noise prediction (cond/null batched); differentiable w.r.t. z.
Var guided_noise(const Denoiser &denoiser, const Var &z, int t,
                 const std::vector<int> &conditions, const GuidanceSpec &g);

struct EditOptions {
  int steps = 1;
  double grad_clip = 1.0;
  bool stop_gradient_eps = false;
  /// Clean-latent predictions are clamped to [-x0_clip, x0_clip]; 0 = off.
  double x0_clip = 0.0;
  std::vector<std::size_t> bn_layers;
};

/// Clean-latent prediction from guided noise, clamped per `opts.x0_clip`.
Var guided_x0(const Var &z, const LatentBatch &batch, const GuidedModels &m,
              const GuidanceSpec &g, const EditOptions &opts);

/// L_inv(decode(predict_x0(z_t))) as a differentiable function of z_t.
InversionResult latent_inversion_loss(const Var &z, const LatentBatch &batch,
                                      const GuidedModels &m,
                                      const InversionWeights &w,
                                      const GuidanceSpec &g,
                                      const EditOptions &opts);

/// z_t - eta * grad_{z_t} L_inv, repeated `opts.steps` times. Per-step loss
/// breakdowns (before each update) are appended to `log` when given.
LatentBatch edit_latent(const LatentBatch &z, const GuidedModels &m,
                        const InversionWeights &w, const GuidanceSpec &g,
                        const EditOptions &opts,
                        std::vector<InversionBreakdown> *log = nullptr);

struct MixRecord {
  std::size_t target = 0;
  std::size_t partner = 0;
  std::size_t h0 = 0, h1 = 0, w0 = 0, w1 = 0; // box rows [h0,h1), cols [w0,w1)
  double lambda = 0.0;                        // sampled area fraction
};

struct MixMetadata {
  std::vector<MixRecord> mixes;
  /// Set when the batch was too small to mix (returned unchanged).
  bool identity_warning = false;
};

/// Every item with an eligible partner receives a box of relative area
/// lambda ~ U(0, area_max) copied from that partner (sources are pre-mix).
std::pair<LatentBatch, MixMetadata> latent_cutmix(const LatentBatch &batch,
                                                  Rng &rng, double area_max,
                                                  bool within_class = true);

/// Copies one box from partner to target with an explicit lambda; the box
/// position is sampled uniformly. Used by tests to pin lambda.
MixRecord cutmix_box(std::size_t height, std::size_t width, double lambda,
                     Rng &rng);
void apply_box(Tensor &data, const Tensor &source, const MixRecord &mix);

/// Ablation arms: flip + shift, MixUp with Beta(1,1) or CutMix.
std::vector<bool> augment_latents(LatentBatch &batch, Augmentation kind,
                                  Rng &rng, double area_max, bool within_class,
                                  MixMetadata *meta = nullptr);

struct SyntheticRecord {
  Tensor image; // decoded, [C,H,W]
  int label = 0;
  int harvest_t = 0;
  int round = 0;
  double teacher_confidence = 0.0;
  std::uint64_t seed = 0;
  bool lca_applied = false;
};

struct LossRecord {
  int round = 0;
  int timestep = 0;
  InversionBreakdown terms;
};

struct RoundResult {
  std::vector<SyntheticRecord> records;
  std::vector<LossRecord> losses;
  std::vector<int> augmentation_calls; // timesteps, in call order
  std::uint64_t student_checksum = 0;
};

/// One pass of guided denoising from pure noise; see README for the loop.
RoundResult generate_round(int round_index, const GuidedModels &m,
                           const SynthesisConfig &cfg);

struct BuildOptions {
  std::filesystem::path out_dir;
  std::string config_hash;
  /// Invoked after each round (e.g. to distill between rounds).
  std::function<void(int, const RoundResult &)> after_round;
  /// Student to use for round i (defaults to m.student).
  std::function<const Classifier *(int)> student_for_round;
};

struct BuildResult {
  Manifest manifest;
  std::vector<LossRecord> losses;
};

/// Generates `cfg.rounds` rounds and writes images plus manifest.
BuildResult build_dataset(const GuidedModels &m, const SynthesisConfig &cfg,
                          const BuildOptions &opts);

/// Writes records of one round to disk and appends them to `manifest`.
void write_round(const std::filesystem::path &dir, const RoundResult &round,
                 Manifest &manifest);

} // namespace dfkd

#endif // DFKD_SYNTHESIS_HPP_
