// SPDX-License-Identifier: Apache-2.0
/**
 * @file   training.hpp
 * @brief  Supervised training of the teacher, the noise predictor and the
 *         optional autoencoder codec, plus classifier evaluation.
 */
#ifndef DFKD_TRAINING_HPP_
#define DFKD_TRAINING_HPP_

#include "dataset.hpp"
#include "diffusion.hpp"
#include "nets.hpp"

#include <memory>
#include <stdexcept>
#include <vector>

namespace dfkd {

/// A training run that diverged or missed its accuracy floor.
class TrainingError : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

struct TrainConfig {
  std::size_t epochs = 20;
  std::size_t batch_size = 64;
  double lr = 2e-3;
  std::uint64_t seed = 0;
  /// Required held-out (or training) accuracy; 0 disables the check.
  double accuracy_floor = 0.0;
  /// Epochs with the smoothed loss above 1.5x its best before declaring
  /// divergence.
  std::size_t patience = 8;
  /// Weight of the auxiliary stage-projection cross-entropy.
  double aux_weight = 0.3;
};

struct EpochMetric {
  std::size_t epoch = 0;
  double loss = 0.0;
  double train_accuracy = -1.0;
  double eval_accuracy = -1.0;
};

struct TrainReport {
  std::vector<EpochMetric> curve;
  double final_accuracy = 0.0; // held-out if given, else training set
};

std::vector<std::size_t> shuffled_indices(std::size_t n, Rng &rng);

std::unique_ptr<Classifier> train_classifier(const LabeledImages &train,
                                             const LabeledImages *heldout,
                                             const ClassifierSpec &spec,
                                             const TrainConfig &cfg,
                                             TrainReport *report = nullptr);

struct DenoiserTrainConfig {
  std::size_t epochs = 60;
  std::size_t batch_size = 64;
  double lr = 2e-3;
  std::uint64_t seed = 0;
  /// Probability of replacing the class condition by the null condition.
  double cond_dropout = 0.15;
  std::size_t patience = 25;
};

/// Trains the noise predictor on `latents` with the standard epsilon
/// objective over timesteps 1..T of `schedule`.
std::unique_ptr<Denoiser> train_denoiser(const Tensor &latents,
                                         const std::vector<int> &labels,
                                         const DenoiserSpec &spec,
                                         const NoiseSchedule &schedule,
                                         const DenoiserTrainConfig &cfg,
                                         TrainReport *report = nullptr);

/// Reconstruction training of a trainable codec (no-op for identity).
void train_codec(Codec &codec, const Tensor &images, const TrainConfig &cfg,
                 TrainReport *report = nullptr);

/// Sets the codec's latent scale to 1 / std of the unscaled latents,
/// rounded to the nearest power of two.
double fit_latent_scale(Codec &codec, const Tensor &images);

/// Encodes images to latents in inference mode.
Tensor encode_images(const Codec &codec, const Tensor &images);
Tensor decode_latents(const Codec &codec, const Tensor &latents);

struct EvalResult {
  double accuracy = 0.0;
  std::vector<double> per_class_recall;
  std::vector<std::vector<std::size_t>> confusion; // [true][pred]
  std::size_t count = 0;
};

/// Top-1 accuracy, per-class recall and confusion counts.
EvalResult evaluate(const Classifier &net, const LabeledImages &data);

/// Logits of `net` over `images` in inference mode, chunked.
Tensor predict_logits(const Classifier &net, const Tensor &images);

} // namespace dfkd

#endif // DFKD_TRAINING_HPP_
