// SPDX-License-Identifier: Apache-2.0
/**
 * @file   harness.hpp
 * @brief  Run configuration, stage orchestration and run provenance.
 *
 * A run directory holds the resolved config, checkpoints, the synthetic
 * dataset, line-oriented metric files and an append-only run log. Every
 * artifact carries the hash of the config sections it depends on, so a
 * stage refuses inputs produced under a different configuration.
 */
#ifndef DFKD_HARNESS_HPP_
#define DFKD_HARNESS_HPP_

#include "distill.hpp"
#include "synthesis.hpp"
#include "training.hpp"

#include <json.hpp>

#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

namespace dfkd {

inline constexpr int kConfigSchemaVersion = 1;

/// Library version tag ("0.1.0" or "0.1.0+<commit>").
const char *version_tag();

struct DatasetConfig {
  std::string name = "shapes";
  std::size_t image_size = 16;
  std::size_t num_classes = 2;
  std::size_t train_per_class = 150;
  std::size_t heldout_per_class = 100;
  /// Domain and size of the data the generator is pretrained on.
  std::string generator_domain = "mixed";
  std::size_t generator_per_class = 150;
};

struct DiffusionConfig {
  std::size_t width = 16;
  std::string schedule = "cosine";
  std::string codec = "identity";
  std::size_t latent_channels = 1; // autoencoder codec only
  bool fit_latent_scale = true;
  DenoiserTrainConfig train;
  TrainConfig codec_train;
};

enum class DistillMode { TwoStage, Alternating };
DistillMode parse_distill_mode(const std::string &s);
std::string to_string(DistillMode m);

struct AblationConfig {
  std::vector<Augmentation> arms{Augmentation::None, Augmentation::Traditional,
                                 Augmentation::MixUp, Augmentation::CutMix};
  std::vector<std::uint64_t> replicates{1, 2, 3};
};

struct RunConfig {
  int schema_version = kConfigSchemaVersion;
  /// Seeds the teacher and generator pretraining and, together with
  /// `replicate`, everything downstream of them.
  std::uint64_t seed = 0;
  /// Seeds synthesis, student init and distillation without retraining
  /// the teacher or the generator.
  std::uint64_t replicate = 0;
  /// Default run directory; not part of the hash.
  std::string output_dir = "runs/default";
  DatasetConfig dataset;
  ClassifierSpec teacher;
  TrainConfig teacher_train;
  ClassifierSpec student;
  DiffusionConfig diffusion;
  SynthesisConfig synthesis;
  KDConfig kd;
  DistillMode mode = DistillMode::TwoStage;
  /// Uniform-noise images for the noise-input baseline student.
  std::size_t noise_baseline_count = 1024;
  AblationConfig ablation;

  /// Desk defaults with derived fields filled in.
  static RunConfig defaults();
  /// Parses a (possibly partial) config over the defaults. Unknown keys
  /// and wrong types are ConfigErrors.
  static RunConfig from_json(const nlohmann::json &j);
  static RunConfig load(const std::filesystem::path &path);
  nlohmann::json to_json() const;
  /// Checks ranges and cross-section consistency; fills derived fields
  /// (class counts, image sizes, per-stage seeds).
  void finalize();
  void validate() const;

  /// FNV-1a of the canonical JSON dump, hex.
  std::string hash() const;
};

enum class Stage {
  TrainTeacher,
  TrainDiffusion,
  Generate,
  Distill,
  Evaluate,
  AblateLca,
  Visualize
};
std::string to_string(Stage s);
Stage parse_stage(const std::string &s);

/// Hash of the config sections a stage's outputs depend on.
std::string stage_hash(const RunConfig &cfg, Stage s);

/// Per-stage seeds derived from the global seed and the replicate.
struct StageSeeds {
  std::uint64_t train_data, heldout_data, teacher;
  std::uint64_t generator_data, denoiser, codec;
  std::uint64_t student_init, synthesis, kd, noise;
};
StageSeeds stage_seeds(const RunConfig &cfg);

/// Input the student is distilled on.
enum class DistillSource { Synthetic, Noise };
DistillSource parse_distill_source(const std::string &s);

enum class EvalModel { Teacher, Student, NoiseStudent };
EvalModel parse_eval_model(const std::string &s);
enum class EvalSplit { Train, Heldout };
EvalSplit parse_eval_split(const std::string &s);

struct StageOutcome {
  Stage stage = Stage::TrainTeacher;
  nlohmann::json summary = nlohmann::json::object();
};

/// Locations of shared model artifacts; defaults to the run directory.
struct ModelPaths {
  std::filesystem::path teacher;
  std::filesystem::path denoiser;
  std::filesystem::path codec;
};

using LogSink = std::function<void(const std::string &)>;

/// Stage driver over one run directory.
class Pipeline {
public:
  Pipeline(RunConfig cfg, std::filesystem::path out_dir);

  const RunConfig &config() const { return cfg_; }
  const std::filesystem::path &out_dir() const { return out_; }
  void set_log(LogSink sink) { log_ = std::move(sink); }
  /// Read teacher/generator checkpoints from elsewhere (ablation arms).
  void set_model_paths(ModelPaths p) { models_ = std::move(p); }
  const ModelPaths &model_paths() const { return models_; }

  StageOutcome train_teacher();
  StageOutcome train_diffusion();
  StageOutcome generate();
  StageOutcome distill(DistillSource source = DistillSource::Synthetic);
  StageOutcome evaluate(EvalModel model = EvalModel::Student,
                        EvalSplit split = EvalSplit::Heldout);
  StageOutcome ablate_lca();
  StageOutcome visualize(std::size_t per_class = 8);
  /// train-teacher, train-diffusion, generate (two-stage), distill,
  /// evaluate.
  std::vector<StageOutcome> run_all();

  /// Real data splits regenerated from the config.
  LabeledImages train_split() const;
  LabeledImages heldout_split() const;

  std::filesystem::path synthetic_dir() const { return out_ / "synthetic"; }
  std::filesystem::path metrics_dir() const { return out_ / "metrics"; }
  std::filesystem::path run_log_path() const { return out_ / "run.jsonl"; }

private:
  StageOutcome run_stage(Stage s, const std::function<StageOutcome()> &body);
  void log(const std::string &msg) const;
  void ensure_dirs() const;
  std::unique_ptr<Classifier> load_teacher() const;
  std::unique_ptr<Classifier> fresh_student() const;
  std::pair<std::unique_ptr<Denoiser>, std::unique_ptr<Codec>>
  load_generator() const;
  StageOutcome alternating(nlohmann::json &artifacts);

  RunConfig cfg_;
  std::filesystem::path out_;
  ModelPaths models_;
  LogSink log_;
  nlohmann::json pending_artifacts_ = nlohmann::json::object();
  std::vector<std::string> pending_metrics_;
};

/// Resolves the output directory: an absolute path is kept; a relative
/// one is placed under $DFKD_OUTPUT_ROOT when set.
std::filesystem::path resolve_output_dir(const std::string &dir);

/// Reads every record of a run log.
std::vector<nlohmann::json> read_run_log(const std::filesystem::path &path);

} // namespace dfkd

#endif // DFKD_HARNESS_HPP_
