// SPDX-License-Identifier: Apache-2.0
#include "harness.hpp"

#include "checkpoint.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#ifndef DFKD_VERSION_TAG
#define DFKD_VERSION_TAG "0.1.0"
#endif

namespace dfkd {

namespace fs = std::filesystem;
using nlohmann::json;

const char *version_tag() { return DFKD_VERSION_TAG; }

// ------------------------------------------------------------- enum names

DistillMode parse_distill_mode(const std::string &s) {
  if (s == "two_stage")
    return DistillMode::TwoStage;
  if (s == "alternating")
    return DistillMode::Alternating;
  throw ConfigError("unknown distillation mode '" + s +
                    "' (expected two_stage or alternating)");
}

std::string to_string(DistillMode m) {
  return m == DistillMode::TwoStage ? "two_stage" : "alternating";
}

namespace {

constexpr std::pair<Stage, const char *> kStageNames[] = {
    {Stage::TrainTeacher, "train-teacher"}, {Stage::TrainDiffusion, "train-diffusion"},
    {Stage::Generate, "generate"},          {Stage::Distill, "distill"},
    {Stage::Evaluate, "evaluate"},          {Stage::AblateLca, "ablate-lca"},
    {Stage::Visualize, "visualize"}};

} // namespace

std::string to_string(Stage s) {
  for (const auto &[st, name] : kStageNames)
    if (st == s)
      return name;
  return "unknown";
}

Stage parse_stage(const std::string &s) {
  for (const auto &[st, name] : kStageNames)
    if (s == name)
      return st;
  throw ConfigError("unknown stage '" + s + "'");
}

DistillSource parse_distill_source(const std::string &s) {
  if (s == "synthetic")
    return DistillSource::Synthetic;
  if (s == "noise")
    return DistillSource::Noise;
  throw ConfigError("unknown distillation source '" + s +
                    "' (expected synthetic or noise)");
}

EvalModel parse_eval_model(const std::string &s) {
  if (s == "teacher")
    return EvalModel::Teacher;
  if (s == "student")
    return EvalModel::Student;
  if (s == "noise-student")
    return EvalModel::NoiseStudent;
  throw ConfigError("unknown model '" + s +
                    "' (expected teacher, student or noise-student)");
}

EvalSplit parse_eval_split(const std::string &s) {
  if (s == "train")
    return EvalSplit::Train;
  if (s == "heldout")
    return EvalSplit::Heldout;
  throw ConfigError("unknown split '" + s + "' (expected train or heldout)");
}

// ------------------------------------------------------------ JSON reader

namespace {

// Parsed JSON stores non-negative literals as unsigned, but values built in
// code (j["seed"] = 6) are signed.
bool non_negative_int(const json &v) {
  return v.is_number_unsigned() || (v.is_number_integer() && v.get<std::int64_t>() >= 0);
}

/// Strict typed access to one config object; unread keys are errors.
class Section {
public:
  Section(const json &j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object())
      throw ConfigError(where() + "expected an object");
  }

  void size(const char *key, std::size_t &out) {
    if (const json *v = find(key)) {
      if (!non_negative_int(*v))
        fail(key, "a non-negative integer");
      out = v->get<std::size_t>();
    }
  }
  void u64(const char *key, std::uint64_t &out) {
    if (const json *v = find(key)) {
      if (!non_negative_int(*v))
        fail(key, "a non-negative integer");
      out = v->get<std::uint64_t>();
    }
  }
  void integer(const char *key, int &out) {
    if (const json *v = find(key)) {
      if (!v->is_number_integer())
        fail(key, "an integer");
      const auto x = v->get<long long>();
      if (x < -(1LL << 30) || x > (1LL << 30))
        fail(key, "an integer of moderate size");
      out = static_cast<int>(x);
    }
  }
  void real(const char *key, double &out) {
    if (const json *v = find(key)) {
      if (!v->is_number())
        fail(key, "a number");
      out = v->get<double>();
    }
  }
  void boolean(const char *key, bool &out) {
    if (const json *v = find(key)) {
      if (!v->is_boolean())
        fail(key, "true or false");
      out = v->get<bool>();
    }
  }
  void string(const char *key, std::string &out) {
    if (const json *v = find(key)) {
      if (!v->is_string())
        fail(key, "a string");
      out = v->get<std::string>();
    }
  }
  void sizes(const char *key, std::vector<std::size_t> &out) {
    if (const json *v = find(key)) {
      if (!v->is_array())
        fail(key, "an array of non-negative integers");
      out.clear();
      for (const auto &e : *v) {
        if (!non_negative_int(e))
          fail(key, "an array of non-negative integers");
        out.push_back(e.get<std::size_t>());
      }
    }
  }
  const json *array(const char *key) {
    const json *v = find(key);
    if (v && !v->is_array())
      fail(key, "an array");
    return v;
  }
  std::optional<Section> sub(const char *key) {
    if (const json *v = find(key))
      return Section(*v, path_.empty() ? key : path_ + "." + key);
    return std::nullopt;
  }
  [[noreturn]] void fail(const char *key, const std::string &expected) const {
    throw ConfigError("config key '" + qualified(key) + "' must be " + expected);
  }
  void finish() const {
    for (const auto &[k, v] : j_.items())
      if (!used_.count(k))
        throw ConfigError("unknown config key '" + qualified(k.c_str()) + "'");
  }

private:
  const json *find(const char *key) {
    used_.insert(key);
    const auto it = j_.find(key);
    return it == j_.end() ? nullptr : &*it;
  }
  std::string qualified(const char *key) const {
    return path_.empty() ? key : path_ + "." + key;
  }
  std::string where() const {
    return path_.empty() ? "config: " : "config section '" + path_ + "': ";
  }

  const json &j_;
  std::string path_;
  std::set<std::string> used_;
};

void read_widths(Section &s, std::array<std::size_t, 3> &widths) {
  std::vector<std::size_t> w(widths.begin(), widths.end());
  s.sizes("widths", w);
  if (w.size() != 3)
    s.fail("widths", "an array of three stage widths");
  std::copy(w.begin(), w.end(), widths.begin());
}

json widths_json(const std::array<std::size_t, 3> &w) {
  return json::array({w[0], w[1], w[2]});
}

} // namespace

// -------------------------------------------------------------- RunConfig

RunConfig RunConfig::defaults() {
  RunConfig c;
  c.teacher.name = "teacher";
  c.teacher.stem_width = 16;
  c.teacher.widths = {16, 32, 64};
  c.teacher_train.epochs = 8;
  c.teacher_train.batch_size = 64;
  c.teacher_train.lr = 2e-3;
  c.teacher_train.accuracy_floor = 0.9;
  c.student.name = "student";
  c.student.stem_width = 8;
  c.student.widths = {8, 16, 32};
  c.diffusion.train.epochs = 40;
  c.diffusion.codec_train.epochs = 20;
  c.synthesis.total_steps = 10;
  c.synthesis.rounds = 4;
  c.synthesis.batch_size = 64;
  c.synthesis.guidance.scale = 3.0;
  c.synthesis.edit_steps_per_t = 2;
  c.synthesis.x0_clip = 6.0;
  c.synthesis.weights = {1.0, 1.0, 1.0, 4.0, 8.0};
  c.kd.epochs = 15;
  c.finalize();
  return c;
}

RunConfig RunConfig::from_json(const json &j) {
  RunConfig c = defaults();
  Section root(j, "");
  root.integer("schema_version", c.schema_version);
  if (c.schema_version != kConfigSchemaVersion)
    throw ConfigError("config schema_version " + std::to_string(c.schema_version) +
                      " is not supported (expected " +
                      std::to_string(kConfigSchemaVersion) + ")");
  root.u64("seed", c.seed);
  root.u64("replicate", c.replicate);
  root.string("output_dir", c.output_dir);

  if (auto s = root.sub("dataset")) {
    auto &d = c.dataset;
    s->string("name", d.name);
    s->size("image_size", d.image_size);
    s->size("num_classes", d.num_classes);
    s->size("train_per_class", d.train_per_class);
    s->size("heldout_per_class", d.heldout_per_class);
    s->string("generator_domain", d.generator_domain);
    s->size("generator_per_class", d.generator_per_class);
    s->finish();
  }
  if (auto s = root.sub("teacher")) {
    s->size("stem_width", c.teacher.stem_width);
    read_widths(*s, c.teacher.widths);
    s->size("epochs", c.teacher_train.epochs);
    s->size("batch_size", c.teacher_train.batch_size);
    s->real("lr", c.teacher_train.lr);
    s->real("accuracy_floor", c.teacher_train.accuracy_floor);
    s->size("patience", c.teacher_train.patience);
    s->real("aux_weight", c.teacher_train.aux_weight);
    s->finish();
  }
  if (auto s = root.sub("student")) {
    s->size("stem_width", c.student.stem_width);
    read_widths(*s, c.student.widths);
    s->finish();
  }
  if (auto s = root.sub("diffusion")) {
    auto &d = c.diffusion;
    s->size("width", d.width);
    s->string("schedule", d.schedule);
    s->string("codec", d.codec);
    s->size("latent_channels", d.latent_channels);
    s->boolean("fit_latent_scale", d.fit_latent_scale);
    s->size("epochs", d.train.epochs);
    s->size("batch_size", d.train.batch_size);
    s->real("lr", d.train.lr);
    s->real("cond_dropout", d.train.cond_dropout);
    s->size("patience", d.train.patience);
    s->size("codec_epochs", d.codec_train.epochs);
    s->finish();
  }
  if (auto s = root.sub("synthesis")) {
    auto &y = c.synthesis;
    s->integer("total_steps", y.total_steps);
    s->integer("lca_period", y.lca_period);
    s->integer("rounds", y.rounds);
    s->size("batch_size", y.batch_size);
    s->real("guidance_scale", y.guidance.scale);
    s->integer("edit_steps_per_t", y.edit_steps_per_t);
    s->real("lca_area_max", y.lca_area_max);
    std::string aug = to_string(y.augmentation);
    s->string("augmentation", aug);
    y.augmentation = parse_augmentation(aug);
    s->boolean("harvest_intermediates", y.harvest_intermediates);
    s->boolean("cross_class_pairs", y.cross_class_pairs);
    s->boolean("stop_gradient_eps", y.stop_gradient_eps);
    s->boolean("deterministic_noise", y.deterministic_noise);
    s->real("grad_clip", y.grad_clip);
    s->real("x0_clip", y.x0_clip);
    s->integer("gamma_ramp_rounds", y.gamma_ramp_rounds);
    s->sizes("bn_layers", y.bn_layers);
    s->finish();
  }
  if (auto s = root.sub("inversion")) {
    auto &w = c.synthesis.weights;
    s->real("alpha", w.alpha);
    s->real("beta", w.beta);
    s->real("gamma", w.gamma);
    s->real("tau", w.tau);
    s->real("eta", w.eta);
    s->finish();
  }
  if (auto s = root.sub("distillation")) {
    auto &k = c.kd;
    std::string mode = to_string(c.mode);
    s->string("mode", mode);
    c.mode = parse_distill_mode(mode);
    s->real("weight_kl", k.weight_kl);
    s->real("weight_cam", k.weight_cam);
    s->real("temperature", k.temperature);
    if (const json *pairs = s->array("layer_pairs")) {
      k.layer_pairs.clear();
      for (const auto &p : *pairs) {
        if (!p.is_array() || p.size() != 2 || !p[0].is_number_unsigned() ||
            !p[1].is_number_unsigned())
          s->fail("layer_pairs", "an array of [student_tap, teacher_tap] pairs");
        k.layer_pairs.push_back({p[0].get<std::size_t>(), p[1].get<std::size_t>()});
      }
    }
    s->size("epochs", k.epochs);
    s->size("batch_size", k.batch_size);
    s->real("lr", k.lr);
    s->size("noise_baseline_count", c.noise_baseline_count);
    s->finish();
  }
  if (auto s = root.sub("ablation")) {
    if (const json *arms = s->array("arms")) {
      c.ablation.arms.clear();
      for (const auto &a : *arms) {
        if (!a.is_string())
          s->fail("arms", "an array of augmentation names");
        c.ablation.arms.push_back(parse_augmentation(a.get<std::string>()));
      }
    }
    std::vector<std::size_t> reps(c.ablation.replicates.begin(),
                                  c.ablation.replicates.end());
    s->sizes("replicates", reps);
    c.ablation.replicates.assign(reps.begin(), reps.end());
    s->finish();
  }
  root.finish();
  c.finalize();
  return c;
}

RunConfig RunConfig::load(const fs::path &path) {
  std::ifstream f(path);
  if (!f)
    throw IoError("cannot open config " + path.string());
  json j;
  try {
    j = json::parse(f, nullptr, true, /*ignore_comments=*/true);
  } catch (const json::parse_error &e) {
    throw ConfigError("config " + path.string() + " is not valid JSON: " + e.what());
  }
  return from_json(j);
}

json RunConfig::to_json() const {
  const auto &d = dataset;
  const auto &y = synthesis;
  const auto &w = synthesis.weights;
  json pairs = json::array();
  for (const auto &p : kd.layer_pairs)
    pairs.push_back({p.student_tap, p.teacher_tap});
  json arms = json::array();
  for (auto a : ablation.arms)
    arms.push_back(dfkd::to_string(a));
  return {
      {"schema_version", schema_version},
      {"seed", seed},
      {"replicate", replicate},
      {"output_dir", output_dir},
      {"dataset",
       {{"name", d.name},
        {"image_size", d.image_size},
        {"num_classes", d.num_classes},
        {"train_per_class", d.train_per_class},
        {"heldout_per_class", d.heldout_per_class},
        {"generator_domain", d.generator_domain},
        {"generator_per_class", d.generator_per_class}}},
      {"teacher",
       {{"stem_width", teacher.stem_width},
        {"widths", widths_json(teacher.widths)},
        {"epochs", teacher_train.epochs},
        {"batch_size", teacher_train.batch_size},
        {"lr", teacher_train.lr},
        {"accuracy_floor", teacher_train.accuracy_floor},
        {"patience", teacher_train.patience},
        {"aux_weight", teacher_train.aux_weight}}},
      {"student",
       {{"stem_width", student.stem_width}, {"widths", widths_json(student.widths)}}},
      {"diffusion",
       {{"width", diffusion.width},
        {"schedule", diffusion.schedule},
        {"codec", diffusion.codec},
        {"latent_channels", diffusion.latent_channels},
        {"fit_latent_scale", diffusion.fit_latent_scale},
        {"epochs", diffusion.train.epochs},
        {"batch_size", diffusion.train.batch_size},
        {"lr", diffusion.train.lr},
        {"cond_dropout", diffusion.train.cond_dropout},
        {"patience", diffusion.train.patience},
        {"codec_epochs", diffusion.codec_train.epochs}}},
      {"synthesis",
       {{"total_steps", y.total_steps},
        {"lca_period", y.lca_period},
        {"rounds", y.rounds},
        {"batch_size", y.batch_size},
        {"guidance_scale", y.guidance.scale},
        {"edit_steps_per_t", y.edit_steps_per_t},
        {"lca_area_max", y.lca_area_max},
        {"augmentation", dfkd::to_string(y.augmentation)},
        {"harvest_intermediates", y.harvest_intermediates},
        {"cross_class_pairs", y.cross_class_pairs},
        {"stop_gradient_eps", y.stop_gradient_eps},
        {"deterministic_noise", y.deterministic_noise},
        {"grad_clip", y.grad_clip},
        {"x0_clip", y.x0_clip},
        {"gamma_ramp_rounds", y.gamma_ramp_rounds},
        {"bn_layers", y.bn_layers}}},
      {"inversion",
       {{"alpha", w.alpha},
        {"beta", w.beta},
        {"gamma", w.gamma},
        {"tau", w.tau},
        {"eta", w.eta}}},
      {"distillation",
       {{"mode", dfkd::to_string(mode)},
        {"weight_kl", kd.weight_kl},
        {"weight_cam", kd.weight_cam},
        {"temperature", kd.temperature},
        {"layer_pairs", pairs},
        {"epochs", kd.epochs},
        {"batch_size", kd.batch_size},
        {"lr", kd.lr},
        {"noise_baseline_count", noise_baseline_count}}},
      {"ablation", {{"arms", arms}, {"replicates", ablation.replicates}}}};
}

void RunConfig::finalize() {
  teacher.num_classes = student.num_classes = dataset.num_classes;
  teacher.image_size = student.image_size = dataset.image_size;
  teacher.in_channels = student.in_channels = 1;
  const StageSeeds s = stage_seeds(*this);
  teacher_train.seed = s.teacher;
  diffusion.train.seed = s.denoiser;
  diffusion.codec_train.seed = s.codec;
  synthesis.seed = s.synthesis;
  kd.seed = s.kd;
  validate();
}

void RunConfig::validate() const {
  if (schema_version != kConfigSchemaVersion)
    throw ConfigError("unsupported config schema_version " +
                      std::to_string(schema_version));
  const auto &d = dataset;
  if (d.name != "shapes")
    throw ConfigError("dataset.name '" + d.name + "' is not available (only 'shapes')");
  if (d.num_classes < 2 || d.num_classes > kMaxShapeClasses)
    throw ConfigError("dataset.num_classes must lie in [2, " +
                      std::to_string(kMaxShapeClasses) + "]");
  if (d.image_size < 8 || d.image_size > 64)
    throw ConfigError("dataset.image_size must lie in [8, 64]");
  if (d.train_per_class == 0 || d.heldout_per_class == 0 || d.generator_per_class == 0)
    throw ConfigError("dataset: per-class counts must be positive");
  if (d.generator_domain != "photo" && d.generator_domain != "sketch" &&
      d.generator_domain != "mixed")
    throw ConfigError("dataset.generator_domain must be photo, sketch or mixed");
  for (const auto *spec : {&teacher, &student})
    for (auto w : spec->widths)
      if (w == 0 || spec->stem_width == 0)
        throw ConfigError("network widths must be positive");
  if (teacher_train.epochs == 0 || teacher_train.batch_size < 2 ||
      !(teacher_train.lr > 0) || teacher_train.accuracy_floor < 0 ||
      teacher_train.accuracy_floor > 1)
    throw ConfigError("teacher: need epochs >= 1, batch_size >= 2, lr > 0 and "
                      "accuracy_floor in [0, 1]");
  const auto &f = diffusion;
  if (f.width == 0 || f.train.epochs == 0 || f.train.batch_size < 2 ||
      !(f.train.lr > 0) || f.train.cond_dropout < 0 || f.train.cond_dropout >= 1)
    throw ConfigError("diffusion: need width > 0, epochs >= 1, batch_size >= 2, "
                      "lr > 0 and cond_dropout in [0, 1)");
  parse_schedule_kind(f.schedule);
  if (f.codec != "identity" && f.codec != "autoencoder")
    throw ConfigError("diffusion.codec must be identity or autoencoder");
  if (f.codec == "autoencoder" && (f.latent_channels == 0 || d.image_size % 2))
    throw ConfigError("autoencoder codec needs latent_channels > 0 and an even "
                      "image size");
  synthesis.validate();
  kd.validate();
  if (kd.epochs == 0)
    throw ConfigError("distillation.epochs must be >= 1");
  if (noise_baseline_count < 2)
    throw ConfigError("distillation.noise_baseline_count must be >= 2");
  if (ablation.arms.empty() || ablation.replicates.empty())
    throw ConfigError("ablation: arms and replicates must be non-empty");
}

std::string RunConfig::hash() const {
  json j = to_json();
  j.erase("output_dir");
  const std::string s = j.dump();
  return hex64(fnv1a(s.data(), s.size()));
}

// ----------------------------------------------------------------- hashes

StageSeeds stage_seeds(const RunConfig &cfg) {
  const std::uint64_t g = cfg.seed;
  const std::uint64_t r = derive_seed(g, 0x1000 + cfg.replicate);
  return {derive_seed(g, 1), derive_seed(g, 2), derive_seed(g, 3),
          derive_seed(g, 4), derive_seed(g, 5), derive_seed(g, 6),
          derive_seed(r, 7), derive_seed(r, 8), derive_seed(r, 9),
          derive_seed(r, 10)};
}

namespace {

std::string hash_json(const json &j) {
  const std::string s = j.dump();
  return hex64(fnv1a(s.data(), s.size()));
}

} // namespace

std::string stage_hash(const RunConfig &cfg, Stage s) {
  const json all = cfg.to_json();
  const json &d = all["dataset"];
  switch (s) {
  case Stage::TrainTeacher:
    return hash_json({{"stage", "teacher"},
                      {"schema", cfg.schema_version},
                      {"seed", cfg.seed},
                      {"dataset",
                       {d["name"], d["image_size"], d["num_classes"],
                        d["train_per_class"], d["heldout_per_class"]}},
                      {"teacher", all["teacher"]}});
  case Stage::TrainDiffusion:
    return hash_json({{"stage", "diffusion"},
                      {"schema", cfg.schema_version},
                      {"seed", cfg.seed},
                      {"dataset",
                       {d["name"], d["image_size"], d["num_classes"],
                        d["generator_domain"], d["generator_per_class"]}},
                      {"diffusion", all["diffusion"]},
                      {"steps", cfg.synthesis.total_steps}});
  case Stage::Generate: {
    json j = {{"stage", "generate"},
              {"teacher", stage_hash(cfg, Stage::TrainTeacher)},
              {"diffusion", stage_hash(cfg, Stage::TrainDiffusion)},
              {"replicate", cfg.replicate},
              {"student", all["student"]},
              {"synthesis", all["synthesis"]},
              {"inversion", all["inversion"]},
              {"mode", dfkd::to_string(cfg.mode)}};
    // In alternating mode the student that steers generation is trained.
    if (cfg.mode == DistillMode::Alternating)
      j["distillation"] = all["distillation"];
    return hash_json(j);
  }
  case Stage::Distill:
    return hash_json({{"stage", "distill"},
                      {"generate", stage_hash(cfg, Stage::Generate)},
                      {"distillation", all["distillation"]}});
  default:
    return cfg.hash();
  }
}

// ------------------------------------------------------------------ paths

fs::path resolve_output_dir(const std::string &dir) {
  const fs::path p(dir);
  if (p.is_absolute())
    return p;
  if (const char *root = std::getenv("DFKD_OUTPUT_ROOT"); root && *root)
    return fs::path(root) / p;
  return p;
}

std::vector<json> read_run_log(const fs::path &path) {
  std::ifstream f(path);
  if (!f)
    throw IoError("no run log at " + path.string());
  std::vector<json> out;
  std::string line;
  while (std::getline(f, line)) {
    if (line.empty())
      continue;
    try {
      out.push_back(json::parse(line));
    } catch (const json::parse_error &e) {
      throw IoError("malformed run log line in " + path.string() + ": " + e.what());
    }
  }
  return out;
}

// ------------------------------------------------------------ file output

namespace {

void write_text_atomic(const fs::path &path, const std::string &text) {
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f)
      throw IoError("cannot write " + tmp.string());
    f << text;
    if (!f.flush())
      throw IoError("write failed for " + tmp.string());
  }
  std::error_code ec;
  fs::rename(tmp, path, ec);
  if (ec)
    throw IoError("cannot move " + tmp.string() + " into place: " + ec.message());
}

void append_line(const fs::path &path, const std::string &line) {
  std::ofstream f(path, std::ios::app | std::ios::binary);
  if (!f)
    throw IoError("cannot append to " + path.string());
  f << line << '\n';
  if (!f.flush())
    throw IoError("append failed for " + path.string());
}

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

/// Tab-separated metric file with a provenance comment and a header row.
class MetricWriter {
public:
  MetricWriter(const fs::path &path, const std::string &hash,
               const std::vector<std::string> &columns)
      : path_(path) {
    os_ << "# config_hash " << hash << '\n';
    for (std::size_t i = 0; i < columns.size(); ++i)
      os_ << (i ? "\t" : "") << columns[i];
    os_ << '\n';
  }
  template <class... Ts> void row(const Ts &...vals) {
    std::size_t i = 0;
    ((os_ << (i++ ? "\t" : "") << cell(vals)), ...);
    os_ << '\n';
  }
  void commit() { write_text_atomic(path_, os_.str()); }

private:
  static std::string cell(double v) { return fmt(v); }
  static std::string cell(const std::string &s) { return s; }
  static std::string cell(const char *s) { return s; }
  template <class T>
    requires std::is_integral_v<T>
  static std::string cell(T v) { return std::to_string(v); }

  fs::path path_;
  std::ostringstream os_;
};

void require_file(const fs::path &p, const std::string &producer) {
  if (!fs::exists(p))
    throw IoError("missing checkpoint " + p.string() + "; run `" + producer +
                  "` first");
}

void check_hash(const CheckpointMeta &meta, const std::string &expected,
                const fs::path &p, const std::string &producer) {
  if (meta.config_hash != expected)
    throw ConfigError("config-hash mismatch: " + p.string() + " was built with " +
                      meta.config_hash + " but the current config expects " +
                      expected + "; re-run `" + producer + "`");
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0)
      .count();
}

LabeledImages records_to_images(const std::vector<SyntheticRecord> &records,
                                std::size_t num_classes) {
  LabeledImages d;
  d.num_classes = num_classes;
  std::vector<Tensor> items;
  items.reserve(records.size());
  for (const auto &r : records) {
    Shape s = r.image.shape();
    s.insert(s.begin(), 1);
    items.push_back(r.image.reshaped(s));
    d.labels.push_back(r.label);
  }
  d.images = concat0(items);
  return d;
}

void append_images(LabeledImages &into, const LabeledImages &more) {
  if (into.size() == 0) {
    into = more;
    return;
  }
  const Tensor parts[] = {into.images, more.images};
  into.images = concat0(parts);
  into.labels.insert(into.labels.end(), more.labels.begin(), more.labels.end());
}

void write_distill_metrics(MetricWriter &w, const DistillReport &rep) {
  for (const auto &e : rep.epochs)
    w.row(e.round, e.epoch, e.kl, e.cam, e.total, e.decomposition_error,
          e.eval_accuracy);
}

const std::vector<std::string> kDistillColumns = {
    "round", "epoch", "kl", "cam", "total", "decomposition_error", "eval_accuracy"};

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

} // namespace

// --------------------------------------------------------------- Pipeline

Pipeline::Pipeline(RunConfig cfg, fs::path out_dir)
    : cfg_(std::move(cfg)), out_(std::move(out_dir)) {
  cfg_.finalize();
  models_ = {out_ / "teacher.ckpt", out_ / "denoiser.ckpt", out_ / "codec.ckpt"};
}

void Pipeline::log(const std::string &msg) const {
  if (log_)
    log_(msg);
}

void Pipeline::ensure_dirs() const {
  std::error_code ec;
  fs::create_directories(metrics_dir(), ec);
  if (ec)
    throw IoError("cannot create " + metrics_dir().string() + ": " + ec.message());
}

LabeledImages Pipeline::train_split() const {
  const auto s = stage_seeds(cfg_);
  return make_shapes({cfg_.dataset.num_classes, cfg_.dataset.image_size,
                      cfg_.dataset.train_per_class, "photo", s.train_data});
}

LabeledImages Pipeline::heldout_split() const {
  const auto s = stage_seeds(cfg_);
  return make_shapes({cfg_.dataset.num_classes, cfg_.dataset.image_size,
                      cfg_.dataset.heldout_per_class, "photo", s.heldout_data});
}

StageOutcome Pipeline::run_stage(Stage s, const std::function<StageOutcome()> &body) {
  ensure_dirs();
  const auto t0 = std::chrono::steady_clock::now();
  json rec = {{"stage", to_string(s)},
              {"config_hash", cfg_.hash()},
              {"stage_hash", stage_hash(cfg_, s)},
              {"version", version_tag()}};
  rec["status"] = "started";
  append_line(run_log_path(), rec.dump());
  pending_artifacts_ = json::object();
  pending_metrics_.clear();
  log(to_string(s) + ": started");
  try {
    StageOutcome out = body();
    out.stage = s;
    rec["status"] = "ok";
    rec["artifacts"] = pending_artifacts_;
    rec["metrics"] = pending_metrics_;
    rec["summary"] = out.summary;
    rec["wall_seconds"] = seconds_since(t0);
    write_text_atomic(out_ / "config.json", cfg_.to_json().dump(2) + "\n");
    append_line(run_log_path(), rec.dump());
    log(to_string(s) + ": ok (" + fmt(seconds_since(t0)) + " s)");
    return out;
  } catch (const std::exception &e) {
    rec["status"] = "failed";
    rec["error"] = e.what();
    rec["wall_seconds"] = seconds_since(t0);
    try {
      append_line(run_log_path(), rec.dump());
    } catch (...) {
    }
    throw;
  }
}

std::unique_ptr<Classifier> Pipeline::load_teacher() const {
  require_file(models_.teacher, "train-teacher");
  CheckpointMeta meta;
  auto net = load_classifier(models_.teacher, &meta);
  check_hash(meta, stage_hash(cfg_, Stage::TrainTeacher), models_.teacher,
             "train-teacher");
  return net;
}

std::unique_ptr<Classifier> Pipeline::fresh_student() const {
  return std::make_unique<Classifier>(cfg_.student, stage_seeds(cfg_).student_init);
}

std::pair<std::unique_ptr<Denoiser>, std::unique_ptr<Codec>>
Pipeline::load_generator() const {
  require_file(models_.denoiser, "train-diffusion");
  require_file(models_.codec, "train-diffusion");
  const std::string expected = stage_hash(cfg_, Stage::TrainDiffusion);
  CheckpointMeta dm, cm;
  auto den = load_denoiser(models_.denoiser, &dm);
  check_hash(dm, expected, models_.denoiser, "train-diffusion");
  auto codec = load_codec(models_.codec, &cm);
  check_hash(cm, expected, models_.codec, "train-diffusion");
  return {std::move(den), std::move(codec)};
}

StageOutcome Pipeline::train_teacher() {
  return run_stage(Stage::TrainTeacher, [&] {
    const std::string h = stage_hash(cfg_, Stage::TrainTeacher);
    const LabeledImages train = train_split();
    const LabeledImages heldout = heldout_split();
    TrainReport rep;
    auto teacher = train_classifier(train, &heldout, cfg_.teacher, cfg_.teacher_train, &rep);
    const double train_acc = dfkd::evaluate(*teacher, train).accuracy;
    save_classifier(models_.teacher, *teacher, h, cfg_.teacher_train.seed,
                    {{"heldout_accuracy", rep.final_accuracy},
                     {"train_accuracy", train_acc}});
    pending_artifacts_["teacher.ckpt"] = file_hash(models_.teacher);

    MetricWriter m(metrics_dir() / "teacher.tsv", h,
                   {"epoch", "loss", "train_accuracy", "eval_accuracy"});
    for (const auto &e : rep.curve)
      m.row(e.epoch, e.loss, e.train_accuracy, e.eval_accuracy);
    m.commit();
    pending_metrics_.push_back("metrics/teacher.tsv");
    log("teacher held-out accuracy " + fmt(rep.final_accuracy));
    return StageOutcome{Stage::TrainTeacher,
                        {{"heldout_accuracy", rep.final_accuracy},
                         {"train_accuracy", train_acc}}};
  });
}

StageOutcome Pipeline::train_diffusion() {
  return run_stage(Stage::TrainDiffusion, [&] {
    const std::string h = stage_hash(cfg_, Stage::TrainDiffusion);
    const auto seeds = stage_seeds(cfg_);
    const auto &d = cfg_.dataset;
    const LabeledImages data = make_shapes(
        {d.num_classes, d.image_size, d.generator_per_class, d.generator_domain,
         seeds.generator_data});
    const std::size_t channels = data.images.dim(1);
    auto codec = make_codec(cfg_.diffusion.codec, channels,
                            cfg_.diffusion.latent_channels, seeds.codec);
    TrainReport codec_rep;
    train_codec(*codec, data.images, cfg_.diffusion.codec_train, &codec_rep);
    if (cfg_.diffusion.fit_latent_scale)
      fit_latent_scale(*codec, data.images);
    const Tensor latents = encode_images(*codec, data.images);

    DenoiserSpec spec;
    spec.channels = latents.dim(1);
    spec.size = latents.dim(2);
    spec.num_classes = d.num_classes;
    spec.width = cfg_.diffusion.width;
    spec.num_steps = cfg_.synthesis.total_steps;
    const NoiseSchedule schedule =
        NoiseSchedule::make(parse_schedule_kind(cfg_.diffusion.schedule),
                            cfg_.synthesis.total_steps);
    TrainReport rep;
    auto den = train_denoiser(latents, data.labels, spec, schedule,
                              cfg_.diffusion.train, &rep);

    save_codec(models_.codec, *codec, channels, spec.channels, h, seeds.codec);
    save_denoiser(models_.denoiser, *den, h, seeds.denoiser,
                  {{"schedule", cfg_.diffusion.schedule}});
    pending_artifacts_["codec.ckpt"] = file_hash(models_.codec);
    pending_artifacts_["denoiser.ckpt"] = file_hash(models_.denoiser);

    MetricWriter m(metrics_dir() / "denoiser.tsv", h, {"epoch", "loss"});
    for (const auto &e : rep.curve)
      m.row(e.epoch, e.loss);
    m.commit();
    pending_metrics_.push_back("metrics/denoiser.tsv");
    if (!codec_rep.curve.empty()) {
      MetricWriter c(metrics_dir() / "codec.tsv", h, {"epoch", "loss"});
      for (const auto &e : codec_rep.curve)
        c.row(e.epoch, e.loss);
      c.commit();
      pending_metrics_.push_back("metrics/codec.tsv");
    }
    const double last = rep.curve.empty() ? 0.0 : rep.curve.back().loss;
    log("denoiser final loss " + fmt(last));
    return StageOutcome{Stage::TrainDiffusion,
                        {{"final_loss", last},
                         {"latent_scale", codec->latent_scale()},
                         {"codec", codec->kind()}}};
  });
}

namespace {

void write_synthesis_metrics(const fs::path &path, const std::string &hash,
                             const std::vector<LossRecord> &losses) {
  MetricWriter m(path, hash, {"round", "timestep", "bn", "cls", "adv", "total"});
  for (const auto &l : losses)
    m.row(l.round, l.timestep, l.terms.bn, l.terms.cls, l.terms.adv, l.terms.total);
  m.commit();
}

json manifest_summary(const Manifest &m, std::size_t classes) {
  std::map<int, std::size_t> per_t;
  double ce0 = 0.0;
  std::size_t n0 = 0;
  for (const auto &r : m.records) {
    ++per_t[r.harvest_t];
    if (r.harvest_t == 0) {
      ce0 += -std::log(std::max(1e-300, r.teacher_confidence));
      ++n0;
    }
  }
  json counts = json::object();
  for (const auto &[t, c] : per_t)
    counts[std::to_string(t)] = c;
  return {{"records", m.records.size()},
          {"per_timestep", counts},
          {"class_counts", m.class_counts(classes)},
          {"final_teacher_ce", n0 ? ce0 / static_cast<double>(n0) : 0.0}};
}

} // namespace

StageOutcome Pipeline::generate() {
  if (cfg_.mode == DistillMode::Alternating)
    throw ConfigError("generate: alternating mode interleaves generation with "
                      "distillation; run `distill` instead");
  return run_stage(Stage::Generate, [&] {
    const std::string h = stage_hash(cfg_, Stage::Generate);
    auto teacher = load_teacher();
    auto [den, codec] = load_generator();
    auto student = fresh_student();
    const NoiseSchedule schedule = NoiseSchedule::make(
        parse_schedule_kind(cfg_.diffusion.schedule), cfg_.synthesis.total_steps);
    GuidedModels m{*teacher, student.get(), *den, *codec, schedule};
    BuildOptions opts;
    opts.out_dir = synthetic_dir();
    opts.config_hash = h;
    opts.after_round = [&](int r, const RoundResult &round) {
      log("generate: round " + std::to_string(r) + " harvested " +
          std::to_string(round.records.size()) + " images");
    };
    std::error_code ec;
    fs::remove_all(synthetic_dir(), ec);
    fs::create_directories(synthetic_dir(), ec);
    const BuildResult built = build_dataset(m, cfg_.synthesis, opts);
    write_synthesis_metrics(metrics_dir() / "synthesis.tsv", h, built.losses);
    pending_metrics_.push_back("metrics/synthesis.tsv");
    pending_artifacts_["synthetic/manifest.tsv"] =
        file_hash(synthetic_dir() / "manifest.tsv");
    return StageOutcome{Stage::Generate,
                        manifest_summary(built.manifest, cfg_.dataset.num_classes)};
  });
}

StageOutcome Pipeline::alternating(json &artifacts) {
  const std::string h = stage_hash(cfg_, Stage::Distill);
  auto teacher = load_teacher();
  auto [den, codec] = load_generator();
  auto student = fresh_student();
  const NoiseSchedule schedule = NoiseSchedule::make(
      parse_schedule_kind(cfg_.diffusion.schedule), cfg_.synthesis.total_steps);
  const LabeledImages heldout = heldout_split();
  std::error_code ec;
  fs::remove_all(synthetic_dir(), ec);
  fs::remove_all(out_ / "students", ec);
  fs::create_directories(synthetic_dir(), ec);
  fs::create_directories(out_ / "students", ec);

  const fs::path init = out_ / "students" / "init.ckpt";
  save_classifier(init, *student, h, stage_seeds(cfg_).student_init);
  std::string previous_hash = file_hash(init);
  std::uint64_t previous_checksum = student->parameter_checksum();
  artifacts["students/init.ckpt"] = previous_hash;

  LabeledImages seen;
  std::vector<DistillEpoch> epochs;
  GuidedModels m{*teacher, student.get(), *den, *codec, schedule};
  BuildOptions opts;
  opts.out_dir = synthetic_dir();
  opts.config_hash = stage_hash(cfg_, Stage::Generate);
  opts.after_round = [&](int r, const RoundResult &round) {
    if (round.student_checksum != previous_checksum)
      throw ContractError("alternating: round " + std::to_string(r) +
                          " did not generate with the previous round's student");
    append_images(seen, records_to_images(round.records, cfg_.dataset.num_classes));
    const DistillReport rep =
        distill_round(*student, *teacher, seen, cfg_.kd, &heldout, r);
    epochs.insert(epochs.end(), rep.epochs.begin(), rep.epochs.end());
    char name[48];
    std::snprintf(name, sizeof name, "round_%03d.ckpt", r);
    const fs::path ck = out_ / "students" / name;
    save_classifier(ck, *student, h, cfg_.kd.seed, {{"round", r}});
    const std::string produced = file_hash(ck);
    artifacts[std::string("students/") + name] = produced;
    append_line(run_log_path(),
                json{{"event", "round"},
                     {"round", r},
                     {"config_hash", cfg_.hash()},
                     {"student_used", previous_hash},
                     {"student_used_checksum", hex64(round.student_checksum)},
                     {"student_produced", produced},
                     {"student_produced_checksum", hex64(student->parameter_checksum())},
                     {"records", round.records.size()},
                     {"eval_accuracy", rep.epochs.back().eval_accuracy}}
                    .dump());
    log("alternating: round " + std::to_string(r) + " accuracy " +
        fmt(rep.epochs.back().eval_accuracy));
    previous_hash = produced;
    previous_checksum = student->parameter_checksum();
  };
  const BuildResult built = build_dataset(m, cfg_.synthesis, opts);
  write_synthesis_metrics(metrics_dir() / "synthesis.tsv",
                          stage_hash(cfg_, Stage::Generate), built.losses);
  pending_metrics_.push_back("metrics/synthesis.tsv");
  MetricWriter w(metrics_dir() / "distill.tsv", h, kDistillColumns);
  for (const auto &e : epochs)
    w.row(e.round, e.epoch, e.kl, e.cam, e.total, e.decomposition_error,
          e.eval_accuracy);
  w.commit();
  pending_metrics_.push_back("metrics/distill.tsv");

  const fs::path final_ckpt = out_ / "student.ckpt";
  save_classifier(final_ckpt, *student, h, cfg_.kd.seed,
                  {{"source", "synthetic"}, {"mode", "alternating"}});
  artifacts["student.ckpt"] = file_hash(final_ckpt);
  artifacts["synthetic/manifest.tsv"] = file_hash(synthetic_dir() / "manifest.tsv");
  json summary = manifest_summary(built.manifest, cfg_.dataset.num_classes);
  summary["final_eval_accuracy"] = epochs.empty() ? -1.0 : epochs.back().eval_accuracy;
  return StageOutcome{Stage::Distill, summary};
}

StageOutcome Pipeline::distill(DistillSource source) {
  return run_stage(Stage::Distill, [&] {
    if (source == DistillSource::Synthetic && cfg_.mode == DistillMode::Alternating)
      return alternating(pending_artifacts_);
    const std::string h = stage_hash(cfg_, Stage::Distill);
    auto teacher = load_teacher();
    auto student = fresh_student();
    const LabeledImages heldout = heldout_split();
    const std::size_t classes = cfg_.dataset.num_classes;
    LabeledImages data;
    if (source == DistillSource::Synthetic) {
      const Manifest man = read_manifest(synthetic_dir());
      const std::string expected = stage_hash(cfg_, Stage::Generate);
      if (man.config_hash != expected)
        throw ConfigError("config-hash mismatch: synthetic manifest was built with " +
                          man.config_hash + " but the current config expects " +
                          expected + "; re-run `generate`");
      data = load_labeled_images(synthetic_dir(), classes);
    } else {
      data = make_uniform_noise(cfg_.noise_baseline_count, cfg_.student.in_channels,
                                cfg_.dataset.image_size, stage_seeds(cfg_).noise);
      data.num_classes = classes;
      data.labels = teacher_labels(*teacher, data.images);
    }
    const DistillReport rep = distill_round(*student, *teacher, data, cfg_.kd, &heldout, 0);
    const bool noise = source == DistillSource::Noise;
    const fs::path ck = out_ / (noise ? "student_noise.ckpt" : "student.ckpt");
    save_classifier(ck, *student, h, cfg_.kd.seed,
                    {{"source", noise ? "noise" : "synthetic"}, {"mode", "two_stage"}});
    pending_artifacts_[ck.filename().string()] = file_hash(ck);
    const std::string metric = noise ? "distill_noise.tsv" : "distill.tsv";
    MetricWriter w(metrics_dir() / metric, h, kDistillColumns);
    write_distill_metrics(w, rep);
    w.commit();
    pending_metrics_.push_back("metrics/" + metric);
    const double acc = rep.epochs.back().eval_accuracy;
    log("distill: held-out accuracy " + fmt(acc));
    return StageOutcome{Stage::Distill,
                        {{"source", noise ? "noise" : "synthetic"},
                         {"train_items", data.size()},
                         {"final_eval_accuracy", acc}}};
  });
}

StageOutcome Pipeline::evaluate(EvalModel model, EvalSplit split) {
  return run_stage(Stage::Evaluate, [&] {
    std::unique_ptr<Classifier> net;
    std::string name;
    if (model == EvalModel::Teacher) {
      net = load_teacher();
      name = "teacher";
    } else {
      const bool noise = model == EvalModel::NoiseStudent;
      const fs::path ck = out_ / (noise ? "student_noise.ckpt" : "student.ckpt");
      require_file(ck, noise ? "distill --source noise" : "distill");
      CheckpointMeta meta;
      net = load_classifier(ck, &meta);
      check_hash(meta, stage_hash(cfg_, Stage::Distill), ck, "distill");
      name = noise ? "noise-student" : "student";
    }
    const LabeledImages data =
        split == EvalSplit::Train ? train_split() : heldout_split();
    if (data.size() == 0)
      throw ConfigError("evaluate: empty evaluation set");
    if (net->num_classes() != data.num_classes)
      throw ConfigError("evaluate: class-space mismatch (model has " +
                        std::to_string(net->num_classes()) + " classes, data has " +
                        std::to_string(data.num_classes) + ")");
    const EvalResult r = dfkd::evaluate(*net, data);
    const std::string split_name = split == EvalSplit::Train ? "train" : "heldout";
    json rec = {{"config_hash", cfg_.hash()},
                {"model", name},
                {"split", split_name},
                {"count", r.count},
                {"accuracy", r.accuracy},
                {"per_class_recall", r.per_class_recall},
                {"confusion", r.confusion}};
    const std::string file = "eval_" + name + "_" + split_name + ".json";
    write_text_atomic(metrics_dir() / file, rec.dump() + "\n");
    pending_metrics_.push_back("metrics/" + file);
    log("evaluate: " + name + " on " + split_name + " accuracy " + fmt(r.accuracy));
    return StageOutcome{Stage::Evaluate, rec};
  });
}

StageOutcome Pipeline::ablate_lca() {
  return run_stage(Stage::AblateLca, [&] {
    // Arms share the teacher and generator of this run.
    load_teacher();
    load_generator();
    const std::string h = cfg_.hash();
    MetricWriter rows(metrics_dir() / "ablation.tsv", h,
                      {"arm", "replicate", "accuracy", "final_teacher_ce"});
    json table = json::array();
    for (Augmentation arm : cfg_.ablation.arms) {
      std::vector<double> accs;
      for (std::uint64_t rep : cfg_.ablation.replicates) {
        RunConfig sub = cfg_;
        sub.synthesis.augmentation = arm;
        sub.replicate = rep;
        sub.finalize();
        const fs::path dir =
            out_ / "ablation" / (to_string(arm) + "_r" + std::to_string(rep));
        Pipeline p(sub, dir);
        p.set_log(log_);
        p.set_model_paths(models_);
        double ce = 0.0;
        if (sub.mode == DistillMode::TwoStage)
          ce = p.generate().summary.value("final_teacher_ce", 0.0);
        else
          ce = p.distill().summary.value("final_teacher_ce", 0.0);
        if (sub.mode == DistillMode::TwoStage)
          p.distill();
        const double acc = p.evaluate().summary["accuracy"].get<double>();
        accs.push_back(acc);
        rows.row(to_string(arm), rep, acc, ce);
        log("ablate-lca: " + to_string(arm) + " replicate " + std::to_string(rep) +
            " accuracy " + fmt(acc));
      }
      double mean = 0.0;
      for (double a : accs)
        mean += a;
      mean /= static_cast<double>(accs.size());
      table.push_back({{"arm", to_string(arm)},
                       {"median", median(accs)},
                       {"mean", mean},
                       {"accuracies", accs}});
    }
    rows.commit();
    MetricWriter summary(metrics_dir() / "ablation_summary.tsv", h,
                         {"arm", "median_accuracy", "mean_accuracy", "replicates"});
    for (const auto &r : table)
      summary.row(r["arm"].get<std::string>(), r["median"].get<double>(),
                  r["mean"].get<double>(), r["accuracies"].size());
    summary.commit();
    pending_metrics_.push_back("metrics/ablation.tsv");
    pending_metrics_.push_back("metrics/ablation_summary.tsv");
    return StageOutcome{Stage::AblateLca, {{"arms", table}}};
  });
}

StageOutcome Pipeline::visualize(std::size_t per_class) {
  if (per_class == 0)
    throw ConfigError("visualize: need at least one item per class");
  return run_stage(Stage::Visualize, [&] {
    const Manifest man = read_manifest(synthetic_dir());
    if (!man.valid)
      throw IoError("visualize: synthetic manifest is marked invalid");
    // Item identity: position within its (round, timestep) group.
    std::map<std::pair<int, int>, std::size_t> seen;
    std::map<std::pair<int, std::size_t>, std::map<int, std::string>> items;
    std::map<std::pair<int, std::size_t>, int> item_label;
    std::set<int, std::greater<>> steps;
    for (const auto &r : man.records) {
      const std::size_t idx = seen[{r.round, r.harvest_t}]++;
      items[{r.round, idx}][r.harvest_t] = r.path;
      item_label[{r.round, idx}] = r.label;
      steps.insert(r.harvest_t);
    }
    const std::size_t size = cfg_.dataset.image_size, zoom = 3, gap = 2;
    const std::size_t cell = size * zoom + gap;
    const std::vector<int> cols(steps.begin(), steps.end());
    fs::create_directories(out_ / "visualize");
    json files = json::array();
    for (std::size_t c = 0; c < cfg_.dataset.num_classes; ++c) {
      std::vector<std::pair<int, std::size_t>> rows;
      for (const auto &[key, label] : item_label)
        if (label == static_cast<int>(c) && rows.size() < per_class)
          rows.push_back(key);
      if (rows.empty())
        continue;
      std::vector<Tensor> tiles;
      double lo = 1e300, hi = -1e300;
      for (const auto &key : rows)
        for (int t : cols) {
          const auto it = items[key].find(t);
          Tensor img;
          if (it != items[key].end()) {
            img = read_pfm(synthetic_dir() / it->second);
            for (double v : img.vec()) {
              lo = std::min(lo, v);
              hi = std::max(hi, v);
            }
          }
          tiles.push_back(img);
        }
      if (!(hi > lo))
        hi = lo + 1.0;
      Tensor grid({rows.size() * cell + gap, cols.size() * cell + gap});
      std::fill(grid.vec().begin(), grid.vec().end(), 0.5 * (lo + hi));
      for (std::size_t i = 0; i < rows.size(); ++i)
        for (std::size_t j = 0; j < cols.size(); ++j) {
          const Tensor &img = tiles[i * cols.size() + j];
          if (img.numel() == 0)
            continue;
          const std::size_t ch = img.dim(0), plane = size * size;
          for (std::size_t y = 0; y < size * zoom; ++y)
            for (std::size_t x = 0; x < size * zoom; ++x) {
              double v = 0.0;
              for (std::size_t k = 0; k < ch; ++k)
                v += img.data()[k * plane + (y / zoom) * size + x / zoom];
              grid.data()[(gap + i * cell + y) * grid.dim(1) + gap + j * cell + x] =
                  v / static_cast<double>(ch);
            }
        }
      const std::string name = "visualize/class_" + std::to_string(c) + ".pgm";
      write_pgm(out_ / name, grid, lo, hi);
      pending_artifacts_[name] = file_hash(out_ / name);
      files.push_back(name);
    }
    return StageOutcome{Stage::Visualize,
                        {{"files", files}, {"columns_timesteps", cols}}};
  });
}

std::vector<StageOutcome> Pipeline::run_all() {
  std::vector<StageOutcome> out;
  out.push_back(train_teacher());
  out.push_back(train_diffusion());
  if (cfg_.mode == DistillMode::TwoStage)
    out.push_back(generate());
  out.push_back(distill());
  out.push_back(evaluate());
  return out;
}

} // namespace dfkd
