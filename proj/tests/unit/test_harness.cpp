// SPDX-License-Identifier: Apache-2.0
#include "checkpoint.hpp"
#include "harness.hpp"
#include "helpers.hpp"

#include <doctest.h>

#include <cstdlib>
#include <fstream>

using namespace dfkd;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

json tiny_json() {
  return json::parse(R"({
    "seed": 5,
    "dataset": {"train_per_class": 40, "heldout_per_class": 20, "generator_per_class": 40},
    "teacher": {"epochs": 2, "accuracy_floor": 0},
    "diffusion": {"epochs": 2},
    "synthesis": {"rounds": 2, "batch_size": 8},
    "distillation": {"epochs": 2, "noise_baseline_count": 64},
    "ablation": {"arms": ["none", "cutmix"], "replicates": [1]}
  })");
}

RunConfig tiny() { return RunConfig::from_json(tiny_json()); }

std::string slurp(const fs::path &p) {
  std::ifstream f(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

/// A completed two-stage run shared by the tests below.
const fs::path &full_run() {
  static const fs::path dir = [] {
    const fs::path d = dfkd::test::scratch_dir("harness_full");
    Pipeline p(tiny(), d);
    p.run_all();
    p.distill(DistillSource::Noise);
    return d;
  }();
  return dir;
}

std::vector<json> records_for(const std::vector<json> &log, const std::string &stage) {
  std::vector<json> out;
  for (const auto &r : log)
    if (r.value("stage", "") == stage)
      out.push_back(r);
  return out;
}

} // namespace

TEST_CASE("empty config equals the defaults and JSON round-trips") {
  const RunConfig d = RunConfig::defaults();
  CHECK(RunConfig::from_json(json::object()).hash() == d.hash());
  CHECK(RunConfig::from_json(d.to_json()).hash() == d.hash());
  CHECK(RunConfig::from_json(tiny().to_json()).hash() == tiny().hash());
  CHECK(d.synthesis.total_steps == 10);
  CHECK(d.synthesis.period() == 3);
  CHECK_NOTHROW(d.validate());
}

TEST_CASE("unknown keys, wrong types and bad ranges are config errors") {
  CHECK_THROWS_AS(RunConfig::from_json({{"sead", 1}}), ConfigError);
  CHECK_THROWS_AS(RunConfig::from_json({{"synthesis", {{"round", 2}}}}), ConfigError);
  CHECK_THROWS_AS(RunConfig::from_json({{"synthesis", {{"rounds", "two"}}}}), ConfigError);
  CHECK_THROWS_AS(RunConfig::from_json({{"synthesis", {{"lca_period", 11}}}}), ConfigError);
  CHECK_THROWS_AS(RunConfig::from_json({{"synthesis", {{"augmentation", "rotate"}}}}),
                  ConfigError);
  CHECK_THROWS_AS(RunConfig::from_json({{"inversion", {{"eta", -1.0}}}}), ConfigError);
  CHECK_THROWS_AS(RunConfig::from_json({{"distillation", {{"mode", "joint"}}}}), ConfigError);
  CHECK_THROWS_AS(RunConfig::from_json({{"schema_version", 99}}), ConfigError);
  CHECK_THROWS_AS(RunConfig::from_json({{"dataset", {{"num_classes", 0}}}}), ConfigError);
  CHECK_THROWS_AS(RunConfig::from_json(json::array()), ConfigError);
}

TEST_CASE("config files load with the same result as inline JSON") {
  const fs::path dir = dfkd::test::scratch_dir("config_load");
  std::ofstream(dir / "c.json") << tiny_json().dump(2);
  CHECK(RunConfig::load(dir / "c.json").hash() == tiny().hash());
  std::ofstream(dir / "bad.json") << "{ not json";
  CHECK_THROWS_AS(RunConfig::load(dir / "bad.json"), ConfigError);
  CHECK_THROWS(RunConfig::load(dir / "absent.json"));
}

TEST_CASE("config hash ignores the output directory and tracks everything else") {
  json a = tiny_json(), b = tiny_json();
  b["output_dir"] = "elsewhere";
  CHECK(RunConfig::from_json(a).hash() == RunConfig::from_json(b).hash());
  b["seed"] = 6;
  CHECK(RunConfig::from_json(a).hash() != RunConfig::from_json(b).hash());
  CHECK(RunConfig::from_json(a).hash() == RunConfig::from_json(a).hash());
}

TEST_CASE("stage hashes depend only on upstream sections") {
  const RunConfig base = tiny();
  json j = tiny_json();
  j["synthesis"]["guidance_scale"] = 5.0;
  const RunConfig syn = RunConfig::from_json(j);
  CHECK(stage_hash(base, Stage::TrainTeacher) == stage_hash(syn, Stage::TrainTeacher));
  CHECK(stage_hash(base, Stage::TrainDiffusion) == stage_hash(syn, Stage::TrainDiffusion));
  CHECK(stage_hash(base, Stage::Generate) != stage_hash(syn, Stage::Generate));
  CHECK(stage_hash(base, Stage::Distill) != stage_hash(syn, Stage::Distill));

  j = tiny_json();
  j["distillation"]["temperature"] = 2.0;
  const RunConfig kd = RunConfig::from_json(j);
  CHECK(stage_hash(base, Stage::Generate) == stage_hash(kd, Stage::Generate));
  CHECK(stage_hash(base, Stage::Distill) != stage_hash(kd, Stage::Distill));

  j = tiny_json();
  j["replicate"] = 3;
  const RunConfig rep = RunConfig::from_json(j);
  CHECK(stage_hash(base, Stage::TrainTeacher) == stage_hash(rep, Stage::TrainTeacher));
  CHECK(stage_hash(base, Stage::Generate) != stage_hash(rep, Stage::Generate));
  const StageSeeds a = stage_seeds(base), b = stage_seeds(rep);
  CHECK(a.teacher == b.teacher);
  CHECK(a.denoiser == b.denoiser);
  CHECK(a.synthesis != b.synthesis);
  CHECK(a.student_init != b.student_init);
}

TEST_CASE("output directories resolve under the configured root") {
  CHECK(resolve_output_dir("/abs/run") == fs::path("/abs/run"));
  ::setenv("DFKD_OUTPUT_ROOT", "/tmp/dfkd_root", 1);
  CHECK(resolve_output_dir("rel/run") == fs::path("/tmp/dfkd_root/rel/run"));
  ::unsetenv("DFKD_OUTPUT_ROOT");
  CHECK(resolve_output_dir("rel/run") == fs::path("rel/run"));
}

TEST_CASE("a full run leaves artifacts, metrics and a complete run log") {
  const fs::path &dir = full_run();
  for (const char *f : {"config.json", "teacher.ckpt", "denoiser.ckpt", "codec.ckpt",
                        "student.ckpt", "student_noise.ckpt", "synthetic/manifest.tsv",
                        "metrics/teacher.tsv", "metrics/denoiser.tsv",
                        "metrics/synthesis.tsv", "metrics/distill.tsv",
                        "metrics/eval_student_heldout.json"})
    CHECK_MESSAGE(fs::exists(dir / f), f);
  const Manifest m = read_manifest(dir / "synthetic");
  CHECK(m.valid);
  CHECK(m.records.size() == 2 * 4 * 8);
  CHECK(slurp(dir / "metrics/distill.tsv").rfind("# config_hash", 0) == 0);

  const auto log = read_run_log(dir / "run.jsonl");
  for (const char *stage : {"train-teacher", "train-diffusion", "generate", "distill", "evaluate"}) {
    const auto recs = records_for(log, stage);
    REQUIRE_MESSAGE(recs.size() >= 2, stage);
    CHECK(recs.front()["status"] == "started");
    CHECK(recs.back()["status"] == "ok");
    CHECK(recs.back().contains("stage_hash"));
    CHECK(recs.back().contains("version"));
    CHECK(recs.back()["config_hash"] == tiny().hash());
  }
  const auto gen = records_for(log, "generate").back();
  CHECK(gen["artifacts"].contains("synthetic/manifest.tsv"));
  CHECK(gen["artifacts"]["synthetic/manifest.tsv"] == file_hash(dir / "synthetic/manifest.tsv"));
}

TEST_CASE("teacher evaluation reproduces the recorded training accuracy") {
  const fs::path &dir = full_run();
  const auto log = read_run_log(dir / "run.jsonl");
  const double recorded = records_for(log, "train-teacher").back()["summary"]["train_accuracy"];
  Pipeline p(tiny(), dir);
  const auto out = p.evaluate(EvalModel::Teacher, EvalSplit::Train);
  CHECK(out.summary["accuracy"].get<double>() == recorded);
  CHECK(fs::exists(dir / "metrics/eval_teacher_train.json"));
}

TEST_CASE("distillation needs only the teacher and the synthetic set") {
  const fs::path dir = dfkd::test::scratch_dir("harness_isolated");
  fs::copy(full_run(), dir, fs::copy_options::recursive | fs::copy_options::overwrite_existing);
  fs::remove(dir / "denoiser.ckpt");
  fs::remove(dir / "codec.ckpt");
  Pipeline p(tiny(), dir);
  CHECK_NOTHROW(p.distill());
  CHECK_NOTHROW(p.evaluate());
  CHECK_THROWS_AS(p.generate(), IoError);
  const auto log = read_run_log(dir / "run.jsonl");
  CHECK(log.back()["stage"] == "generate");
  CHECK(log.back()["status"] == "failed");
}

TEST_CASE("artifacts from a different config are refused with a hint") {
  const fs::path dir = dfkd::test::scratch_dir("harness_mismatch");
  fs::copy(full_run(), dir, fs::copy_options::recursive | fs::copy_options::overwrite_existing);
  json j = tiny_json();
  j["teacher"]["epochs"] = 3;
  Pipeline p(RunConfig::from_json(j), dir);
  try {
    p.generate();
    FAIL("expected a config-hash mismatch");
  } catch (const ConfigError &e) {
    CHECK(std::string(e.what()).find("config-hash mismatch") != std::string::npos);
    CHECK(std::string(e.what()).find("train-teacher") != std::string::npos);
  }
  json k = tiny_json();
  k["synthesis"]["guidance_scale"] = 4.0;
  Pipeline q(RunConfig::from_json(k), dir);
  CHECK_THROWS_AS(q.distill(), ConfigError);
}

TEST_CASE("missing upstream artifacts are I/O errors and leave no config behind") {
  const fs::path dir = dfkd::test::scratch_dir("harness_empty");
  Pipeline p(tiny(), dir);
  CHECK_THROWS_AS(p.generate(), IoError);
  CHECK_THROWS_AS(p.distill(), IoError);
  CHECK_THROWS_AS(p.evaluate(), IoError);
  CHECK_FALSE(fs::exists(dir / "config.json"));
  const auto log = read_run_log(dir / "run.jsonl");
  CHECK(log.size() == 6);
  CHECK(log.back()["status"] == "failed");
  CHECK(log.back().contains("error"));
}

TEST_CASE("visualize writes one grid per class") {
  const fs::path dir = dfkd::test::scratch_dir("harness_vis");
  fs::copy(full_run(), dir, fs::copy_options::recursive | fs::copy_options::overwrite_existing);
  Pipeline p(tiny(), dir);
  p.visualize(3);
  for (int c = 0; c < 2; ++c) {
    const fs::path f = dir / ("visualize/class_" + std::to_string(c) + ".pgm");
    REQUIRE(fs::exists(f));
    CHECK(slurp(f).rfind("P5", 0) == 0);
  }
  CHECK_THROWS_AS(p.visualize(0), ConfigError);
}

TEST_CASE("latent augmentation ablation writes one row per arm and replicate") {
  const fs::path dir = dfkd::test::scratch_dir("harness_ablation");
  fs::copy(full_run(), dir, fs::copy_options::recursive | fs::copy_options::overwrite_existing);
  Pipeline p(tiny(), dir);
  const auto out = p.ablate_lca();
  REQUIRE(out.summary["arms"].size() == 2);
  CHECK(out.summary["arms"][0]["arm"] == "none");
  CHECK(out.summary["arms"][1]["arm"] == "cutmix");
  const std::string rows = slurp(dir / "metrics/ablation.tsv");
  CHECK(rows.find("none\t1\t") != std::string::npos);
  CHECK(rows.find("cutmix\t1\t") != std::string::npos);
  CHECK(fs::exists(dir / "ablation/cutmix_r1/synthetic/manifest.tsv"));
  CHECK(read_manifest(dir / "ablation/none_r1/synthetic").valid);
}

TEST_CASE("alternating mode chains each round to the previous student") {
  const fs::path dir = dfkd::test::scratch_dir("harness_alt");
  for (const char *f : {"teacher.ckpt", "denoiser.ckpt", "codec.ckpt"})
    fs::copy_file(full_run() / f, dir / f);
  json j = tiny_json();
  j["distillation"]["mode"] = "alternating";
  j["synthesis"]["rounds"] = 3;
  Pipeline p(RunConfig::from_json(j), dir);
  CHECK_THROWS_AS(p.generate(), ConfigError);
  p.distill();
  std::vector<json> rounds;
  for (const auto &r : read_run_log(dir / "run.jsonl"))
    if (r.value("event", "") == "round")
      rounds.push_back(r);
  REQUIRE(rounds.size() == 3);
  CHECK(rounds[0]["student_used"] == file_hash(dir / "students/init.ckpt"));
  for (std::size_t i = 1; i < 3; ++i) {
    CHECK(rounds[i]["student_used"] == rounds[i - 1]["student_produced"]);
    CHECK(rounds[i]["student_used_checksum"] == rounds[i - 1]["student_produced_checksum"]);
    CHECK(rounds[i]["student_used"] != rounds[i]["student_produced"]);
  }
  CHECK(fs::exists(dir / "students/round_002.ckpt"));
  CHECK(read_manifest(dir / "synthetic").records.size() == 3 * 4 * 8);
}
