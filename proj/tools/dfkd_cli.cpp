// SPDX-License-Identifier: Apache-2.0
// Command-line front end over the C interface.
//
// Exit codes: 0 success, 1 domain error (I/O, numerics, training), 2 usage
// error (bad flags, invalid config, artifacts from a different config).
// Failures print one JSON error record on stderr; successful stages print
// their JSON summary on stdout.

#include "dfkd/dfkd.h"

#include <CLI11.hpp>
#include <json.hpp>

#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

namespace {

using nlohmann::json;

constexpr int kExitOk = 0;
constexpr int kExitDomain = 1;
constexpr int kExitUsage = 2;

int exit_code_for(dfkd_status s) {
  switch (s) {
  case DFKD_OK:
    return kExitOk;
  case DFKD_ERR_INVALID_ARGUMENT:
  case DFKD_ERR_CONFIG:
    return kExitUsage;
  default:
    return kExitDomain;
  }
}

void error_record(const std::string &stage, const std::string &code,
                  const std::string &message, int exit_code) {
  const json rec = {{"status", "error"},
                    {"stage", stage},
                    {"code", code},
                    {"message", message},
                    {"exit_code", exit_code}};
  std::cerr << rec.dump() << std::endl;
}

void log_to_stderr(const char *message, void *) {
  std::fprintf(stderr, "[dfkd] %s\n", message);
}

/// "a.b.c=value": value parsed as JSON when possible, else kept as text.
void apply_override(json &cfg, const std::string &assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0)
    throw CLI::ValidationError("--set", "expected key=value, got '" + assignment + "'");
  const std::string key = assignment.substr(0, eq);
  const std::string text = assignment.substr(eq + 1);
  json value = json::parse(text, nullptr, false);
  if (value.is_discarded())
    value = text;
  json *node = &cfg;
  std::stringstream parts(key);
  std::string part;
  std::vector<std::string> path;
  while (std::getline(parts, part, '.'))
    path.push_back(part);
  for (std::size_t i = 0; i + 1 < path.size(); ++i) {
    json &next = (*node)[path[i]];
    if (next.is_null())
      next = json::object();
    if (!next.is_object())
      throw CLI::ValidationError("--set", "'" + path[i] + "' is not a section");
    node = &next;
  }
  (*node)[path.back()] = value;
}

struct Options {
  std::string config_path;
  std::string out_dir;
  std::vector<std::string> overrides;
  bool quiet = false;
  std::string source = "synthetic";
  std::string model = "student";
  std::string split = "heldout";
  std::size_t per_class = 8;
};

} // namespace

int main(int argc, char **argv) {
  CLI::App app{"Teacher-guided diffusion data synthesis and data-free distillation"};
  app.require_subcommand(1, 1);
  app.set_version_flag("--version", std::string(dfkd_version()));
  Options o;
  app.add_option("-c,--config", o.config_path, "Run config (JSON)")->check(CLI::ExistingFile);
  app.add_option("-o,--out", o.out_dir,
                 "Run directory (relative paths resolve under $DFKD_OUTPUT_ROOT)");
  app.add_option("--set", o.overrides, "Override a config key, e.g. synthesis.rounds=2");
  app.add_flag("-q,--quiet", o.quiet, "No progress messages");

  app.add_subcommand("train-teacher", "Train the teacher on the real training split");
  app.add_subcommand("train-diffusion", "Fit the codec and train the noise predictor");
  app.add_subcommand("generate", "Synthesize the dataset with guided denoising");
  auto *distill = app.add_subcommand("distill", "Distill the student from the teacher");
  distill->add_option("--source", o.source, "synthetic or noise")
      ->check(CLI::IsMember({"synthetic", "noise"}));
  auto *evaluate = app.add_subcommand("evaluate", "Accuracy on a real split");
  evaluate->add_option("--model", o.model, "student, teacher or noise-student")
      ->check(CLI::IsMember({"student", "teacher", "noise-student"}));
  evaluate->add_option("--split", o.split, "heldout or train")
      ->check(CLI::IsMember({"heldout", "train"}));
  app.add_subcommand("ablate-lca", "Compare latent augmentation arms");
  auto *visualize = app.add_subcommand("visualize", "Image grids of harvested samples");
  visualize->add_option("--per-class", o.per_class, "Rows per class grid")
      ->check(CLI::PositiveNumber);
  app.add_subcommand("run", "All stages from teacher training to evaluation");
  app.add_subcommand("show-config", "Print the resolved config");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp &e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp &e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion &e) {
    return app.exit(e);
  } catch (const CLI::ParseError &e) {
    error_record("cli", "usage", e.what(), kExitUsage);
    return kExitUsage;
  }
  const std::string stage = app.get_subcommands().front()->get_name();

  json cfg = json::object();
  try {
    if (!o.config_path.empty()) {
      std::ifstream f(o.config_path);
      cfg = json::parse(f, nullptr, true, true);
    }
    for (const auto &a : o.overrides)
      apply_override(cfg, a);
  } catch (const std::exception &e) {
    error_record(stage, "config", e.what(), kExitUsage);
    return kExitUsage;
  }

  dfkd_run *run = nullptr;
  const std::string text = cfg.dump();
  dfkd_status s = dfkd_run_open(text.c_str(), o.out_dir.empty() ? nullptr : o.out_dir.c_str(),
                                &run);
  if (s != DFKD_OK) {
    error_record(stage, dfkd_status_name(s), dfkd_last_error(), exit_code_for(s));
    return exit_code_for(s);
  }
  if (!o.quiet)
    dfkd_run_set_log(run, log_to_stderr, nullptr);

  if (stage == "show-config") {
    const char *resolved = nullptr;
    dfkd_run_config(run, &resolved);
    std::cout << resolved << std::endl;
    dfkd_run_close(run);
    return kExitOk;
  }

  if (stage == "train-teacher")
    s = dfkd_train_teacher(run);
  else if (stage == "train-diffusion")
    s = dfkd_train_diffusion(run);
  else if (stage == "generate")
    s = dfkd_generate(run);
  else if (stage == "distill")
    s = dfkd_distill(run, o.source == "noise" ? DFKD_SOURCE_NOISE : DFKD_SOURCE_SYNTHETIC);
  else if (stage == "evaluate") {
    const dfkd_eval_model m = o.model == "teacher"         ? DFKD_MODEL_TEACHER
                              : o.model == "noise-student" ? DFKD_MODEL_NOISE_STUDENT
                                                           : DFKD_MODEL_STUDENT;
    s = dfkd_evaluate(run, m, o.split == "train" ? DFKD_SPLIT_TRAIN : DFKD_SPLIT_HELDOUT,
                      nullptr);
  } else if (stage == "ablate-lca")
    s = dfkd_ablate_lca(run);
  else if (stage == "visualize")
    s = dfkd_visualize(run, o.per_class);
  else
    s = dfkd_run_all(run);

  int code = exit_code_for(s);
  if (s == DFKD_OK) {
    const char *result = nullptr;
    dfkd_run_last_result(run, &result);
    std::cout << result << std::endl;
  } else {
    error_record(stage, dfkd_status_name(s), dfkd_last_error(), code);
  }
  dfkd_run_close(run);
  return code;
}
