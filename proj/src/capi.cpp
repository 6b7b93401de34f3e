// SPDX-License-Identifier: Apache-2.0
#include "dfkd/dfkd.h"

#include "checkpoint.hpp"
#include "harness.hpp"

#include <cmath>
#include <memory>
#include <string>

using dfkd::Pipeline;
using dfkd::RunConfig;
using nlohmann::json;

struct dfkd_run {
  std::unique_ptr<Pipeline> pipeline;
  std::string config_text;
  std::string hash;
  std::string dir;
  std::string last_result = "{}";
  dfkd_log_fn log_fn = nullptr;
  void *log_user = nullptr;
};

namespace {

thread_local std::string g_last_error;

dfkd_status fail(dfkd_status s, const std::string &msg) {
  g_last_error = msg;
  return s;
}

/// Runs `f`, mapping library exceptions to status codes.
template <class F> dfkd_status guarded(F &&f) {
  try {
    return f();
  } catch (const dfkd::ConfigError &e) {
    return fail(DFKD_ERR_CONFIG, e.what());
  } catch (const dfkd::IoError &e) {
    return fail(DFKD_ERR_IO, e.what());
  } catch (const dfkd::NumericError &e) {
    return fail(DFKD_ERR_NUMERIC, e.what());
  } catch (const dfkd::TrainingError &e) {
    return fail(DFKD_ERR_TRAINING, e.what());
  } catch (const dfkd::ContractError &e) {
    return fail(DFKD_ERR_CONTRACT, e.what());
  } catch (const json::exception &e) {
    return fail(DFKD_ERR_CONFIG, e.what());
  } catch (const std::bad_alloc &) {
    return fail(DFKD_ERR_INTERNAL, "out of memory");
  } catch (const std::exception &e) {
    return fail(DFKD_ERR_INTERNAL, e.what());
  } catch (...) {
    return fail(DFKD_ERR_INTERNAL, "unknown error");
  }
}

dfkd_status open_with(RunConfig cfg, const char *output_dir, dfkd_run **out) {
  if (output_dir)
    cfg.output_dir = output_dir;
  if (cfg.output_dir.empty())
    return fail(DFKD_ERR_INVALID_ARGUMENT, "output directory is empty");
  auto run = std::make_unique<dfkd_run>();
  run->dir = dfkd::resolve_output_dir(cfg.output_dir).string();
  run->pipeline = std::make_unique<Pipeline>(cfg, run->dir);
  run->config_text = run->pipeline->config().to_json().dump(2);
  run->hash = run->pipeline->config().hash();
  dfkd_run *raw = run.get();
  run->pipeline->set_log([raw](const std::string &m) {
    if (raw->log_fn)
      raw->log_fn(m.c_str(), raw->log_user);
  });
  *out = run.release();
  return DFKD_OK;
}

template <class F> dfkd_status stage(dfkd_run *run, F &&f) {
  if (!run)
    return fail(DFKD_ERR_INVALID_ARGUMENT, "run handle is null");
  return guarded([&] {
    const dfkd::StageOutcome o = f(*run->pipeline);
    run->last_result = o.summary.dump();
    return DFKD_OK;
  });
}

bool bad_buffers(std::initializer_list<const void *> ptrs) {
  for (const void *p : ptrs)
    if (!p)
      return true;
  return false;
}

} // namespace

extern "C" {

const char *dfkd_version(void) { return dfkd::version_tag(); }

const char *dfkd_status_name(dfkd_status s) {
  switch (s) {
  case DFKD_OK: return "ok";
  case DFKD_ERR_INVALID_ARGUMENT: return "invalid_argument";
  case DFKD_ERR_CONFIG: return "config";
  case DFKD_ERR_IO: return "io";
  case DFKD_ERR_NUMERIC: return "numeric";
  case DFKD_ERR_CONTRACT: return "contract";
  case DFKD_ERR_TRAINING: return "training";
  case DFKD_ERR_BUFFER_TOO_SMALL: return "buffer_too_small";
  case DFKD_ERR_INTERNAL: return "internal";
  }
  return "unknown";
}

const char *dfkd_last_error(void) { return g_last_error.c_str(); }

dfkd_status dfkd_run_open(const char *config_json, const char *output_dir,
                          dfkd_run **out) {
  if (!out)
    return fail(DFKD_ERR_INVALID_ARGUMENT, "out handle pointer is null");
  *out = nullptr;
  return guarded([&] {
    RunConfig cfg = RunConfig::defaults();
    if (config_json && *config_json) {
      json j;
      try {
        j = json::parse(config_json, nullptr, true, true);
      } catch (const json::parse_error &e) {
        return fail(DFKD_ERR_CONFIG, std::string("config is not valid JSON: ") + e.what());
      }
      cfg = RunConfig::from_json(j);
    }
    return open_with(cfg, output_dir, out);
  });
}

dfkd_status dfkd_run_open_file(const char *config_path, const char *output_dir,
                               dfkd_run **out) {
  if (!out || !config_path)
    return fail(DFKD_ERR_INVALID_ARGUMENT, "null argument");
  *out = nullptr;
  return guarded([&] { return open_with(RunConfig::load(config_path), output_dir, out); });
}

void dfkd_run_close(dfkd_run *run) { delete run; }

dfkd_status dfkd_run_set_log(dfkd_run *run, dfkd_log_fn fn, void *user) {
  if (!run)
    return fail(DFKD_ERR_INVALID_ARGUMENT, "run handle is null");
  run->log_fn = fn;
  run->log_user = user;
  return DFKD_OK;
}

dfkd_status dfkd_run_config(dfkd_run *run, const char **json_out) {
  if (!run || !json_out)
    return fail(DFKD_ERR_INVALID_ARGUMENT, "null argument");
  *json_out = run->config_text.c_str();
  return DFKD_OK;
}

dfkd_status dfkd_run_config_hash(dfkd_run *run, const char **hash_out) {
  if (!run || !hash_out)
    return fail(DFKD_ERR_INVALID_ARGUMENT, "null argument");
  *hash_out = run->hash.c_str();
  return DFKD_OK;
}

dfkd_status dfkd_run_output_dir(dfkd_run *run, const char **dir_out) {
  if (!run || !dir_out)
    return fail(DFKD_ERR_INVALID_ARGUMENT, "null argument");
  *dir_out = run->dir.c_str();
  return DFKD_OK;
}

dfkd_status dfkd_train_teacher(dfkd_run *run) {
  return stage(run, [](Pipeline &p) { return p.train_teacher(); });
}

dfkd_status dfkd_train_diffusion(dfkd_run *run) {
  return stage(run, [](Pipeline &p) { return p.train_diffusion(); });
}

dfkd_status dfkd_generate(dfkd_run *run) {
  return stage(run, [](Pipeline &p) { return p.generate(); });
}

dfkd_status dfkd_distill(dfkd_run *run, dfkd_distill_source source) {
  if (source != DFKD_SOURCE_SYNTHETIC && source != DFKD_SOURCE_NOISE)
    return fail(DFKD_ERR_INVALID_ARGUMENT, "unknown distillation source");
  return stage(run, [source](Pipeline &p) {
    return p.distill(source == DFKD_SOURCE_NOISE ? dfkd::DistillSource::Noise
                                                 : dfkd::DistillSource::Synthetic);
  });
}

dfkd_status dfkd_evaluate(dfkd_run *run, dfkd_eval_model model, dfkd_eval_split split,
                          double *accuracy_out) {
  dfkd::EvalModel m;
  switch (model) {
  case DFKD_MODEL_STUDENT: m = dfkd::EvalModel::Student; break;
  case DFKD_MODEL_TEACHER: m = dfkd::EvalModel::Teacher; break;
  case DFKD_MODEL_NOISE_STUDENT: m = dfkd::EvalModel::NoiseStudent; break;
  default: return fail(DFKD_ERR_INVALID_ARGUMENT, "unknown model");
  }
  if (split != DFKD_SPLIT_HELDOUT && split != DFKD_SPLIT_TRAIN)
    return fail(DFKD_ERR_INVALID_ARGUMENT, "unknown split");
  const auto sp = split == DFKD_SPLIT_TRAIN ? dfkd::EvalSplit::Train
                                            : dfkd::EvalSplit::Heldout;
  double acc = 0.0;
  const dfkd_status s = stage(run, [&](Pipeline &p) {
    auto o = p.evaluate(m, sp);
    acc = o.summary["accuracy"].get<double>();
    return o;
  });
  if (s == DFKD_OK && accuracy_out)
    *accuracy_out = acc;
  return s;
}

dfkd_status dfkd_ablate_lca(dfkd_run *run) {
  return stage(run, [](Pipeline &p) { return p.ablate_lca(); });
}

dfkd_status dfkd_visualize(dfkd_run *run, size_t per_class) {
  return stage(run, [per_class](Pipeline &p) { return p.visualize(per_class); });
}

dfkd_status dfkd_run_all(dfkd_run *run) {
  return stage(run, [](Pipeline &p) {
    const auto all = p.run_all();
    json s = json::object();
    for (const auto &o : all)
      s[dfkd::to_string(o.stage)] = o.summary;
    return dfkd::StageOutcome{all.back().stage, s};
  });
}

dfkd_status dfkd_run_last_result(dfkd_run *run, const char **json_out) {
  if (!run || !json_out)
    return fail(DFKD_ERR_INVALID_ARGUMENT, "null argument");
  *json_out = run->last_result.c_str();
  return DFKD_OK;
}

dfkd_status dfkd_guidance(const double *eps_cond, const double *eps_uncond, size_t n,
                          double scale, double *out) {
  if (bad_buffers({eps_cond, eps_uncond, out}) || n == 0)
    return fail(DFKD_ERR_INVALID_ARGUMENT, "null buffer or empty tensor");
  if (!(scale >= 1.0))
    return fail(DFKD_ERR_INVALID_ARGUMENT, "guidance scale must be >= 1");
  return guarded([&] {
    const dfkd::Tensor c({n}, std::vector<double>(eps_cond, eps_cond + n));
    const dfkd::Tensor u({n}, std::vector<double>(eps_uncond, eps_uncond + n));
    dfkd::GuidanceSpec g;
    g.scale = scale;
    const dfkd::Tensor r = dfkd::classifier_free_noise(c, u, g);
    std::copy(r.data(), r.data() + n, out);
    return DFKD_OK;
  });
}

dfkd_status dfkd_predict_x0(const double *z_t, const double *eps, size_t n,
                            double alpha_t, double *out) {
  if (bad_buffers({z_t, eps, out}) || n == 0)
    return fail(DFKD_ERR_INVALID_ARGUMENT, "null buffer or empty tensor");
  return guarded([&] {
    const dfkd::Tensor z({n}, std::vector<double>(z_t, z_t + n));
    const dfkd::Tensor e({n}, std::vector<double>(eps, eps + n));
    const dfkd::Tensor r = dfkd::predict_x0(z, e, alpha_t);
    std::copy(r.data(), r.data() + n, out);
    return DFKD_OK;
  });
}

dfkd_status dfkd_ancestral_step(const double *x0, const double *noise, size_t n,
                                double alpha_prev, double *out) {
  if (bad_buffers({x0, noise, out}) || n == 0)
    return fail(DFKD_ERR_INVALID_ARGUMENT, "null buffer or empty tensor");
  return guarded([&] {
    const dfkd::Tensor x({n}, std::vector<double>(x0, x0 + n));
    const dfkd::Tensor e({n}, std::vector<double>(noise, noise + n));
    const dfkd::Tensor r = dfkd::ancestral_step(x, alpha_prev, e);
    std::copy(r.data(), r.data() + n, out);
    return DFKD_OK;
  });
}

dfkd_status dfkd_schedule(const char *kind, int num_steps, double *out,
                          size_t capacity) {
  if (!kind || !out)
    return fail(DFKD_ERR_INVALID_ARGUMENT, "null argument");
  return guarded([&] {
    if (num_steps < 1)
      return fail(DFKD_ERR_INVALID_ARGUMENT, "num_steps must be >= 1");
    const auto s = dfkd::NoiseSchedule::make(dfkd::parse_schedule_kind(kind), num_steps);
    const auto &a = s.alpha_bars();
    if (capacity < a.size())
      return fail(DFKD_ERR_BUFFER_TOO_SMALL,
                  "schedule needs " + std::to_string(a.size()) + " entries");
    std::copy(a.begin(), a.end(), out);
    return DFKD_OK;
  });
}

dfkd_status dfkd_default_period(int num_steps, int *period_out) {
  if (!period_out)
    return fail(DFKD_ERR_INVALID_ARGUMENT, "null argument");
  if (num_steps < 1)
    return fail(DFKD_ERR_INVALID_ARGUMENT, "num_steps must be >= 1");
  *period_out = dfkd::default_lca_period(num_steps);
  return DFKD_OK;
}

dfkd_status dfkd_harvest_timesteps(int num_steps, int period, int *out,
                                   size_t capacity, size_t *count_out) {
  if (!count_out || (!out && capacity))
    return fail(DFKD_ERR_INVALID_ARGUMENT, "null argument");
  return guarded([&] {
    const auto h = dfkd::harvest_timesteps(num_steps, period);
    *count_out = h.size();
    if (capacity < h.size())
      return fail(DFKD_ERR_BUFFER_TOO_SMALL,
                  "harvest set has " + std::to_string(h.size()) + " entries");
    std::copy(h.begin(), h.end(), out);
    return DFKD_OK;
  });
}

} // extern "C"
