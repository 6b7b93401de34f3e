// SPDX-License-Identifier: Apache-2.0
// Exercises the shared library through its public header only.
#include "dfkd/dfkd.h"

#include <doctest.h>
#include <json.hpp>

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <string>
#include <vector>

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

const char *kTiny = R"({"seed": 5,
  "dataset": {"train_per_class": 30, "heldout_per_class": 10, "generator_per_class": 30},
  "teacher": {"epochs": 1, "accuracy_floor": 0},
  "diffusion": {"epochs": 1},
  "synthesis": {"rounds": 1, "batch_size": 4},
  "distillation": {"epochs": 1, "noise_baseline_count": 16}})";

fs::path fresh(const std::string &name) {
  const fs::path p = fs::temp_directory_path() / ("dfkd_capi_" + name);
  fs::remove_all(p);
  return p;
}

void collect(const char *msg, void *user) {
  static_cast<std::vector<std::string> *>(user)->push_back(msg);
}

} // namespace

TEST_CASE("library metadata") {
  CHECK(std::string(dfkd_version()).rfind("0.1.0", 0) == 0);
  CHECK(std::string(dfkd_status_name(DFKD_OK)) == "ok");
  CHECK(std::string(dfkd_status_name(DFKD_ERR_CONFIG)) != "ok");
  CHECK(std::string(dfkd_status_name(static_cast<dfkd_status>(77))).size() > 0);
}

TEST_CASE("guidance, clean-latent prediction and ancestral step") {
  const double c[2] = {0.3, -1.0}, u[2] = {0.1, 2.0};
  double out[2];
  REQUIRE(dfkd_guidance(c, u, 2, 3.0, out) == DFKD_OK);
  CHECK(out[0] == doctest::Approx(0.7));
  REQUIRE(dfkd_guidance(c, u, 2, 1.0, out) == DFKD_OK);
  CHECK(out[0] == c[0]);
  CHECK(out[1] == c[1]);
  CHECK(dfkd_guidance(c, u, 2, 0.5, out) != DFKD_OK);
  CHECK(dfkd_guidance(nullptr, u, 2, 2.0, out) == DFKD_ERR_INVALID_ARGUMENT);
  CHECK(std::string(dfkd_last_error()).size() > 0);

  const double z[1] = {2.0}, eps[1] = {0.0};
  REQUIRE(dfkd_predict_x0(z, eps, 1, 0.25, out) == DFKD_OK);
  CHECK(out[0] == doctest::Approx(4.0));
  CHECK(dfkd_predict_x0(z, eps, 1, 0.0, out) != DFKD_OK);

  const double x0[1] = {2.0}, noise[1] = {1.0};
  REQUIRE(dfkd_ancestral_step(x0, noise, 1, 0.25, out) == DFKD_OK);
  CHECK(out[0] == doctest::Approx(1.8660).epsilon(1e-4));
}

TEST_CASE("schedule and harvest enumeration with buffer sizing") {
  double a[11];
  REQUIRE(dfkd_schedule("cosine", 10, a, 11) == DFKD_OK);
  CHECK(a[0] == 1.0);
  for (int t = 1; t <= 10; ++t)
    CHECK(a[t] <= a[t - 1]);
  CHECK(dfkd_schedule("cosine", 10, a, 5) == DFKD_ERR_BUFFER_TOO_SMALL);
  CHECK(dfkd_schedule("quadratic", 10, a, 11) == DFKD_ERR_CONFIG);

  int k = 0;
  REQUIRE(dfkd_default_period(10, &k) == DFKD_OK);
  CHECK(k == 3);
  int ts[8];
  size_t n = 0;
  REQUIRE(dfkd_harvest_timesteps(10, k, ts, 8, &n) == DFKD_OK);
  REQUIRE(n == 4);
  CHECK(ts[0] == 9);
  CHECK(ts[3] == 0);
  CHECK(dfkd_harvest_timesteps(10, 1, ts, 8, &n) == DFKD_ERR_BUFFER_TOO_SMALL);
  CHECK(n == 10);
  CHECK(dfkd_harvest_timesteps(10, 11, ts, 8, &n) == DFKD_ERR_CONFIG);
}

TEST_CASE("run handles: config errors, resolved config and output directory") {
  dfkd_run *run = nullptr;
  CHECK(dfkd_run_open(R"({"sead": 1})", nullptr, &run) == DFKD_ERR_CONFIG);
  CHECK(run == nullptr);
  CHECK(std::string(dfkd_last_error()).find("sead") != std::string::npos);
  CHECK(dfkd_run_open("{ nope", nullptr, &run) == DFKD_ERR_CONFIG);
  CHECK(dfkd_run_open(nullptr, nullptr, nullptr) == DFKD_ERR_INVALID_ARGUMENT);
  CHECK(dfkd_run_open_file("/nonexistent/c.json", nullptr, &run) != DFKD_OK);

  const fs::path dir = fresh("handle");
  REQUIRE(dfkd_run_open(kTiny, dir.c_str(), &run) == DFKD_OK);
  const char *text = nullptr;
  REQUIRE(dfkd_run_config(run, &text) == DFKD_OK);
  CHECK(json::parse(text)["seed"] == 5);
  const char *hash = nullptr;
  REQUIRE(dfkd_run_config_hash(run, &hash) == DFKD_OK);
  CHECK(std::string(hash).size() == 16);
  const char *out = nullptr;
  REQUIRE(dfkd_run_output_dir(run, &out) == DFKD_OK);
  CHECK(fs::path(out) == dir);
  const char *last = nullptr;
  REQUIRE(dfkd_run_last_result(run, &last) == DFKD_OK);
  CHECK(std::string(last) == "{}");
  CHECK(dfkd_run_config(nullptr, &text) == DFKD_ERR_INVALID_ARGUMENT);
  CHECK(dfkd_visualize(run, 0) == DFKD_ERR_CONFIG);
  dfkd_run_close(run);
  dfkd_run_close(nullptr);
}

TEST_CASE("stages through the C interface, with status codes for failures") {
  const fs::path dir = fresh("stages");
  dfkd_run *run = nullptr;
  REQUIRE(dfkd_run_open(kTiny, dir.c_str(), &run) == DFKD_OK);
  std::vector<std::string> log;
  REQUIRE(dfkd_run_set_log(run, collect, &log) == DFKD_OK);

  CHECK(dfkd_generate(run) == DFKD_ERR_IO);
  CHECK(std::string(dfkd_last_error()).find("teacher") != std::string::npos);

  REQUIRE(dfkd_run_all(run) == DFKD_OK);
  CHECK_FALSE(log.empty());
  double acc = -1.0;
  REQUIRE(dfkd_evaluate(run, DFKD_MODEL_STUDENT, DFKD_SPLIT_HELDOUT, &acc) == DFKD_OK);
  CHECK((acc >= 0.0 && acc <= 1.0));
  const char *last = nullptr;
  REQUIRE(dfkd_run_last_result(run, &last) == DFKD_OK);
  CHECK(json::parse(last)["accuracy"].get<double>() == acc);
  CHECK(dfkd_evaluate(run, DFKD_MODEL_NOISE_STUDENT, DFKD_SPLIT_HELDOUT, nullptr) == DFKD_ERR_IO);
  CHECK(dfkd_distill(run, static_cast<dfkd_distill_source>(9)) == DFKD_ERR_INVALID_ARGUMENT);
  dfkd_run_close(run);

  // Same directory, different teacher settings: artifacts are refused.
  json j = json::parse(kTiny);
  j["teacher"]["epochs"] = 2;
  REQUIRE(dfkd_run_open(j.dump().c_str(), dir.c_str(), &run) == DFKD_OK);
  CHECK(dfkd_generate(run) == DFKD_ERR_CONFIG);
  CHECK(std::string(dfkd_last_error()).find("config-hash mismatch") != std::string::npos);
  dfkd_run_close(run);
}
