// SPDX-License-Identifier: Apache-2.0
// Runs the command-line binary and checks exit codes and output records.
#include <doctest.h>
#include <json.hpp>

#include <array>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <sys/wait.h>

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Result {
  int code = -1;
  std::string out;
  std::string err;
};

fs::path scratch() {
  static const fs::path p = [] {
    const fs::path d = fs::temp_directory_path() / "dfkd_cli_test";
    fs::remove_all(d);
    fs::create_directories(d);
    std::ofstream(d / "tiny.json") << R"({"seed": 5,
      "dataset": {"train_per_class": 30, "heldout_per_class": 10, "generator_per_class": 30},
      "teacher": {"epochs": 1, "accuracy_floor": 0},
      "diffusion": {"epochs": 1},
      "synthesis": {"rounds": 1, "batch_size": 4},
      "distillation": {"epochs": 1, "noise_baseline_count": 16}})";
    return d;
  }();
  return p;
}

std::string read_all(const fs::path &p) {
  std::ifstream f(p);
  return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

Result run(const std::string &args) {
  const fs::path out = scratch() / "stdout.txt", err = scratch() / "stderr.txt";
  const std::string cmd = std::string(DFKD_CLI_PATH) + " " + args + " > " + out.string() +
                          " 2> " + err.string();
  const int status = std::system(cmd.c_str());
  Result r;
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  r.out = read_all(out);
  r.err = read_all(err);
  return r;
}

json last_json_line(const std::string &text) {
  std::string line, last;
  std::istringstream is(text);
  while (std::getline(is, line))
    if (!line.empty() && line[0] == '{')
      last = line;
  return json::parse(last);
}

std::string common() {
  return "-q -c " + (scratch() / "tiny.json").string() + " -o " + (scratch() / "run").string();
}

} // namespace

TEST_CASE("usage errors exit with 2 and a JSON error record") {
  Result r = run("");
  CHECK(r.code == 2);
  r = run("frobnicate");
  CHECK(r.code == 2);
  CHECK(last_json_line(r.err)["status"] == "error");
  r = run(common() + " --set synthesis.lca_period=99 show-config");
  CHECK(r.code == 2);
  const json e = last_json_line(r.err);
  CHECK(e["code"] == "config");
  CHECK(e["exit_code"] == 2);
  CHECK(e["stage"] == "show-config");
  r = run(common() + " --set synthesis.bogus=1 show-config");
  CHECK(r.code == 2);
  r = run(common() + " distill --source rainbow");
  CHECK(r.code == 2);
}

TEST_CASE("show-config prints the resolved config with overrides applied") {
  const Result r = run(common() + " --set synthesis.guidance_scale=4.5 show-config");
  REQUIRE(r.code == 0);
  CHECK(json::parse(r.out)["synthesis"]["guidance_scale"] == 4.5);
}

TEST_CASE("missing artifacts exit with 1, a full run exits with 0") {
  Result r = run(common() + " generate");
  CHECK(r.code == 1);
  const json e = last_json_line(r.err);
  CHECK(e["code"] == "io");
  CHECK(e["stage"] == "generate");
  CHECK(e["message"].get<std::string>().find("train-teacher") != std::string::npos);

  r = run(common() + " run");
  REQUIRE(r.code == 0);
  CHECK(last_json_line(r.out).is_object());
  r = run(common() + " evaluate --model teacher --split train");
  REQUIRE(r.code == 0);
  const json ev = last_json_line(r.out);
  CHECK(ev["model"] == "teacher");
  CHECK(ev["split"] == "train");

  // Changing an upstream setting makes the existing artifacts stale.
  r = run(common() + " --set teacher.epochs=2 generate");
  CHECK(r.code == 2);
  CHECK(last_json_line(r.err)["message"].get<std::string>().find("config-hash mismatch") !=
        std::string::npos);
}

TEST_CASE("version flag") {
  const Result r = run("--version");
  CHECK(r.code == 0);
  CHECK(r.out.find("0.1.0") != std::string::npos);
}
