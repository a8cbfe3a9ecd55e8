#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "muxplm.h"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Config {
  muxplm_config* p = nullptr;
  Config() { REQUIRE(muxplm_config_new(&p) == MUXPLM_OK); }
  ~Config() { muxplm_config_free(p); }
  void set(const char* k, const std::string& v) { REQUIRE_MESSAGE(muxplm_config_set(p, k, v.c_str()) == MUXPLM_OK, std::string(muxplm_last_error())); }
};

std::string take(char* s) {
  std::string out = s ? s : "";
  muxplm_string_free(s);
  return out;
}

fs::path scratch(const std::string& name) {
  auto dir = fs::temp_directory_path() / "muxplm_test_capi" / name;
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

void tiny(Config& c, const fs::path& out) {
  c.set("out_dir", out.string());
  c.set("layers", "1");
  c.set("hidden", "16");
  c.set("heads", "2");
  c.set("ffn", "32");
  c.set("seq_len", "16");
  c.set("batch", "4");
  c.set("corpus_size", "64");
  c.set("eval_size", "32");
  c.set("steps", "6");
  c.set("log_every", "2");
  c.set("prefetch", "false");
}

json run(Config& c, const char* command) {
  char* summary = nullptr;
  const int rc = muxplm_run(c.p, command, nullptr, nullptr, &summary);
  REQUIRE_MESSAGE(rc == MUXPLM_OK, std::string(muxplm_last_error()));
  return json::parse(take(summary));
}

}  // namespace

TEST_CASE("status names and version") {
  CHECK(std::string(muxplm_status_name(MUXPLM_OK)) == "ok");
  CHECK(std::string(muxplm_status_name(MUXPLM_ERR_CONFIG)) == "config");
  CHECK(std::string(muxplm_status_name(99)) == "unknown");
  CHECK(std::string(muxplm_version()).rfind("0.1.0+", 0) == 0);
}

TEST_CASE("errors map to codes and set the last error") {
  Config c;
  CHECK(muxplm_config_set(c.p, "bogus", "1") == MUXPLM_ERR_CONFIG);
  CHECK(std::string(muxplm_last_error()).find("bogus") != std::string::npos);
  CHECK(muxplm_config_set(c.p, "n", "3") == MUXPLM_OK);
  CHECK(std::string(muxplm_last_error()).empty());
  CHECK(muxplm_config_set(nullptr, "n", "3") == MUXPLM_ERR_ARGUMENT);
  CHECK(muxplm_config_new(nullptr) == MUXPLM_ERR_ARGUMENT);
  CHECK(muxplm_run(c.p, "train", nullptr, nullptr, nullptr) == MUXPLM_ERR_CONFIG);

  muxplm_model* m = nullptr;
  CHECK(muxplm_model_load("/nonexistent.ckpt", &m) != MUXPLM_OK);
  CHECK(m == nullptr);

  const auto dir = scratch("errors");
  std::ofstream(dir / "junk.ckpt") << "not a checkpoint";
  CHECK(muxplm_model_load((dir / "junk.ckpt").c_str(), &m) == MUXPLM_ERR_FORMAT);
}

TEST_CASE("config round-trips through the handle") {
  Config c;
  c.set("mux", "contextual");
  char* v = nullptr;
  REQUIRE(muxplm_config_get(c.p, "mux", &v) == MUXPLM_OK);
  CHECK(take(v) == "contextual");
  REQUIRE(muxplm_config_get(c.p, "n", &v) == MUXPLM_OK);
  CHECK(take(v) == "2");

  char* keys = nullptr;
  REQUIRE(muxplm_config_keys(&keys) == MUXPLM_OK);
  const auto arr = json::parse(take(keys));
  CHECK(arr.size() > 40);
  CHECK(arr[0].contains("help"));

  char* cmds = nullptr;
  REQUIRE(muxplm_commands(&cmds) == MUXPLM_OK);
  CHECK(json::parse(take(cmds)).size() == 9);
}

TEST_CASE("pareto helper returns frontier indices") {
  const double thr[] = {1, 2, 3, 1.5};
  const double acc[] = {80, 75, 85, 70};
  size_t idx[4];
  size_t count = 0;
  REQUIRE(muxplm_pareto(thr, acc, 4, idx, &count) == MUXPLM_OK);
  REQUIRE(count == 1);
  CHECK(idx[0] == 2);

  const double thr2[] = {2, 1};
  const double acc2[] = {75, 80};
  REQUIRE(muxplm_pareto(thr2, acc2, 2, idx, &count) == MUXPLM_OK);
  REQUIRE(count == 2);
  CHECK(idx[0] == 1);
  CHECK(idx[1] == 0);

  CHECK(muxplm_pareto(thr, acc, 0, idx, &count) == MUXPLM_ERR_VALUE);
}

TEST_CASE("model handle forward, classify and save") {
  Config c;
  tiny(c, scratch("model"));
  muxplm_model* m = nullptr;
  REQUIRE(muxplm_model_create(c.p, &m) == MUXPLM_OK);
  char* info = nullptr;
  REQUIRE(muxplm_model_info(m, &info) == MUXPLM_OK);
  const auto j = json::parse(take(info));
  CHECK(j["n"] == 2);
  CHECK(j["hidden"] == 16);
  CHECK(j["stages"].empty());

  std::vector<int32_t> tokens(1 * 2 * 8, 65);
  std::vector<float> out(1 * 2 * 8 * 16);
  REQUIRE(muxplm_model_forward(m, tokens.data(), 1, 8, out.data(), out.size()) == MUXPLM_OK);
  CHECK(muxplm_model_forward(m, tokens.data(), 1, 8, out.data(), out.size() - 1) == MUXPLM_ERR_DIMENSION);

  int32_t cls = -1;
  REQUIRE(muxplm_model_classify(m, "hello", 16, &cls) == MUXPLM_OK);
  CHECK((cls == 0 || cls == 1));

  const auto path = scratch("model") / "m.ckpt";
  REQUIRE(muxplm_model_save(m, path.c_str()) == MUXPLM_OK);
  muxplm_model* back = nullptr;
  REQUIRE(muxplm_model_load(path.c_str(), &back) == MUXPLM_OK);
  std::vector<float> again(out.size());
  REQUIRE(muxplm_model_forward(back, tokens.data(), 1, 8, again.data(), again.size()) == MUXPLM_OK);
  CHECK(again == out);
  muxplm_model_free(back);
  muxplm_model_free(m);
}

TEST_CASE("three-stage pipeline through muxplm_run") {
  const auto dir = scratch("pipeline");
  Config c;
  tiny(c, dir);

  std::vector<std::string> lines;
  auto log = [](int, const char* msg, void* user) { static_cast<std::vector<std::string>*>(user)->push_back(msg); };
  char* summary = nullptr;
  REQUIRE_MESSAGE(muxplm_run(c.p, "prime", log, &lines, &summary) == MUXPLM_OK, std::string(muxplm_last_error()));
  auto s = json::parse(take(summary));
  CHECK(s["steps_run"] == 6);
  CHECK(!lines.empty());
  CHECK(fs::exists(dir / "prime.ckpt"));
  CHECK(fs::exists(dir / "prime.metrics.jsonl"));

  const auto manifest = json::parse(std::ifstream(dir / "prime.manifest.json"));
  CHECK(manifest["command"] == "prime");
  CHECK(manifest["config"]["hidden"] == "16");
  CHECK(manifest["seeds"].contains("corruption"));
  CHECK(manifest["version"] == muxplm_version());

  // finetune before pretrain is rejected
  c.set("init", (dir / "prime.ckpt").string());
  CHECK(muxplm_run(c.p, "finetune", nullptr, nullptr, nullptr) == MUXPLM_ERR_STAGE_ORDER);

  run(c, "pretrain");
  c.set("init", (dir / "pretrain.ckpt").string());
  run(c, "finetune");
  c.set("init", (dir / "finetune.ckpt").string());

  s = run(c, "eval");
  CHECK(s["objective"] == "seq_cls");
  CHECK(s["accuracy"].get<double>() >= 0.0);
  CHECK(fs::exists(dir / "eval.report.csv"));

  c.set("ensemble_m", "2");
  s = run(c, "ensemble-eval");
  CHECK(s["m"] == 2);

  s = run(c, "muxology");
  CHECK(s["activation"].size() == 1);
  CHECK(s["entropy_unit"] == "nats");

  muxplm_model* m = nullptr;
  REQUIRE(muxplm_model_load((dir / "finetune.ckpt").c_str(), &m) == MUXPLM_OK);
  char* info = nullptr;
  REQUIRE(muxplm_model_info(m, &info) == MUXPLM_OK);
  CHECK(json::parse(take(info))["stages"].size() == 3);
  muxplm_model_free(m);
}

TEST_CASE("pareto, bench and seed-sweep commands") {
  const auto dir = scratch("analysis");
  {
    std::ofstream pts(dir / "points.csv");
    pts << "throughput,accuracy,label\n1,80,a\n2,75,b\n3,85,c\n";
  }
  Config c;
  tiny(c, dir);
  c.set("points", (dir / "points.csv").string());
  c.set("svg", (dir / "front.svg").string());
  auto s = run(c, "pareto");
  REQUIRE(s["frontier"].size() == 1);
  CHECK(s["frontier"][0]["label"] == "c");
  CHECK(fs::exists(dir / "front.svg"));
  std::ifstream csv(dir / "pareto.frontier.csv");
  std::stringstream ss;
  ss << csv.rdbuf();
  CHECK(ss.str() == "throughput,accuracy,label\n3,85,c\n");

  c.set("bench_batch", "4");
  c.set("bench_seq_len", "8");
  c.set("bench_batches", "2");
  c.set("bench_trials", "2");
  c.set("bench_warmup", "1");
  c.set("bench_widths", "2");
  s = run(c, "bench");
  CHECK(s["speedup"].contains("rsa_N2"));
  CHECK(s["speedup"].contains("prefix_N2"));
  CHECK(fs::exists(dir / "bench.throughput.jsonl"));

  c.set("sweep_seeds", "1,2");
  CHECK(muxplm_run(c.p, "seed-sweep", nullptr, nullptr, nullptr) == MUXPLM_ERR_STAGE_ORDER);
  c.set("allow_out_of_order", "true");
  s = run(c, "seed-sweep");
  CHECK(s["metrics"].size() == 2);
  CHECK(s["delta"].get<double>() >= 0.0);
}
