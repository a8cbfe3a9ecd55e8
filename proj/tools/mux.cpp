#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <map>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "muxplm.h"

namespace {

enum Exit { kOk = 0, kRuntime = 1, kUsage = 2, kBadInput = 3 };

int log_threshold() {
  const char* env = std::getenv("MUX_LOG");
  if (!env) return MUXPLM_LOG_INFO;
  const std::string v = env;
  if (v == "error") return MUXPLM_LOG_ERROR;
  if (v == "warn") return MUXPLM_LOG_WARN;
  if (v == "debug") return MUXPLM_LOG_DEBUG;
  return MUXPLM_LOG_INFO;
}

void log_line(int level, const char* message, void* user) {
  if (level > *static_cast<int*>(user)) return;
  static const char* names[] = {"error", "warn", "info", "debug"};
  std::fprintf(stderr, "[%s] %s\n", names[level < 0 || level > 3 ? 2 : level], message);
}

int exit_for(int status) {
  switch (status) {
    case MUXPLM_OK: return kOk;
    case MUXPLM_ERR_CONFIG:
    case MUXPLM_ERR_FORMAT:
    case MUXPLM_ERR_STAGE_ORDER:
    case MUXPLM_ERR_VALUE:
    case MUXPLM_ERR_DIMENSION: return kBadInput;
    default: return kRuntime;
  }
}

int fail(int status) {
  std::fprintf(stderr, "mux: %s error: %s\n", muxplm_status_name(status), muxplm_last_error());
  return exit_for(status);
}

struct Options {
  std::vector<std::string> configs;
  std::vector<std::string> sets;
  // flag name -> config key, in application order
  std::vector<std::pair<std::string, std::string>> flags;
  std::map<std::string, std::string> values;
};

void add_flag(CLI::App* sub, Options& o, const std::string& flag, const std::string& key, const std::string& help) {
  o.flags.emplace_back(flag, key);
  sub->add_option("--" + flag, o.values[flag], help + " (" + key + ")");
}

void add_common(CLI::App* sub, Options& o) {
  sub->add_option("-c,--config", o.configs, "key = value config file; repeat to layer files")->check(CLI::ExistingFile);
  sub->add_option("-s,--set", o.sets, "override one key, key=value; repeatable, applied last");
  add_flag(sub, o, "out-dir", "out_dir", "artifact directory");
  add_flag(sub, o, "seed", "seed", "base seed");
  add_flag(sub, o, "size", "size", "micro, small, base, large or bench");
  add_flag(sub, o, "n", "n", "multiplexing width");
  add_flag(sub, o, "mux", "mux", "gaussian, contextual or none");
  add_flag(sub, o, "demux", "demux", "rsa, prefix or none");
}

int build_config(const Options& o, const CLI::App* sub, muxplm_config** out) {
  int rc = muxplm_config_new(out);
  if (rc) return rc;
  for (const auto& path : o.configs) {
    if ((rc = muxplm_config_load(*out, path.c_str()))) return rc;
  }
  for (const auto& [flag, key] : o.flags) {
    if (sub->count("--" + flag) == 0) continue;
    if ((rc = muxplm_config_set(*out, key.c_str(), o.values.at(flag).c_str()))) return rc;
  }
  for (const auto& kv : o.sets) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) {
      std::fprintf(stderr, "mux: --set expects key=value, got '%s'\n", kv.c_str());
      return -1;
    }
    if ((rc = muxplm_config_set(*out, kv.substr(0, eq).c_str(), kv.substr(eq + 1).c_str()))) return rc;
  }
  return MUXPLM_OK;
}

int print_keys() {
  char* json = nullptr;
  const int rc = muxplm_config_keys(&json);
  if (rc) return fail(rc);
  std::printf("%s\n", json);
  muxplm_string_free(json);
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Data-multiplexed language model toolkit"};
  app.set_version_flag("--version", std::string(muxplm_version()));
  app.require_subcommand(1);

  struct Command {
    const char* name;
    const char* help;
  };
  const Command commands[] = {
      {"prime", "train the token-retrieval priming stage"},
      {"pretrain", "pretrain with MLM, RTD or the mixed objective"},
      {"finetune", "fine-tune a sentence or token classifier"},
      {"eval", "score a checkpoint on the held-out split"},
      {"ensemble-eval", "classify with m distinct instances per group"},
      {"bench", "time inference throughput against the N=1 backbone"},
      {"pareto", "non-dominated throughput/accuracy points from a CSV"},
      {"muxology", "per-layer activation and attention entropy"},
      {"seed-sweep", "fine-tune and score across composition seeds"},
  };

  std::map<std::string, Options> options;
  std::map<std::string, CLI::App*> subs;
  for (const auto& c : commands) {
    auto* sub = app.add_subcommand(c.name, c.help);
    auto& o = options[c.name];
    add_common(sub, o);
    subs[c.name] = sub;
  }
  for (const char* name : {"prime", "pretrain", "finetune", "seed-sweep"}) {
    add_flag(subs[name], options[name], "steps", "steps", "update steps");
    add_flag(subs[name], options[name], "objective", "objective", "training objective");
  }
  for (const char* name : {"pretrain", "finetune", "eval", "ensemble-eval", "muxology", "seed-sweep"}) {
    add_flag(subs[name], options[name], "init", "init", "checkpoint to start from");
  }
  for (const char* name : {"prime", "pretrain", "finetune"}) {
    add_flag(subs[name], options[name], "checkpoint", "checkpoint", "checkpoint to write");
  }
  add_flag(subs["ensemble-eval"], options["ensemble-eval"], "m", "ensemble_m", "distinct instances per group");
  add_flag(subs["pareto"], options["pareto"], "in", "points", "CSV of throughput,accuracy[,label]");
  add_flag(subs["pareto"], options["pareto"], "svg", "svg", "scatter plot output");
  add_flag(subs["bench"], options["bench"], "widths", "bench_widths", "comma-separated N values");
  add_flag(subs["seed-sweep"], options["seed-sweep"], "seeds", "sweep_seeds", "comma-separated composition seeds");

  app.add_subcommand("keys", "print every config key as JSON");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kUsage;
  }

  if (app.got_subcommand("keys")) return print_keys();

  for (const auto& [name, sub] : subs) {
    if (!sub->parsed()) continue;
    muxplm_config* cfg = nullptr;
    int rc = build_config(options[name], sub, &cfg);
    if (rc) {
      muxplm_config_free(cfg);
      return rc < 0 ? kUsage : fail(rc);
    }
    int threshold = log_threshold();
    char* summary = nullptr;
    rc = muxplm_run(cfg, name.c_str(), log_line, &threshold, &summary);
    muxplm_config_free(cfg);
    if (rc) return fail(rc);
    std::printf("%s\n", summary);
    muxplm_string_free(summary);
    return kOk;
  }
  return kUsage;
}
