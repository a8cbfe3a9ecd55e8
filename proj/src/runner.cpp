#include "muxplm/runner.hpp"

#include <algorithm>
#include <fstream>

#include <json.hpp>

#include "muxplm/errors.hpp"
#include "muxplm/vocab.hpp"

#ifndef MUXPLM_VERSION
#define MUXPLM_VERSION "0.0.0"
#endif
#ifndef MUXPLM_GIT_REVISION
#define MUXPLM_GIT_REVISION "unknown"
#endif

namespace muxplm {

using json = nlohmann::json;

const std::vector<std::string>& command_names() {
  static const std::vector<std::string> names = {"prime",    "pretrain", "finetune", "eval",      "ensemble-eval",
                                                 "bench",    "pareto",   "muxology", "seed-sweep"};
  return names;
}

std::string library_version() { return std::string(MUXPLM_VERSION) + "+" + MUXPLM_GIT_REVISION; }

namespace {

struct Context {
  std::string command;
  const RunConfig& cfg;
  LogFn log;
  std::filesystem::path out_dir;
  json summary = json::object();
  json artifacts = json::array();

  void say(LogLevel level, const std::string& msg) const {
    if (log) log(level, msg);
  }
  std::filesystem::path artifact(const std::string& suffix) {
    auto p = out_dir / (command + suffix);
    artifacts.push_back(p.string());
    return p;
  }
  void write(const std::filesystem::path& p, const std::string& text) {
    std::ofstream out(p, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot write " + p.string());
    out << text;
    if (!out) throw Error("short write on " + p.string());
  }
};

TrainState starting_state(Context& ctx, const Dataset& data) {
  if (ctx.cfg.has("init")) {
    ctx.say(LogLevel::info, "loading " + ctx.cfg.get("init"));
    return load_checkpoint(ctx.cfg.get("init"));
  }
  const std::size_t classes = std::max<std::size_t>(2, data.num_classes);
  const std::size_t tags = std::max<std::size_t>(3, data.num_tags);
  return new_train_state(model_spec(ctx.cfg, classes, tags), seeds(ctx.cfg));
}

void require_init(const Context& ctx) {
  if (!ctx.cfg.has("init")) throw ConfigError(ctx.command + " needs a checkpoint: set init = <path> or pass --init");
}

json seeds_json(const Seeds& s) { return {{"init", s.init}, {"data", s.data}, {"corruption", s.corruption}}; }

void train(Context& ctx, Stage stage) {
  const auto task = task_for(ctx.cfg, stage);
  const auto data = train_dataset(ctx.cfg, task);
  auto state = starting_state(ctx, data);
  const auto plan = stage_plan(ctx.cfg, stage);
  ctx.say(LogLevel::info, std::string(to_string(stage)) + ": " + std::to_string(plan.steps) + " steps of " +
                              std::string(to_string(plan.objective)) + " on " + std::to_string(data.size()) + " examples, N=" +
                              std::to_string(state.model.n()));
  const auto metrics_path = ctx.artifact(".metrics.jsonl");
  std::ofstream metrics(metrics_path, std::ios::trunc);
  if (!metrics) throw Error("cannot write " + metrics_path.string());
  auto result = run_stage(state, plan, data, [&](const MetricRecord& r) {
    metrics << to_json_line(r) << "\n";
    metrics.flush();
    ctx.say(LogLevel::debug, to_json_line(r));
  });
  const std::filesystem::path ckpt = ctx.cfg.has("checkpoint") ? std::filesystem::path(ctx.cfg.get("checkpoint")) : ctx.out_dir / (ctx.command + ".ckpt");
  save_checkpoint(state, ckpt);
  ctx.artifacts.push_back(ckpt.string());
  ctx.summary["steps_run"] = result.steps_run;
  ctx.summary["stopped_on_plateau"] = result.stopped_on_plateau;
  ctx.summary["checkpoint"] = ckpt.string();
  ctx.summary["seeds"] = seeds_json(state.seeds);
  if (!result.log.empty()) {
    ctx.summary["final_loss"] = result.log.back().loss;
    ctx.summary["final_accuracy"] = result.log.back().accuracy;
  }
}

Objective eval_objective(const RunConfig& cfg, TaskKind task) {
  if (cfg.has("objective")) return parse_objective(cfg.get("objective"));
  switch (task) {
    case TaskKind::seq: return Objective::seq_cls;
    case TaskKind::token: return Objective::token_cls;
    case TaskKind::text: break;
  }
  return Objective::retrieval;
}

void run_eval(Context& ctx) {
  require_init(ctx);
  const auto state = load_checkpoint(ctx.cfg.get("init"));
  auto task = TaskKind::text;
  if (ctx.cfg.has("task")) {
    task = parse_task(ctx.cfg.get("task"));
  } else if (!state.history.empty()) {
    const auto last = state.history.back().objective;
    if (last == Objective::seq_cls) task = TaskKind::seq;
    if (last == Objective::token_cls) task = TaskKind::token;
  }
  const auto data = eval_dataset(ctx.cfg, task);
  const auto objective = eval_objective(ctx.cfg, task);
  const auto r = evaluate(state.model, data, objective, ctx.cfg.get_size("batch"), ctx.cfg.get_size("seq_len"),
                          ctx.cfg.get_size("eval_seed"), ctx.cfg.get_float("mask_rate"));
  ctx.summary["objective"] = std::string(to_string(objective));
  ctx.summary["loss"] = r.loss;
  ctx.summary["accuracy"] = r.accuracy;
  ctx.summary["scored"] = r.scored;
  std::vector<ReportRow> rows{{ctx.command, state.model.n(), state.model.spec.size_name, "loss", r.loss},
                              {ctx.command, state.model.n(), state.model.spec.size_name, "accuracy", r.accuracy}};
  ctx.write(ctx.artifact(".report.csv"), to_csv(rows));
  ctx.write(ctx.artifact(".report.jsonl"), to_jsonl(rows));
}

void run_ensemble(Context& ctx) {
  require_init(ctx);
  const auto state = load_checkpoint(ctx.cfg.get("init"));
  const auto data = eval_dataset(ctx.cfg, TaskKind::seq);
  EnsembleOptions o;
  o.m = ctx.cfg.get_size("ensemble_m");
  o.permute = ctx.cfg.get_bool("ensemble_permute");
  const auto r = ensemble_evaluate(state.model, data, ctx.cfg.get_size("seq_len"), o, ctx.cfg.get_size("eval_seed"), ctx.cfg.get_size("batch"));
  ctx.summary["m"] = o.m;
  ctx.summary["accuracy"] = r.accuracy;
  ctx.summary["scored"] = r.scored;
  std::vector<ReportRow> rows{{ctx.command + ":m=" + std::to_string(o.m), state.model.n(), state.model.spec.size_name, "accuracy", r.accuracy}};
  ctx.write(ctx.artifact(".report.csv"), to_csv(rows));
  ctx.write(ctx.artifact(".report.jsonl"), to_jsonl(rows));
}

void run_bench(Context& ctx) {
  const auto opts = throughput_options(ctx.cfg);
  RunConfig base_cfg = ctx.cfg;
  base_cfg.set("max_seq_len", std::to_string(opts.seq_len + vocab::kMaxMuxWidth));
  base_cfg.set("dropout", "0");
  base_cfg.set("attention_dropout", "0");
  auto widths = ctx.cfg.get_list("bench_widths");
  if (widths.empty()) throw ConfigError("bench_widths is empty");
  const std::uint64_t init = seeds(ctx.cfg).init;

  auto build = [&](const std::string& mux, const std::string& demux, std::uint64_t n) {
    RunConfig c = base_cfg;
    c.set("mux", mux);
    c.set("demux", demux);
    c.set("n", std::to_string(n));
    return init_model<float>(model_spec(c), init);
  };
  std::vector<ThroughputReport> reports;
  std::vector<ReportRow> rows;
  const auto size = ctx.cfg.get("size");
  auto time_one = [&](const std::string& id, const MuxModel<float>& model) {
    ctx.say(LogLevel::info, "timing " + id);
    reports.push_back(measure_model_throughput(model, id, opts, derive_seed(init, 9)));
    return reports.back();
  };
  const auto baseline = time_one("vanilla", build("none", "none", 1));
  rows.push_back({"vanilla", 1, size, "throughput", baseline.mean});
  json speedups = json::object();
  for (auto n : widths) {
    const auto r = time_one("mux-rsa", build(ctx.cfg.get("mux") == "none" ? "gaussian" : ctx.cfg.get("mux"), "rsa", n));
    const auto s = speedup(r, baseline);
    rows.push_back({"mux-rsa", n, size, "throughput", r.mean});
    rows.push_back({"mux-rsa", n, size, "speedup", s.ratio});
    speedups["rsa_N" + std::to_string(n)] = {{"ratio", s.ratio}, {"std", s.std}};
  }
  if (ctx.cfg.get_bool("bench_prefix")) {
    const auto n = *std::max_element(widths.begin(), widths.end());
    const auto r = time_one("mux-prefix", build(ctx.cfg.get("mux") == "none" ? "gaussian" : ctx.cfg.get("mux"), "prefix", n));
    const auto s = speedup(r, baseline);
    rows.push_back({"mux-prefix", n, size, "throughput", r.mean});
    rows.push_back({"mux-prefix", n, size, "speedup", s.ratio});
    speedups["prefix_N" + std::to_string(n)] = {{"ratio", s.ratio}, {"std", s.std}};
  }
  std::string jl;
  for (const auto& r : reports) jl += throughput_jsonl(r);
  ctx.write(ctx.artifact(".throughput.jsonl"), jl);
  ctx.write(ctx.artifact(".report.csv"), to_csv(rows));
  ctx.summary["baseline"] = baseline.mean;
  ctx.summary["speedup"] = speedups;
}

void run_pareto(Context& ctx) {
  if (!ctx.cfg.has("points")) throw ConfigError("pareto needs points = <csv> (or --in)");
  const auto pts = read_points_csv(ctx.cfg.get("points"));
  const auto front = pareto_frontier(pts);
  ctx.write(ctx.artifact(".frontier.csv"), points_csv(front));
  if (ctx.cfg.has("svg")) {
    const std::filesystem::path svg = ctx.cfg.get("svg");
    ctx.write(svg, pareto_svg(pts, front));
    ctx.artifacts.push_back(svg.string());
  }
  ctx.summary["points"] = pts.size();
  ctx.summary["frontier"] = json::array();
  for (const auto& p : front) ctx.summary["frontier"].push_back({{"throughput", p.throughput}, {"accuracy", p.accuracy}, {"label", p.label}});
  ctx.summary["frontier_csv"] = points_csv(front);
}

void run_muxology(Context& ctx) {
  const auto held = eval_dataset(ctx.cfg, TaskKind::text);
  const auto state = starting_state(ctx, held);
  Dataset sample = held;
  sample.examples.resize(std::min(held.size(), ctx.cfg.get_size("muxology_samples")));
  const auto p = muxology(state.model, sample, ctx.cfg.get_size("seq_len"), ctx.cfg.get_size("batch"));
  std::vector<ReportRow> rows;
  const auto id = std::string(to_string(state.model.spec.mux)) + "-" + std::string(to_string(state.model.spec.demux));
  for (std::size_t l = 0; l < p.activation.size(); ++l) {
    rows.push_back({id, state.model.n(), state.model.spec.size_name, "layer" + std::to_string(l) + ".mean_abs_activation", p.activation[l]});
    rows.push_back({id, state.model.n(), state.model.spec.size_name, "layer" + std::to_string(l) + ".attention_entropy_nats", p.entropy[l]});
  }
  ctx.write(ctx.artifact(".report.csv"), to_csv(rows));
  ctx.write(ctx.artifact(".report.jsonl"), to_jsonl(rows));
  ctx.summary["activation"] = p.activation;
  ctx.summary["entropy"] = p.entropy;
  ctx.summary["entropy_unit"] = p.entropy_unit;
  ctx.summary["samples"] = p.samples;
}

void run_sweep(Context& ctx) {
  const auto task = task_for(ctx.cfg, Stage::finetune);
  const auto train_data = train_dataset(ctx.cfg, task);
  const auto test_data = eval_dataset(ctx.cfg, task);
  const auto plan = stage_plan(ctx.cfg, Stage::finetune);
  const auto objective = plan.objective;
  const auto list = ctx.cfg.get_list("sweep_seeds");
  auto trial = [&](std::uint64_t composition) {
    auto state = starting_state(ctx, train_data);
    state.seeds.data = composition;
    run_stage(state, plan, train_data);
    const auto r = evaluate(state.model, test_data, objective, ctx.cfg.get_size("batch"), ctx.cfg.get_size("seq_len"), composition);
    ctx.say(LogLevel::info, "seed " + std::to_string(composition) + ": accuracy " + std::to_string(r.accuracy));
    return r.accuracy;
  };
  const auto r = seed_sweep(list, trial);
  std::vector<ReportRow> rows;
  const auto spec = model_spec(ctx.cfg);
  for (std::size_t i = 0; i < r.seeds.size(); ++i) {
    rows.push_back({"seed=" + std::to_string(r.seeds[i]), spec.config.mux_width, spec.size_name, "accuracy", r.metrics[i]});
  }
  for (auto [name, v] : {std::pair{"mean", r.mean}, {"std", r.std}, {"max", r.max}, {"delta", r.delta}}) {
    rows.push_back({"sweep", spec.config.mux_width, spec.size_name, name, v});
  }
  ctx.write(ctx.artifact(".report.csv"), to_csv(rows));
  ctx.write(ctx.artifact(".report.jsonl"), to_jsonl(rows));
  ctx.summary["seeds"] = r.seeds;
  ctx.summary["metrics"] = r.metrics;
  ctx.summary["mean"] = r.mean;
  ctx.summary["std"] = r.std;
  ctx.summary["max"] = r.max;
  ctx.summary["delta"] = r.delta;
}

}  // namespace

std::string run_command(const std::string& command, const RunConfig& cfg, const LogFn& log) {
  const auto& names = command_names();
  if (std::find(names.begin(), names.end(), command) == names.end()) throw ConfigError("unknown command '" + command + "'");
  check_paths(cfg, {"init", "corpus", "eval_corpus", "points"});

  Context ctx{command, cfg, log, cfg.get("out_dir")};
  std::filesystem::create_directories(ctx.out_dir);

  json manifest;
  manifest["command"] = command;
  manifest["version"] = library_version();
  manifest["config"] = cfg.resolved();
  manifest["explicit"] = cfg.explicit_values();
  manifest["seeds"] = seeds_json(seeds(cfg));
  const auto manifest_path = ctx.out_dir / (command + ".manifest.json");
  ctx.write(manifest_path, manifest.dump(2) + "\n");
  ctx.artifacts.push_back(manifest_path.string());

  if (command == "prime") train(ctx, Stage::prime);
  else if (command == "pretrain") train(ctx, Stage::pretrain);
  else if (command == "finetune") train(ctx, Stage::finetune);
  else if (command == "eval") run_eval(ctx);
  else if (command == "ensemble-eval") run_ensemble(ctx);
  else if (command == "bench") run_bench(ctx);
  else if (command == "pareto") run_pareto(ctx);
  else if (command == "muxology") run_muxology(ctx);
  else run_sweep(ctx);

  ctx.summary["command"] = command;
  ctx.summary["artifacts"] = ctx.artifacts;
  return ctx.summary.dump();
}

}  // namespace muxplm
