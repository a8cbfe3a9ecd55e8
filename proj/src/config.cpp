#include "muxplm/config.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>

#include "muxplm/errors.hpp"
#include "muxplm/vocab.hpp"

namespace muxplm {

std::string_view to_string(TaskKind t) {
  switch (t) {
    case TaskKind::text: return "text";
    case TaskKind::seq: return "seq";
    case TaskKind::token: return "token";
  }
  return "?";
}

TaskKind parse_task(std::string_view s) {
  if (s == "text") return TaskKind::text;
  if (s == "seq") return TaskKind::seq;
  if (s == "token") return TaskKind::token;
  throw ConfigError("unknown task '" + std::string(s) + "' (expected text, seq or token)");
}

const std::vector<ConfigKey>& config_keys() {
  static const std::vector<ConfigKey> keys = {
      {"size", "enum:micro|small|base|large|bench", "micro", "named encoder geometry"},
      {"n", "uint", "2", "multiplexing width N"},
      {"mux", "enum:gaussian|contextual|none", "gaussian", "multiplexer"},
      {"demux", "enum:rsa|prefix|none", "rsa", "demultiplexer"},
      {"trainable_mux_keys", "bool", "false", "learn the multiplexer keys"},
      {"layers", "uint", "0", "override layer count (0 keeps the size default)"},
      {"hidden", "uint", "0", "override hidden width"},
      {"ffn", "uint", "0", "override feed-forward width"},
      {"heads", "uint", "0", "override head count (head size = hidden / heads)"},
      {"max_seq_len", "uint", "0", "position table length (0 = seq_len + 16)"},
      {"dropout", "float", "0.1", "hidden dropout"},
      {"attention_dropout", "float", "0.1", "attention dropout"},
      {"task", "enum:|text|seq|token", "", "dataset kind (empty = stage default)"},
      {"corpus", "string", "synthetic", "'synthetic' or a UTF-8 text file, one example per line"},
      {"eval_corpus", "string", "", "held-out text file (empty = split from corpus)"},
      {"corpus_size", "uint", "4000", "synthetic training examples"},
      {"eval_size", "uint", "512", "synthetic held-out examples"},
      {"corpus_seed", "uint", "1234", "seed of the synthetic corpus content"},
      {"objective", "enum:|retrieval|mlm|rtd|mixed|seq_cls|token_cls", "", "training objective (empty = stage default)"},
      {"steps", "uint", "", "update steps (empty = stage default)"},
      {"lr", "float", "", "peak learning rate (empty = stage default)"},
      {"warmup", "uint", "", "warmup steps (empty = stage default)"},
      {"batch", "uint", "32", "groups of N per batch"},
      {"seq_len", "uint", "64", "tokens per instance, CLS included"},
      {"retrieval_rate", "float", "0", "retrieval weight r in mixed pretraining"},
      {"mask_rate", "float", "0.15", "MLM / RTD corruption rate"},
      {"beta1", "float", "0.9", "Adam beta1"},
      {"beta2", "float", "0.999", "Adam beta2"},
      {"adam_eps", "float", "", "Adam epsilon (empty = stage default)"},
      {"max_grad_norm", "float", "0", "global gradient clipping (0 disables)"},
      {"log_every", "uint", "50", "steps per metric record"},
      {"plateau_window", "uint", "", "priming plateau window in steps (empty = stage default, 0 disables)"},
      {"plateau_delta", "float", "0.001", "priming plateau accuracy improvement"},
      {"allow_out_of_order", "bool", "false", "skip the prime -> pretrain -> finetune check"},
      {"prefetch", "bool", "true", "assemble batches on a worker thread"},
      {"seed", "uint", "0", "base seed for the init/data/corruption triple"},
      {"seed_init", "uint", "", "weight-init seed (empty = derived from seed)"},
      {"seed_data", "uint", "", "instance-composition seed (empty = derived from seed)"},
      {"seed_corruption", "uint", "", "masking / replacement seed (empty = derived from seed)"},
      {"out_dir", "string", "runs", "root of every artifact"},
      {"init", "path", "", "checkpoint to start from"},
      {"checkpoint", "string", "", "checkpoint to write (empty = <out_dir>/<command>.ckpt)"},
      {"eval_seed", "uint", "0", "grouping seed for evaluation"},
      {"ensemble_m", "uint", "1", "distinct instances per group when ensembling"},
      {"ensemble_permute", "bool", "true", "shuffle slots when ensembling"},
      {"bench_batch", "uint", "128", "throughput batch size"},
      {"bench_seq_len", "uint", "128", "throughput sequence length"},
      {"bench_batches", "uint", "200", "timed batches per trial"},
      {"bench_trials", "uint", "3", "throughput trials"},
      {"bench_warmup", "uint", "20", "untimed warmup batches"},
      {"bench_widths", "list", "2,5,10", "N values to time against the N=1 baseline"},
      {"bench_prefix", "bool", "true", "also time the prefix demultiplexer at the largest N"},
      {"points", "path", "", "CSV of throughput,accuracy[,label] points"},
      {"svg", "string", "", "optional SVG scatter output"},
      {"muxology_samples", "uint", "64", "held-out sequences to profile"},
      {"sweep_seeds", "list", "1,2,3", "composition seeds of a seed sweep"},
  };
  return keys;
}

namespace {

const ConfigKey& lookup(const std::string& key) {
  for (const auto& k : config_keys()) {
    if (k.name == key) return k;
  }
  throw ConfigError("unknown config key '" + key + "'");
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

bool parse_uint(const std::string& v, std::uint64_t& out) {
  if (v.empty()) return false;
  auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  return ec == std::errc() && p == v.data() + v.size();
}

bool parse_float(const std::string& v, double& out) {
  if (v.empty()) return false;
  try {
    std::size_t used = 0;
    out = std::stod(v, &used);
    return used == v.size() && std::isfinite(out);
  } catch (const std::exception&) {
    return false;
  }
}

bool parse_bool(const std::string& v, bool& out) {
  std::string l = v;
  std::transform(l.begin(), l.end(), l.begin(), [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  if (l == "true" || l == "1" || l == "yes" || l == "on") return out = true, true;
  if (l == "false" || l == "0" || l == "no" || l == "off") return out = false, true;
  return false;
}

std::vector<std::uint64_t> parse_list(const std::string& key, const std::string& v) {
  std::vector<std::uint64_t> out;
  std::size_t start = 0;
  while (start <= v.size()) {
    const auto comma = v.find(',', start);
    const auto item = trim(v.substr(start, comma == std::string::npos ? std::string::npos : comma - start));
    std::uint64_t x = 0;
    if (!parse_uint(item, x)) throw ConfigError("config key '" + key + "': '" + v + "' is not a comma-separated list of integers");
    out.push_back(x);
    if (comma == std::string::npos) break;
    start = comma + 1;
  }
  return out;
}

void validate_value(const ConfigKey& k, const std::string& v) {
  auto bad = [&](const std::string& what) { throw ConfigError("config key '" + k.name + "': '" + v + "' is not " + what); };
  if (k.kind == "uint") {
    std::uint64_t x;
    if (!parse_uint(v, x)) bad("a non-negative integer");
  } else if (k.kind == "float") {
    double x;
    if (!parse_float(v, x)) bad("a finite number");
  } else if (k.kind == "bool") {
    bool x;
    if (!parse_bool(v, x)) bad("a boolean (true/false)");
  } else if (k.kind == "list") {
    parse_list(k.name, v);
  } else if (k.kind.rfind("enum:", 0) == 0) {
    const std::string options = "|" + k.kind.substr(5) + "|";
    if (options.find("|" + v + "|") == std::string::npos) {
      std::string shown = k.kind.substr(5);
      std::replace(shown.begin(), shown.end(), '|', ',');
      bad("one of {" + shown + "}");
    }
  }
}

}  // namespace

void RunConfig::set(const std::string& key, const std::string& value) {
  const auto& k = lookup(key);
  const auto v = trim(value);
  validate_value(k, v);
  values_[key] = v;
}

void RunConfig::load_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path.string());
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError(path.string() + ":" + std::to_string(lineno) + ": expected 'key = value'");
    try {
      set(trim(line.substr(0, eq)), line.substr(eq + 1));
    } catch (const ConfigError& e) {
      throw ConfigError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
}

void RunConfig::merge(const RunConfig& overrides) {
  for (const auto& [k, v] : overrides.values_) values_[k] = v;
}

bool RunConfig::has(const std::string& key) const {
  lookup(key);
  auto it = values_.find(key);
  return it != values_.end() && !it->second.empty();
}

std::string RunConfig::get(const std::string& key) const {
  const auto& k = lookup(key);
  auto it = values_.find(key);
  return it != values_.end() ? it->second : k.fallback;
}

std::int64_t RunConfig::get_int(const std::string& key) const { return static_cast<std::int64_t>(get_size(key)); }

std::size_t RunConfig::get_size(const std::string& key) const {
  std::uint64_t x = 0;
  const auto v = get(key);
  if (!parse_uint(v, x)) throw ConfigError("config key '" + key + "' has no integer value");
  return static_cast<std::size_t>(x);
}

double RunConfig::get_float(const std::string& key) const {
  double x = 0;
  const auto v = get(key);
  if (!parse_float(v, x)) throw ConfigError("config key '" + key + "' has no numeric value");
  return x;
}

bool RunConfig::get_bool(const std::string& key) const {
  bool x = false;
  if (!parse_bool(get(key), x)) throw ConfigError("config key '" + key + "' has no boolean value");
  return x;
}

std::vector<std::uint64_t> RunConfig::get_list(const std::string& key) const { return parse_list(key, get(key)); }

std::map<std::string, std::string> RunConfig::resolved() const {
  std::map<std::string, std::string> out;
  for (const auto& k : config_keys()) out[k.name] = get(k.name);
  return out;
}

ModelSpec model_spec(const RunConfig& cfg, std::size_t num_classes, std::size_t num_tags) {
  ModelSpec s;
  s.size_name = cfg.get("size");
  s.mux = parse_mux_kind(cfg.get("mux"));
  s.demux = parse_demux_kind(cfg.get("demux"));
  const std::size_t n = s.mux == MuxKind::none ? 1 : cfg.get_size("n");
  if (s.mux == MuxKind::none && cfg.has("n") && cfg.get_size("n") != 1) {
    throw ConfigError("the vanilla backbone (mux = none) takes n = 1");
  }
  std::size_t max_len = cfg.get_size("max_seq_len");
  if (max_len == 0) max_len = cfg.get_size("seq_len") + vocab::kMaxMuxWidth;
  auto c = build_config(s.size_name, n, vocab::kSize, max_len);
  if (cfg.get_size("layers")) c.num_layers = cfg.get_size("layers");
  if (cfg.get_size("hidden")) c.hidden_size = cfg.get_size("hidden");
  if (cfg.get_size("ffn")) c.ffn_size = cfg.get_size("ffn");
  if (cfg.get_size("heads")) c.num_heads = cfg.get_size("heads");
  if (cfg.get_size("hidden") || cfg.get_size("heads")) {
    if (c.hidden_size % c.num_heads != 0) {
      throw ConfigError("hidden width " + std::to_string(c.hidden_size) + " is not divisible by " + std::to_string(c.num_heads) + " heads");
    }
    c.head_size = c.hidden_size / c.num_heads;
  }
  c.dropout = cfg.get_float("dropout");
  c.attention_dropout = cfg.get_float("attention_dropout");
  s.config = c;
  s.trainable_mux_keys = cfg.get_bool("trainable_mux_keys");
  s.num_classes = num_classes;
  s.num_tags = num_tags;
  s.validate();
  return s;
}

StagePlan stage_plan(const RunConfig& cfg, Stage stage) {
  auto p = default_plan(stage);
  if (cfg.has("objective")) p.objective = parse_objective(cfg.get("objective"));
  else if (stage == Stage::finetune && task_for(cfg, stage) == TaskKind::token) p.objective = Objective::token_cls;
  if (cfg.has("steps")) {
    p.steps = cfg.get_size("steps");
    if (!cfg.has("warmup")) p.warmup = p.steps / 10;
  }
  if (cfg.has("lr")) p.lr = cfg.get_float("lr");
  if (cfg.has("warmup")) p.warmup = cfg.get_size("warmup");
  if (cfg.has("adam_eps")) p.adam_eps = cfg.get_float("adam_eps");
  if (cfg.has("plateau_window")) p.plateau_window = cfg.get_size("plateau_window");
  p.groups = cfg.get_size("batch");
  p.seq_len = cfg.get_size("seq_len");
  p.retrieval_rate = cfg.get_float("retrieval_rate");
  p.mask_rate = cfg.get_float("mask_rate");
  p.beta1 = cfg.get_float("beta1");
  p.beta2 = cfg.get_float("beta2");
  p.max_grad_norm = cfg.get_float("max_grad_norm");
  p.log_every = cfg.get_size("log_every");
  p.plateau_delta = cfg.get_float("plateau_delta");
  p.allow_out_of_order = cfg.get_bool("allow_out_of_order");
  p.prefetch = cfg.get_bool("prefetch");
  p.validate();
  return p;
}

Seeds seeds(const RunConfig& cfg) {
  auto s = Seeds::from_base(cfg.get_size("seed"));
  if (cfg.has("seed_init")) s.init = cfg.get_size("seed_init");
  if (cfg.has("seed_data")) s.data = cfg.get_size("seed_data");
  if (cfg.has("seed_corruption")) s.corruption = cfg.get_size("seed_corruption");
  return s;
}

ThroughputOptions throughput_options(const RunConfig& cfg) {
  ThroughputOptions o;
  o.batch = cfg.get_size("bench_batch");
  o.seq_len = cfg.get_size("bench_seq_len");
  o.n_batches = cfg.get_size("bench_batches");
  o.trials = cfg.get_size("bench_trials");
  o.warmup_batches = cfg.get_size("bench_warmup");
  if (o.n_batches == 0) throw ConfigError("bench_batches must be positive");
  if (o.trials == 0) throw ConfigError("bench_trials must be positive");
  return o;
}

TaskKind task_for(const RunConfig& cfg, Stage stage) {
  if (cfg.has("task")) return parse_task(cfg.get("task"));
  return stage == Stage::finetune ? TaskKind::seq : TaskKind::text;
}

namespace {

Dataset build(const RunConfig& cfg, TaskKind task, bool held_out) {
  const std::size_t L = cfg.get_size("seq_len");
  if (L < 2) throw ConfigError("seq_len must be at least 2");
  const std::uint64_t seed = derive_seed(cfg.get_size("corpus_seed"), held_out ? 2 : 1);
  const std::size_t count = cfg.get_size(held_out ? "eval_size" : "corpus_size");
  const std::size_t max_body = L - 1;
  const std::size_t min_body = std::min<std::size_t>(8, max_body);
  switch (task) {
    case TaskKind::seq: return synth_seq_task(count, seed, min_body, max_body);
    case TaskKind::token: return synth_token_task(count, seed, min_body, max_body);
    case TaskKind::text: break;
  }
  const auto corpus = cfg.get("corpus");
  if (held_out && cfg.has("eval_corpus")) return text_dataset(load_lines(cfg.get("eval_corpus")), L, "eval");
  if (corpus == "synthetic") return text_dataset(synth_text_lines(count, seed), L, held_out ? "synthetic-eval" : "synthetic");
  auto lines = load_lines(corpus);
  if (cfg.has("eval_corpus")) return text_dataset(lines, L, "train");
  // Last tenth of the file is held out.
  const std::size_t cut = lines.size() - lines.size() / 10;
  std::vector<std::string> part(held_out ? lines.begin() + static_cast<std::ptrdiff_t>(cut) : lines.begin(),
                                held_out ? lines.end() : lines.begin() + static_cast<std::ptrdiff_t>(cut));
  if (part.empty()) throw ConfigError("corpus " + corpus + " has too few lines to hold out an evaluation split");
  return text_dataset(part, L, held_out ? "heldout" : "train");
}

}  // namespace

Dataset train_dataset(const RunConfig& cfg, TaskKind task) { return build(cfg, task, false); }
Dataset eval_dataset(const RunConfig& cfg, TaskKind task) { return build(cfg, task, true); }

void check_paths(const RunConfig& cfg, const std::vector<std::string>& keys) {
  for (const auto& key : keys) {
    if (!cfg.has(key)) continue;
    const auto v = cfg.get(key);
    if (key == "corpus" && v == "synthetic") continue;
    if (!std::filesystem::exists(v)) throw ConfigError("config key '" + key + "': path '" + v + "' does not exist");
  }
}

}  // namespace muxplm
