#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "muxplm/benchlab.hpp"
#include "muxplm/trainer.hpp"

namespace muxplm {

enum class TaskKind { text, seq, token };
std::string_view to_string(TaskKind t);
TaskKind parse_task(std::string_view s);

struct ConfigKey {
  std::string name;
  std::string kind;  // uint, float, bool, string, path, list or enum:a|b|c
  std::string fallback;
  std::string help;
};

// Every key a run configuration accepts.
const std::vector<ConfigKey>& config_keys();

// Flat key/value run configuration. Only explicitly set keys are stored;
// getters fall back to the documented default.
class RunConfig {
 public:
  // Throws ConfigError on an unknown key or a value of the wrong kind.
  void set(const std::string& key, const std::string& value);
  // `key = value` lines; '#' starts a comment; later lines win.
  void load_file(const std::filesystem::path& path);
  void merge(const RunConfig& overrides);

  bool has(const std::string& key) const;
  std::string get(const std::string& key) const;
  std::int64_t get_int(const std::string& key) const;
  std::size_t get_size(const std::string& key) const;
  double get_float(const std::string& key) const;
  bool get_bool(const std::string& key) const;
  std::vector<std::uint64_t> get_list(const std::string& key) const;

  const std::map<std::string, std::string>& explicit_values() const { return values_; }
  // Every key with its effective value.
  std::map<std::string, std::string> resolved() const;

 private:
  std::map<std::string, std::string> values_;
};

ModelSpec model_spec(const RunConfig& cfg, std::size_t num_classes = 2, std::size_t num_tags = 3);
StagePlan stage_plan(const RunConfig& cfg, Stage stage);
Seeds seeds(const RunConfig& cfg);
ThroughputOptions throughput_options(const RunConfig& cfg);
TaskKind task_for(const RunConfig& cfg, Stage stage);

// Training split, and the held-out split for evaluation and analysis.
Dataset train_dataset(const RunConfig& cfg, TaskKind task);
Dataset eval_dataset(const RunConfig& cfg, TaskKind task);

// Input paths named by the configuration that must exist before a run.
void check_paths(const RunConfig& cfg, const std::vector<std::string>& keys);

}  // namespace muxplm
