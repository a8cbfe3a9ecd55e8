#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "muxplm/corpus.hpp"
#include "muxplm/model.hpp"

namespace muxplm {

enum class Stage { prime, pretrain, finetune };
enum class Objective { retrieval, mlm, rtd, mixed, seq_cls, token_cls };

std::string_view to_string(Stage s);
std::string_view to_string(Objective o);
Stage parse_stage(std::string_view s);
Objective parse_objective(std::string_view s);
// retrieval for prime, mlm for pretrain, seq_cls for finetune.
Objective default_objective(Stage s);

struct StagePlan {
  Stage stage = Stage::prime;
  Objective objective = Objective::retrieval;
  std::size_t steps = 10000;
  double lr = 1e-4;
  std::size_t warmup = 0;
  std::size_t groups = 32;  // B
  std::size_t seq_len = 128;
  double retrieval_rate = 0.0;
  double mask_rate = 0.15;
  double beta1 = 0.9, beta2 = 0.999;
  double adam_eps = 1e-6;
  double max_grad_norm = 0.0;  // 0 disables clipping
  std::size_t log_every = 50;
  // Priming stops early once the logged accuracy has not improved by
  // plateau_delta for plateau_window steps. 0 disables.
  std::size_t plateau_window = 500;
  double plateau_delta = 0.001;
  bool allow_out_of_order = false;
  bool prefetch = true;

  void validate() const;
};

// Defaults per stage: priming at lr 1e-4 for up to 10k steps, pretraining
// with Adam eps 1e-6, fine-tuning with eps 1e-8.
StagePlan default_plan(Stage stage);

double lr_at(std::size_t step, const StagePlan& plan);

struct AdamSlot {
  std::vector<float> m, v;
};

struct OptimizerState {
  std::map<std::string, AdamSlot> slots;
  std::uint64_t step = 0;
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-6;
};

// One bias-corrected Adam update over every trainable tensor that has a
// gradient. Moment buffers are created on first use.
void adam_step(MuxModel<float>& model, OptimizerState& state, double lr);

struct Seeds {
  std::uint64_t init = 0, data = 0, corruption = 0;
  // Splits one base seed into the three independent streams.
  static Seeds from_base(std::uint64_t base);
};

struct StageRecord {
  Stage stage;
  Objective objective;
  std::size_t steps;
};

struct TrainState {
  MuxModel<float> model;
  OptimizerState optimizer;
  Seeds seeds;
  std::vector<StageRecord> history;
  // Serialized Rng states carried across stages. The batch order of stage k
  // comes from its own stream, derive_seed(seeds.data, k).
  std::string corruption_rng, dropout_rng;

  bool completed(Stage s) const;
};

TrainState new_train_state(const ModelSpec& spec, const Seeds& seeds);

struct MetricRecord {
  std::string stage;
  std::string objective;
  std::size_t step = 0;
  double loss = 0.0;
  double accuracy = 0.0;
  double lr = 0.0;
};

std::string to_json_line(const MetricRecord& r);

struct StageResult {
  std::vector<MetricRecord> log;
  std::size_t steps_run = 0;
  bool stopped_on_plateau = false;
};

using MetricSink = std::function<void(const MetricRecord&)>;

// Runs plan.steps updates (or fewer on a priming plateau). Throws
// StageOrderError when the stage history does not permit this stage.
StageResult run_stage(TrainState& state, const StagePlan& plan, const Dataset& data, const MetricSink& sink = {});

// Loss and accuracy of one batch without touching parameters.
struct BatchOutcome {
  double loss = 0.0;
  AccuracyCount accuracy;
};
BatchOutcome score_batch(const MuxModel<float>& model, const MuxBatch& batch, Objective objective, double mask_rate,
                         double retrieval_rate, Rng& corruption_rng);

struct EvalResult {
  double loss = 0.0;
  double accuracy = 0.0;
  std::size_t scored = 0;
  std::size_t batches = 0;
};

// One pass over the dataset in seed-determined N-tuples; a trailing partial
// batch is dropped.
EvalResult evaluate(const MuxModel<float>& model, const Dataset& data, Objective objective, std::size_t groups,
                    std::size_t seq_len, std::uint64_t seed, double mask_rate = 0.15);

// Mean of slot logits [k×C].
std::vector<double> average_logits(std::span<const double> slot_logits, std::size_t classes);
// Lowest index wins ties.
std::size_t argmax(std::span<const double> values);

struct EnsembleOptions {
  std::size_t m = 1;     // distinct instances per group, the target included
  bool permute = true;   // shuffle slot assignment
};

// Class prediction for `target`: it fills N - m + 1 slots, `others` fill the
// remaining m - 1, and the logits of the target's slots are averaged.
std::size_t ensemble_predict(const MuxModel<float>& model, std::span<const std::int32_t> target,
                             const std::vector<std::vector<std::int32_t>>& others, std::size_t seq_len,
                             const EnsembleOptions& options, Rng& rng, std::vector<double>* averaged = nullptr);

// Accuracy of ensemble_predict over a labelled dataset. Others for m > 1 are
// drawn from the dataset with the given rng.
EvalResult ensemble_evaluate(const MuxModel<float>& model, const Dataset& data, std::size_t seq_len,
                             const EnsembleOptions& options, std::uint64_t seed, std::size_t groups_per_batch = 16);

// Checkpoint file: "MUXC", version, JSON config block, named tensor table,
// little-endian f32 payload, trailing FNV-1a-64 of every preceding byte.
inline constexpr std::uint32_t kCheckpointVersion = 1;
std::vector<std::uint8_t> serialize_checkpoint(const TrainState& state);
TrainState deserialize_checkpoint(std::span<const std::uint8_t> bytes);
void save_checkpoint(const TrainState& state, const std::filesystem::path& path);
TrainState load_checkpoint(const std::filesystem::path& path);
std::uint64_t fnv1a64(std::span<const std::uint8_t> bytes);

}  // namespace muxplm
