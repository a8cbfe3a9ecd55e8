#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "muxplm/corpus.hpp"
#include "muxplm/model.hpp"

namespace muxplm {

struct ThroughputOptions {
  std::size_t batch = 128;  // B, groups of N instances per forward
  std::size_t seq_len = 128;
  std::size_t n_batches = 200;
  std::size_t trials = 3;
  std::size_t warmup_batches = 20;
};

struct ThroughputReport {
  std::string model_id;
  std::size_t n = 1;
  std::size_t batch = 0;
  std::size_t seq_len = 0;
  std::vector<double> trials;  // samples/second
  double mean = 0.0;
  double std = 0.0;  // sample standard deviation, 0 for one trial
};

// Times `forward(batch_index)` over n_batches per trial after warmup_batches
// untimed calls. Each call is credited with batch·n samples.
ThroughputReport measure_throughput(const std::string& model_id, std::size_t n, const ThroughputOptions& options,
                                    const std::function<void(std::size_t)>& forward);

// Inference-only forward of embed, mux, backbone and demux at every position
// on a fixed random batch of B·N byte sequences.
ThroughputReport measure_model_throughput(const MuxModel<float>& model, const std::string& model_id,
                                          const ThroughputOptions& options, std::uint64_t seed = 0);

struct Speedup {
  double ratio = 0.0;
  double std = 0.0;  // first-order propagation of both relative stds
};
Speedup speedup(const ThroughputReport& report, const ThroughputReport& baseline);

struct ParetoPoint {
  double throughput = 0.0;
  double accuracy = 0.0;
  std::string label;
};

// Points not strictly dominated in both coordinates, ascending throughput;
// equal throughputs keep input order.
std::vector<ParetoPoint> pareto_frontier(std::span<const ParetoPoint> points);

struct MuxologyProfile {
  std::vector<double> activation;  // mean |h| per layer
  std::vector<double> entropy;     // mean attention entropy per layer, nats
  std::size_t samples = 0;
  std::string entropy_unit = "nats";
};

// Mean entropy of attention rows [P×H×L×L] over heads, valid queries and
// rows; each row is renormalised over its valid keys. key_valid is [P×L].
double attention_entropy(std::span<const float> probs, std::size_t rows, std::size_t heads, std::size_t len,
                         std::span<const std::uint8_t> key_valid);
// Mean |h| of hidden states [P×L×d] over valid positions.
double mean_abs_activation(std::span<const float> hidden, std::size_t rows, std::size_t len, std::size_t width,
                           std::span<const std::uint8_t> valid);

// Captures every layer while the model reads `sample` in groups of N.
MuxologyProfile muxology(const MuxModel<float>& model, const Dataset& sample, std::size_t seq_len,
                         std::size_t groups_per_batch = 8);

struct SeedSweepResult {
  std::vector<std::uint64_t> seeds;
  std::vector<double> metrics;
  double mean = 0.0, std = 0.0, max = 0.0, min = 0.0;
  double delta = 0.0;  // best - worst
};

SeedSweepResult summarize_sweep(std::span<const std::uint64_t> seeds, std::span<const double> metrics);
// Runs `trial` once per seed; only the seed changes between calls.
SeedSweepResult seed_sweep(std::span<const std::uint64_t> seeds, const std::function<double(std::uint64_t)>& trial);

// One CSV/JSONL report row.
struct ReportRow {
  std::string model;
  std::size_t n = 1;
  std::string size;
  std::string metric;
  double value = 0.0;
};

std::string to_csv(std::span<const ReportRow> rows);  // header: model,N,size,metric,value
std::string to_jsonl(std::span<const ReportRow> rows);
std::string throughput_jsonl(const ThroughputReport& r);

// CSV with a header naming throughput, accuracy and optionally label columns.
std::vector<ParetoPoint> read_points_csv(const std::filesystem::path& path);
std::string points_csv(std::span<const ParetoPoint> points);
std::string pareto_svg(std::span<const ParetoPoint> points, std::span<const ParetoPoint> frontier);

}  // namespace muxplm
