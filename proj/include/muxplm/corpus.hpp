#pragma once

#include <condition_variable>
#include <cstdint>
#include <deque>
#include <filesystem>
#include <mutex>
#include <span>
#include <string>
#include <string_view>
#include <thread>
#include <vector>

#include "muxplm/rng.hpp"

namespace muxplm {

// [CLS] followed by one token per byte.
std::vector<std::int32_t> tokenize(std::string_view text);
// Inverse of tokenize; special tokens are dropped.
std::string detokenize(std::span<const std::int32_t> tokens);

struct Example {
  std::vector<std::int32_t> tokens;  // already tokenized, starts with [CLS]
  std::int32_t label = -100;         // sequence class, or ignore
  std::vector<std::int32_t> tags;    // one per token ([CLS] tagged with ignore), or empty
};

struct Dataset {
  std::string name;
  std::vector<Example> examples;
  std::size_t num_classes = 0;
  std::size_t num_tags = 0;

  std::size_t size() const { return examples.size(); }
};

// B groups of N instances, each padded or truncated to L.
struct MuxBatch {
  std::size_t groups = 0, n = 0, seq_len = 0;
  std::vector<std::int32_t> tokens;      // [B×N×L]
  std::vector<std::uint8_t> valid;       // [B×N×L], 0 at padding
  std::vector<std::int32_t> seq_labels;  // [B×N]
  std::vector<std::int32_t> tag_labels;  // [B×N×L], ignore at padding and [CLS]
  std::vector<std::size_t> indices;      // dataset index of every instance

  std::size_t instances() const { return groups * n; }
};

MuxBatch assemble_batch(const Dataset& data, std::span<const std::size_t> indices, std::size_t n, std::size_t seq_len);

enum class SamplingStrategy { uniform };

// Uniform instance composition: each epoch is a fresh permutation of the
// dataset cut into consecutive B·N blocks. A trailing partial block is dropped.
class BatchSampler {
 public:
  BatchSampler(const Dataset& data, std::size_t n, std::size_t groups, std::size_t seq_len, std::uint64_t seed,
               SamplingStrategy strategy = SamplingStrategy::uniform);

  MuxBatch next();
  std::size_t epoch() const { return epoch_; }
  std::size_t batches_per_epoch() const { return order_.size() / (n_ * groups_); }
  std::string rng_state() const { return rng_.state(); }

 private:
  void reshuffle();

  const Dataset* data_;
  std::size_t n_, groups_, seq_len_;
  Rng rng_;
  std::vector<std::size_t> order_;
  std::size_t cursor_ = 0;
  std::size_t epoch_ = 0;
};

// Runs a BatchSampler on a worker thread a few batches ahead. Delivery order
// is identical to calling the sampler directly.
class PrefetchingSampler {
 public:
  PrefetchingSampler(BatchSampler sampler, std::size_t depth = 2);
  ~PrefetchingSampler();
  PrefetchingSampler(const PrefetchingSampler&) = delete;
  PrefetchingSampler& operator=(const PrefetchingSampler&) = delete;

  MuxBatch next();

 private:
  void run();

  BatchSampler sampler_;
  std::size_t depth_;
  std::deque<MuxBatch> queue_;
  std::mutex mu_;
  std::condition_variable cv_;
  bool stop_ = false;
  std::exception_ptr error_;
  std::thread worker_;
};

// Deterministic in-place Fisher-Yates shuffle.
void shuffle_indices(std::vector<std::size_t>& v, Rng& rng);

// Binary majority task over {a, b}: label 0 when 'a' is the majority.
// Lengths are drawn from [min_len, max_len]; ties are redrawn.
Dataset synth_seq_task(std::size_t n_examples, std::uint64_t seed, std::size_t min_len = 8, std::size_t max_len = 24);
// Tag of byte k is 1 + class(byte k-1), with tag 0 for the first byte.
// Class 0 is a vowel from "aeiou", class 1 a consonant from "bcdfghklmnprst".
Dataset synth_token_task(std::size_t n_examples, std::uint64_t seed, std::size_t min_len = 8, std::size_t max_len = 24);
int byte_class(std::int32_t byte);

// Pseudo-natural text: sentences of words drawn from a fixed lexicon with a
// Zipf-like frequency profile.
std::vector<std::string> synth_text_lines(std::size_t n_lines, std::uint64_t seed);
// Non-empty lines of a UTF-8 text file.
std::vector<std::string> load_lines(const std::filesystem::path& path);
// Each line becomes one unlabeled example truncated to max_tokens.
Dataset text_dataset(const std::vector<std::string>& lines, std::size_t max_tokens, std::string name = "text");

}  // namespace muxplm
