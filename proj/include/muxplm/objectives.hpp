#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "muxplm/encoder.hpp"

namespace muxplm {

struct CorruptionOutcome {
  std::vector<std::int32_t> corrupted;
  std::vector<std::int32_t> mlm_labels;  // original id where selected, else kIgnoreIndex
  std::vector<std::int8_t> rtd_labels;   // 1 changed, 0 unchanged, -1 padding
  std::vector<std::uint8_t> touched;

  std::size_t touched_count() const;
};

// Selects each non-special position with probability `rate`; within the
// selection 80% become [MASK], 10% a random byte token and 10% stay put.
CorruptionOutcome mask_tokens(std::span<const std::int32_t> tokens, double rate, Rng& rng);
CorruptionOutcome mask_tokens(std::span<const std::int32_t> tokens, double rate, std::uint64_t seed);

// Selected non-special positions get a uniformly drawn byte token; the RTD
// label is 1 only when the surface token actually changed.
CorruptionOutcome random_replace(std::span<const std::int32_t> tokens, double rate, Rng& rng);
CorruptionOutcome random_replace(std::span<const std::int32_t> tokens, double rate, std::uint64_t seed);

// Output heads. The LM projection reuses the token embedding table, so only
// its bias lives here.
template <typename T>
struct HeadParams {
  Tensor<T> lm_bias;       // [V]
  Tensor<T> rtd_w, rtd_b;  // [d×1], [1]
  Tensor<T> cls_w, cls_b;  // [d×C], [C]
  Tensor<T> tok_w, tok_b;  // [d×K], [K]

  void visit(const std::string& prefix, const ParamVisitor<T>& fn);
};

template <typename T>
HeadParams<T> init_heads(std::size_t width, std::size_t vocab_size, std::size_t num_classes, std::size_t num_tags, Rng& rng);

// demuxed [...×d] -> [...×V]
template <typename T>
Tensor<T> lm_logits(const Tensor<T>& demuxed, const Tensor<T>& token_embedding, const HeadParams<T>& heads);

// Cross-entropy of the LM head against the original tokens at every non-PAD
// position of every instance.
template <typename T>
Tensor<T> retrieval_loss(const Tensor<T>& demuxed, std::span<const std::int32_t> originals, const Tensor<T>& token_embedding,
                         const HeadParams<T>& heads);

template <typename T>
Tensor<T> mlm_loss(const Tensor<T>& demuxed, const CorruptionOutcome& outcome, const Tensor<T>& token_embedding,
                   const HeadParams<T>& heads);

template <typename T>
Tensor<T> rtd_loss(const Tensor<T>& demuxed, const CorruptionOutcome& outcome, const HeadParams<T>& heads);

// (1 - r)·mlm + r·retrieval
template <typename T>
Tensor<T> mixed_pretrain_loss(const Tensor<T>& mlm, const Tensor<T>& retrieval, double r);

// demuxed [...×L×d] -> [...×C], read from position 0 ([CLS]).
template <typename T>
Tensor<T> sequence_logits(const Tensor<T>& demuxed, const HeadParams<T>& heads);

// demuxed [...×L×d] -> [...×L×K]
template <typename T>
Tensor<T> token_logits(const Tensor<T>& demuxed, const HeadParams<T>& heads);

// Row-wise argmax over the last axis; ties go to the lowest index.
template <typename T>
std::vector<std::int32_t> argmax_rows(const Tensor<T>& logits);

struct AccuracyCount {
  std::size_t correct = 0;
  std::size_t total = 0;

  double rate() const { return total == 0 ? 0.0 : static_cast<double>(correct) / static_cast<double>(total); }
  AccuracyCount& operator+=(const AccuracyCount& o) {
    correct += o.correct;
    total += o.total;
    return *this;
  }
};

// Targets equal to kIgnoreIndex are skipped.
template <typename T>
AccuracyCount count_correct(const Tensor<T>& logits, std::span<const std::int32_t> targets);

}  // namespace muxplm
