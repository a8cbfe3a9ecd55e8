#include "muxplm/objectives.hpp"

#include "muxplm/errors.hpp"
#include "muxplm/vocab.hpp"

namespace muxplm {

std::size_t CorruptionOutcome::touched_count() const {
  std::size_t n = 0;
  for (auto t : touched) n += t;
  return n;
}

namespace {

void check_rate(const char* op, double rate) {
  if (!(rate >= 0.0 && rate <= 1.0)) throw ValueError(std::string(op) + ": rate " + std::to_string(rate) + " outside [0,1]");
}

CorruptionOutcome blank_outcome(std::span<const std::int32_t> tokens) {
  CorruptionOutcome out;
  out.corrupted.assign(tokens.begin(), tokens.end());
  out.mlm_labels.assign(tokens.size(), diff::kIgnoreIndex);
  out.rtd_labels.assign(tokens.size(), 0);
  out.touched.assign(tokens.size(), 0);
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (tokens[i] == vocab::kPad) out.rtd_labels[i] = -1;
  }
  return out;
}

std::int32_t random_byte(Rng& rng) { return static_cast<std::int32_t>(rng.below(vocab::kByteCount)); }

}  // namespace

CorruptionOutcome mask_tokens(std::span<const std::int32_t> tokens, double rate, Rng& rng) {
  check_rate("mask_tokens", rate);
  auto out = blank_outcome(tokens);
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (vocab::is_special(tokens[i])) continue;
    if (!rng.bernoulli(rate)) continue;
    out.touched[i] = 1;
    out.mlm_labels[i] = tokens[i];
    const double u = rng.uniform();
    if (u < 0.8) {
      out.corrupted[i] = vocab::kMask;
    } else if (u < 0.9) {
      out.corrupted[i] = random_byte(rng);
    }
    out.rtd_labels[i] = out.corrupted[i] != tokens[i] ? 1 : 0;
  }
  return out;
}

CorruptionOutcome mask_tokens(std::span<const std::int32_t> tokens, double rate, std::uint64_t seed) {
  Rng rng(seed);
  return mask_tokens(tokens, rate, rng);
}

CorruptionOutcome random_replace(std::span<const std::int32_t> tokens, double rate, Rng& rng) {
  check_rate("random_replace", rate);
  auto out = blank_outcome(tokens);
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (vocab::is_special(tokens[i])) continue;
    if (!rng.bernoulli(rate)) continue;
    out.touched[i] = 1;
    out.corrupted[i] = random_byte(rng);
    out.rtd_labels[i] = out.corrupted[i] != tokens[i] ? 1 : 0;
  }
  return out;
}

CorruptionOutcome random_replace(std::span<const std::int32_t> tokens, double rate, std::uint64_t seed) {
  Rng rng(seed);
  return random_replace(tokens, rate, rng);
}

template <typename T>
void HeadParams<T>::visit(const std::string& prefix, const ParamVisitor<T>& fn) {
  fn(prefix + "lm.bias", lm_bias);
  fn(prefix + "rtd.w", rtd_w);
  fn(prefix + "rtd.b", rtd_b);
  fn(prefix + "cls.w", cls_w);
  fn(prefix + "cls.b", cls_b);
  fn(prefix + "tok.w", tok_w);
  fn(prefix + "tok.b", tok_b);
}

template <typename T>
HeadParams<T> init_heads(std::size_t width, std::size_t vocab_size, std::size_t num_classes, std::size_t num_tags, Rng& rng) {
  if (width == 0 || vocab_size == 0 || num_classes == 0 || num_tags == 0) {
    throw ValueError("init_heads: all head sizes must be positive");
  }
  auto normal = [&rng](diff::Shape shape) {
    std::vector<T> values(diff::numel(shape));
    for (auto& v : values) v = static_cast<T>(0.02 * rng.normal());
    return Tensor<T>::from(std::move(shape), std::move(values), true);
  };
  HeadParams<T> h;
  h.lm_bias = Tensor<T>::zeros({vocab_size}, true);
  h.rtd_w = normal({width, 1});
  h.rtd_b = Tensor<T>::zeros({1}, true);
  h.cls_w = normal({width, num_classes});
  h.cls_b = Tensor<T>::zeros({num_classes}, true);
  h.tok_w = normal({width, num_tags});
  h.tok_b = Tensor<T>::zeros({num_tags}, true);
  return h;
}

template <typename T>
Tensor<T> lm_logits(const Tensor<T>& demuxed, const Tensor<T>& token_embedding, const HeadParams<T>& heads) {
  return diff::linear_bt(demuxed, token_embedding, &heads.lm_bias);
}

template <typename T>
Tensor<T> retrieval_loss(const Tensor<T>& demuxed, std::span<const std::int32_t> originals, const Tensor<T>& token_embedding,
                         const HeadParams<T>& heads) {
  const std::size_t rows = demuxed.rank() == 0 ? 0 : demuxed.numel() / demuxed.shape().back();
  if (originals.size() != rows) {
    throw DimensionError("retrieval_loss: " + std::to_string(rows) + " demuxed positions vs " + std::to_string(originals.size()) +
                         " original tokens");
  }
  std::vector<std::int32_t> targets(originals.begin(), originals.end());
  for (auto& t : targets) {
    if (t == vocab::kPad) t = diff::kIgnoreIndex;
  }
  return diff::cross_entropy(lm_logits(demuxed, token_embedding, heads), targets);
}

template <typename T>
Tensor<T> mlm_loss(const Tensor<T>& demuxed, const CorruptionOutcome& outcome, const Tensor<T>& token_embedding,
                   const HeadParams<T>& heads) {
  if (outcome.touched_count() == 0) throw ValueError("mlm_loss: no position was selected for prediction");
  return diff::cross_entropy(lm_logits(demuxed, token_embedding, heads), outcome.mlm_labels);
}

template <typename T>
Tensor<T> rtd_loss(const Tensor<T>& demuxed, const CorruptionOutcome& outcome, const HeadParams<T>& heads) {
  if (outcome.rtd_labels.empty()) throw ValueError("rtd_loss: empty batch");
  return diff::bce_with_logits(diff::linear(demuxed, heads.rtd_w, &heads.rtd_b), outcome.rtd_labels);
}

template <typename T>
Tensor<T> mixed_pretrain_loss(const Tensor<T>& mlm, const Tensor<T>& retrieval, double r) {
  if (!(r >= 0.0 && r <= 1.0)) throw ValueError("mixed_pretrain_loss: retrieval rate " + std::to_string(r) + " outside [0,1]");
  if (r == 0.0) return mlm;
  if (r == 1.0) return retrieval;
  return diff::add(diff::scale(mlm, static_cast<T>(1.0 - r)), diff::scale(retrieval, static_cast<T>(r)));
}

template <typename T>
Tensor<T> sequence_logits(const Tensor<T>& demuxed, const HeadParams<T>& heads) {
  if (demuxed.rank() < 2) throw DimensionError("sequence_logits: expected [...×L×d], got " + diff::shape_str(demuxed.shape()));
  const std::size_t axis = demuxed.rank() - 2;
  if (demuxed.dim(axis) == 0) throw DimensionError("sequence_logits: empty sequence");
  auto cls = diff::slice_axis(demuxed, axis, 0, 1);
  diff::Shape shape = demuxed.shape();
  shape.erase(shape.begin() + static_cast<std::ptrdiff_t>(axis));
  return diff::linear(diff::reshape(cls, shape), heads.cls_w, &heads.cls_b);
}

template <typename T>
Tensor<T> token_logits(const Tensor<T>& demuxed, const HeadParams<T>& heads) {
  if (demuxed.rank() < 2) throw DimensionError("token_logits: expected [...×L×d], got " + diff::shape_str(demuxed.shape()));
  return diff::linear(demuxed, heads.tok_w, &heads.tok_b);
}

template <typename T>
std::vector<std::int32_t> argmax_rows(const Tensor<T>& logits) {
  if (logits.rank() == 0 || logits.shape().back() == 0) throw DimensionError("argmax_rows: no classes");
  const std::size_t k = logits.shape().back(), rows = logits.numel() / k;
  std::vector<std::int32_t> out(rows);
  const auto z = logits.data();
  for (std::size_t r = 0; r < rows; ++r) {
    std::size_t best = 0;
    for (std::size_t j = 1; j < k; ++j) {
      if (z[r * k + j] > z[r * k + best]) best = j;
    }
    out[r] = static_cast<std::int32_t>(best);
  }
  return out;
}

template <typename T>
AccuracyCount count_correct(const Tensor<T>& logits, std::span<const std::int32_t> targets) {
  const auto pred = argmax_rows(logits);
  if (pred.size() != targets.size()) {
    throw DimensionError("count_correct: " + std::to_string(pred.size()) + " predictions vs " + std::to_string(targets.size()) +
                         " targets");
  }
  AccuracyCount acc;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    if (targets[i] == diff::kIgnoreIndex) continue;
    ++acc.total;
    acc.correct += pred[i] == targets[i];
  }
  return acc;
}

#define MUXPLM_INSTANTIATE(T)                                                                                           \
  template struct HeadParams<T>;                                                                                        \
  template HeadParams<T> init_heads<T>(std::size_t, std::size_t, std::size_t, std::size_t, Rng&);                       \
  template Tensor<T> lm_logits<T>(const Tensor<T>&, const Tensor<T>&, const HeadParams<T>&);                            \
  template Tensor<T> retrieval_loss<T>(const Tensor<T>&, std::span<const std::int32_t>, const Tensor<T>&,               \
                                       const HeadParams<T>&);                                                           \
  template Tensor<T> mlm_loss<T>(const Tensor<T>&, const CorruptionOutcome&, const Tensor<T>&, const HeadParams<T>&);   \
  template Tensor<T> rtd_loss<T>(const Tensor<T>&, const CorruptionOutcome&, const HeadParams<T>&);                     \
  template Tensor<T> mixed_pretrain_loss<T>(const Tensor<T>&, const Tensor<T>&, double);                                \
  template Tensor<T> sequence_logits<T>(const Tensor<T>&, const HeadParams<T>&);                                        \
  template Tensor<T> token_logits<T>(const Tensor<T>&, const HeadParams<T>&);                                           \
  template std::vector<std::int32_t> argmax_rows<T>(const Tensor<T>&);                                                  \
  template AccuracyCount count_correct<T>(const Tensor<T>&, std::span<const std::int32_t>);

MUXPLM_INSTANTIATE(float)
MUXPLM_INSTANTIATE(double)

#undef MUXPLM_INSTANTIATE

}  // namespace muxplm
