#pragma once

#include <cstdint>

#include "muxplm/encoder.hpp"

namespace muxplm {

// Per-instance Gaussian keys v^i used to superimpose N instances.
template <typename T>
struct MuxKeys {
  Tensor<T> keys;  // [N×d]
  std::uint64_t seed = 0;
  bool trainable = false;

  std::size_t n() const { return keys.dim(0); }
  std::size_t width() const { return keys.dim(1); }
};

template <typename T>
struct MultiplexedSequence {
  Tensor<T> h_mux;  // [L×d], or [B×L×d] for a batch of groups
  std::size_t n_instances = 0;
};

// Entries i.i.d. standard normal from a stream seeded by `seed`.
template <typename T>
MuxKeys<T> sample_mux_keys(std::size_t n, std::size_t width, std::uint64_t seed, bool trainable = false);

// inputs [N×L×d] or [B×N×L×d]; position j of the output is
// (1/N) Σ_i inputs[i,j] ⊙ v^i.
template <typename T>
MultiplexedSequence<T> multiplex(const Tensor<T>& inputs, const MuxKeys<T>& keys);

template <typename T>
struct ContextualMuxParams {
  EncoderLayer<T> trans_ctx;   // contextualizes each instance along its sequence
  EncoderLayer<T> trans_inst;  // attends across the N instances at each position
  MuxKeys<T> keys;

  void visit(const std::string& prefix, const ParamVisitor<T>& fn);
};

template <typename T>
ContextualMuxParams<T> init_contextual_mux(const ModelConfig& config, Rng& rng, std::uint64_t key_seed,
                                           bool trainable_keys = false);

// TRANS_ctx per instance, Hadamard with v^i, TRANS_inst across instances per
// position, then the mean over instances. options.key_mask, when given, is the
// per-instance padding mask [(B·N)×L] used inside TRANS_ctx.
template <typename T>
MultiplexedSequence<T> contextual_multiplex(const Tensor<T>& inputs, const ContextualMuxParams<T>& params,
                                            const ModelConfig& config, const ForwardOptions& options = {});

}  // namespace muxplm
