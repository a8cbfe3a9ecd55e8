#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "muxplm/mux.hpp"

namespace muxplm {

// Shared two-layer head applied to concat(hidden, key): 2d -> d -> d with
// GELU in between. w1 is stored as one [2d×d] matrix; rows [0,d) act on the
// hidden state and rows [d,2d) on the key.
template <typename T>
struct DemuxMlp {
  Tensor<T> w1, b1, w2, b2;

  std::size_t width() const { return w2.dim(0); }
  void visit(const std::string& prefix, const ParamVisitor<T>& fn);
};

template <typename T>
DemuxMlp<T> init_demux_mlp(std::size_t width, Rng& rng);

// Learned private keys k^i plus the shared MLP.
template <typename T>
struct DemuxKeys {
  Tensor<T> keys;  // [N×d]
  DemuxMlp<T> mlp;

  std::size_t n() const { return keys.dim(0); }
  void visit(const std::string& prefix, const ParamVisitor<T>& fn);
};

// keys ~ normal with variance 1/sqrt(d), so row norms sit near d^(1/4).
// MLP follows the encoder init scheme.
template <typename T>
DemuxKeys<T> init_demux_keys(std::size_t n, std::size_t width, std::uint64_t seed);

// out[..., i, j, :] = MLP(concat(hidden[..., j, :], keys[(...,) i, :])).
// hidden [...×L×d]; keys [N×d] shared or [...×N×d] per sequence.
template <typename T>
Tensor<T> demux_head(const Tensor<T>& hidden, const Tensor<T>& keys, const DemuxMlp<T>& mlp);

// h_mux [L×d] or [B×L×d] -> [N×L×d] or [B×N×L×d]
template <typename T>
Tensor<T> rsa_demultiplex(const MultiplexedSequence<T>& h_mux, const DemuxKeys<T>& dk);
template <typename T>
Tensor<T> rsa_demultiplex(const Tensor<T>& h_mux, const DemuxKeys<T>& dk);

struct PrefixBlock {
  std::vector<std::int32_t> epsilon;  // ε^1..ε^N
  std::int32_t epsilon_pad = 0;

  std::size_t n() const { return epsilon.size(); }
  // prefix^i: ε^i at position i, ε^pad elsewhere.
  std::vector<std::int32_t> prefix(std::size_t instance) const;
};

PrefixBlock make_prefix_block(std::size_t n);

// tokens hold `groups` blocks of N instances, each of length body_len, laid
// out [groups×N×body_len]. Returns [groups×N×(N+body_len)].
std::vector<std::int32_t> attach_prefix(std::span<const std::int32_t> tokens, std::size_t body_len, const PrefixBlock& pb,
                                        std::size_t max_seq_len);

// enc_out [(N+L)×d] or [B×(N+L)×d]: p^i is row i of the prefix zone and
// h^i_j = MLP(concat(enc_out[N+j], p^i)). Output drops the prefix zone.
template <typename T>
Tensor<T> prefix_demultiplex(const Tensor<T>& enc_out, std::size_t n, const DemuxMlp<T>& mlp);

}  // namespace muxplm
