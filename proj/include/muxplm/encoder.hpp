#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "muxplm/rng.hpp"
#include "muxplm/tensor.hpp"

namespace muxplm {

using diff::Tensor;

struct ModelConfig {
  std::size_t num_layers = 4;
  std::size_t hidden_size = 512;
  std::size_t ffn_size = 2048;
  std::size_t num_heads = 8;
  std::size_t head_size = 64;
  std::size_t max_seq_len = 128;
  std::size_t vocab_size = 0;
  std::size_t mux_width = 1;
  double dropout = 0.1;
  double attention_dropout = 0.1;
  double layer_norm_eps = 1e-12;

  // Throws ConfigError when the geometry is inconsistent.
  void validate() const;
};

// Named geometries: small / base / large follow the published BERT shapes,
// micro is the desk-scale 4-layer d=128 variant and bench a 2-layer d=32
// backbone for throughput runs. Unknown names throw.
ModelConfig build_config(std::string_view size_name, std::size_t mux_width, std::size_t vocab_size,
                         std::size_t max_seq_len);

template <typename T>
using ParamVisitor = std::function<void(const std::string& name, Tensor<T>& tensor)>;

// Pre-layer-norm transformer block.
template <typename T>
struct EncoderLayer {
  Tensor<T> ln1_gamma, ln1_beta;
  Tensor<T> wq, bq, wk, bk, wv, bv, wo, bo;
  Tensor<T> ln2_gamma, ln2_beta;
  Tensor<T> w_ff1, b_ff1, w_ff2, b_ff2;

  void visit(const std::string& prefix, const ParamVisitor<T>& fn);
};

template <typename T>
struct EncoderParams {
  Tensor<T> token_embedding;     // [V×d]
  Tensor<T> position_embedding;  // [Lmax×d]
  std::vector<EncoderLayer<T>> layers;
  Tensor<T> final_gamma, final_beta;

  void visit(const std::string& prefix, const ParamVisitor<T>& fn);
};

// normal(0, 0.02) weights, zero biases, unit layer-norm gains.
template <typename T>
EncoderLayer<T> init_encoder_layer(std::size_t hidden, std::size_t ffn, Rng& rng);
template <typename T>
EncoderParams<T> init_encoder(const ModelConfig& config, Rng& rng);

struct ForwardOptions {
  bool capture = false;
  // [P×L] key validity for attention; empty means every key is valid.
  std::span<const std::uint8_t> key_mask{};
  bool train = false;  // enables dropout, which then requires rng
  Rng* rng = nullptr;
};

template <typename T>
struct EncoderState {
  Tensor<T> final_hidden;                    // same shape as the input
  std::vector<Tensor<T>> per_layer_hidden;   // block outputs, when captured
  std::vector<Tensor<T>> per_layer_attention;  // [P×heads×L×L], when captured
};

// tokens laid out as P sequences of length L (P·L ids) -> [P×L×d]
template <typename T>
Tensor<T> embed(std::span<const std::int32_t> tokens, std::size_t sequences, const ModelConfig& config,
                const EncoderParams<T>& params);

// x is [L×d] or [P×L×d].
template <typename T>
Tensor<T> encoder_layer_forward(const Tensor<T>& x, const EncoderLayer<T>& layer, const ModelConfig& config,
                                const ForwardOptions& options, std::vector<T>* attention_out = nullptr);

template <typename T>
EncoderState<T> encoder_forward(const Tensor<T>& x, const ModelConfig& config, const EncoderParams<T>& params,
                                const ForwardOptions& options);

}  // namespace muxplm
