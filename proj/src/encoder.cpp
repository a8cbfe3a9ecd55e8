#include "muxplm/encoder.hpp"

#include "muxplm/errors.hpp"

namespace muxplm {

void ModelConfig::validate() const {
  if (num_layers == 0) throw ConfigError("model config: num_layers must be positive");
  if (num_heads == 0 || head_size == 0) throw ConfigError("model config: heads and head size must be positive");
  if (num_heads * head_size != hidden_size) {
    throw ConfigError("model config: num_heads x head_size (" + std::to_string(num_heads) + "x" + std::to_string(head_size) +
                      ") != hidden_size " + std::to_string(hidden_size));
  }
  if (ffn_size == 0) throw ConfigError("model config: ffn_size must be positive");
  if (mux_width == 0) throw ConfigError("model config: mux width N must be >= 1");
  if (max_seq_len == 0) throw ConfigError("model config: max_seq_len must be >= 1");
  if (vocab_size == 0) throw ConfigError("model config: vocab_size must be positive");
  if (dropout < 0.0 || dropout >= 1.0 || attention_dropout < 0.0 || attention_dropout >= 1.0) {
    throw ConfigError("model config: dropout probabilities must be in [0,1)");
  }
}

ModelConfig build_config(std::string_view size_name, std::size_t mux_width, std::size_t vocab_size, std::size_t max_seq_len) {
  ModelConfig c;
  c.head_size = 64;
  if (size_name == "small") {
    c.num_layers = 4, c.hidden_size = 512, c.ffn_size = 2048, c.num_heads = 8;
  } else if (size_name == "base") {
    c.num_layers = 12, c.hidden_size = 768, c.ffn_size = 3072, c.num_heads = 12;
  } else if (size_name == "large") {
    c.num_layers = 24, c.hidden_size = 1024, c.ffn_size = 4096, c.num_heads = 16;
  } else if (size_name == "micro") {
    c.num_layers = 4, c.hidden_size = 128, c.ffn_size = 512, c.num_heads = 2;
  } else if (size_name == "bench") {
    c.num_layers = 2, c.hidden_size = 32, c.ffn_size = 128, c.num_heads = 2, c.head_size = 16;
  } else {
    throw ConfigError("unknown model size '" + std::string(size_name) + "' (expected small, base, large, micro or bench)");
  }
  c.mux_width = mux_width;
  c.vocab_size = vocab_size;
  c.max_seq_len = max_seq_len;
  c.validate();
  return c;
}

namespace {

template <typename T>
Tensor<T> normal_weight(diff::Shape shape, Rng& rng, double stddev = 0.02) {
  std::vector<T> values(diff::numel(shape));
  for (auto& v : values) v = static_cast<T>(stddev * rng.normal());
  return Tensor<T>::from(std::move(shape), std::move(values), true);
}

template <typename T>
Tensor<T> zeros(diff::Shape shape) {
  return Tensor<T>::zeros(std::move(shape), true);
}

template <typename T>
Tensor<T> ones(diff::Shape shape) {
  return Tensor<T>::full(std::move(shape), T(1), true);
}

}  // namespace

template <typename T>
void EncoderLayer<T>::visit(const std::string& prefix, const ParamVisitor<T>& fn) {
  fn(prefix + "ln1.gamma", ln1_gamma);
  fn(prefix + "ln1.beta", ln1_beta);
  fn(prefix + "attn.wq", wq);
  fn(prefix + "attn.bq", bq);
  fn(prefix + "attn.wk", wk);
  fn(prefix + "attn.bk", bk);
  fn(prefix + "attn.wv", wv);
  fn(prefix + "attn.bv", bv);
  fn(prefix + "attn.wo", wo);
  fn(prefix + "attn.bo", bo);
  fn(prefix + "ln2.gamma", ln2_gamma);
  fn(prefix + "ln2.beta", ln2_beta);
  fn(prefix + "ffn.w1", w_ff1);
  fn(prefix + "ffn.b1", b_ff1);
  fn(prefix + "ffn.w2", w_ff2);
  fn(prefix + "ffn.b2", b_ff2);
}

template <typename T>
void EncoderParams<T>::visit(const std::string& prefix, const ParamVisitor<T>& fn) {
  fn(prefix + "embed.token", token_embedding);
  fn(prefix + "embed.position", position_embedding);
  for (std::size_t i = 0; i < layers.size(); ++i) layers[i].visit(prefix + "layer" + std::to_string(i) + ".", fn);
  fn(prefix + "final_ln.gamma", final_gamma);
  fn(prefix + "final_ln.beta", final_beta);
}

template <typename T>
EncoderLayer<T> init_encoder_layer(std::size_t hidden, std::size_t ffn, Rng& rng) {
  EncoderLayer<T> l;
  l.ln1_gamma = ones<T>({hidden});
  l.ln1_beta = zeros<T>({hidden});
  l.wq = normal_weight<T>({hidden, hidden}, rng);
  l.bq = zeros<T>({hidden});
  l.wk = normal_weight<T>({hidden, hidden}, rng);
  l.bk = zeros<T>({hidden});
  l.wv = normal_weight<T>({hidden, hidden}, rng);
  l.bv = zeros<T>({hidden});
  l.wo = normal_weight<T>({hidden, hidden}, rng);
  l.bo = zeros<T>({hidden});
  l.ln2_gamma = ones<T>({hidden});
  l.ln2_beta = zeros<T>({hidden});
  l.w_ff1 = normal_weight<T>({hidden, ffn}, rng);
  l.b_ff1 = zeros<T>({ffn});
  l.w_ff2 = normal_weight<T>({ffn, hidden}, rng);
  l.b_ff2 = zeros<T>({hidden});
  return l;
}

template <typename T>
EncoderParams<T> init_encoder(const ModelConfig& config, Rng& rng) {
  config.validate();
  EncoderParams<T> p;
  p.token_embedding = normal_weight<T>({config.vocab_size, config.hidden_size}, rng);
  p.position_embedding = normal_weight<T>({config.max_seq_len, config.hidden_size}, rng);
  for (std::size_t i = 0; i < config.num_layers; ++i) {
    p.layers.push_back(init_encoder_layer<T>(config.hidden_size, config.ffn_size, rng));
  }
  p.final_gamma = ones<T>({config.hidden_size});
  p.final_beta = zeros<T>({config.hidden_size});
  return p;
}

template <typename T>
Tensor<T> embed(std::span<const std::int32_t> tokens, std::size_t sequences, const ModelConfig& config,
                const EncoderParams<T>& params) {
  if (sequences == 0 || tokens.size() % sequences != 0) {
    throw DimensionError("embed: " + std::to_string(tokens.size()) + " tokens do not split into " +
                         std::to_string(sequences) + " sequences");
  }
  const std::size_t len = tokens.size() / sequences;
  if (len > config.max_seq_len) {
    throw ValueError("embed: sequence length " + std::to_string(len) + " exceeds max_seq_len " +
                     std::to_string(config.max_seq_len));
  }
  auto x = diff::embedding(params.token_embedding, tokens, {sequences, len});
  return diff::add_positions(x, params.position_embedding);
}

namespace {

template <typename T>
Tensor<T> maybe_dropout(const Tensor<T>& x, double p, const ForwardOptions& options) {
  if (!options.train || p == 0.0) return x;
  if (options.rng == nullptr) throw ValueError("training forward requires an rng for dropout");
  return diff::dropout(x, p, *options.rng);
}

}  // namespace

template <typename T>
Tensor<T> encoder_layer_forward(const Tensor<T>& x, const EncoderLayer<T>& layer, const ModelConfig& config,
                                const ForwardOptions& options, std::vector<T>* attention_out) {
  if (x.rank() == 2) {
    auto y = encoder_layer_forward(diff::reshape(x, {1, x.dim(0), x.dim(1)}), layer, config, options, attention_out);
    return diff::reshape(y, x.shape());
  }
  if (x.rank() != 3 || x.dim(2) != config.hidden_size) {
    throw DimensionError("encoder: input " + diff::shape_str(x.shape()) + " does not have width " +
                         std::to_string(config.hidden_size));
  }
  const T eps = static_cast<T>(config.layer_norm_eps);
  auto h = diff::layer_norm(x, layer.ln1_gamma, layer.ln1_beta, eps);
  auto q = diff::linear(h, layer.wq, &layer.bq);
  auto k = diff::linear(h, layer.wk, &layer.bk);
  auto v = diff::linear(h, layer.wv, &layer.bv);
  diff::AttentionOptions attn;
  attn.heads = config.num_heads;
  attn.key_mask = options.key_mask;
  if (options.train && config.attention_dropout > 0.0) {
    if (options.rng == nullptr) throw ValueError("training forward requires an rng for dropout");
    attn.dropout = config.attention_dropout;
    attn.rng = options.rng;
  }
  auto a = diff::attention(q, k, v, attn, attention_out);
  a = maybe_dropout(diff::linear(a, layer.wo, &layer.bo), config.dropout, options);
  auto x1 = diff::add(x, a);
  auto h2 = diff::layer_norm(x1, layer.ln2_gamma, layer.ln2_beta, eps);
  auto f = diff::linear(diff::gelu(diff::linear(h2, layer.w_ff1, &layer.b_ff1)), layer.w_ff2, &layer.b_ff2);
  f = maybe_dropout(f, config.dropout, options);
  return diff::add(x1, f);
}

template <typename T>
EncoderState<T> encoder_forward(const Tensor<T>& x, const ModelConfig& config, const EncoderParams<T>& params,
                                const ForwardOptions& options) {
  if (x.rank() == 2) {
    auto state = encoder_forward(diff::reshape(x, {1, x.dim(0), x.dim(1)}), config, params, options);
    state.final_hidden = diff::reshape(state.final_hidden, x.shape());
    for (auto& h : state.per_layer_hidden) h = diff::reshape(h, x.shape());
    return state;
  }
  if (x.rank() != 3 || x.dim(2) != config.hidden_size) {
    throw DimensionError("encoder: input " + diff::shape_str(x.shape()) + " does not have width " +
                         std::to_string(config.hidden_size));
  }
  EncoderState<T> state;
  const std::size_t P = x.dim(0), L = x.dim(1);
  auto h = maybe_dropout(x, config.dropout, options);
  std::vector<T> probs;
  for (const auto& layer : params.layers) {
    h = encoder_layer_forward(h, layer, config, options, options.capture ? &probs : nullptr);
    if (options.capture) {
      state.per_layer_hidden.push_back(h.detach());
      state.per_layer_attention.push_back(Tensor<T>::from({P, config.num_heads, L, L}, std::move(probs)));
      probs.clear();
    }
  }
  state.final_hidden = diff::layer_norm(h, params.final_gamma, params.final_beta, static_cast<T>(config.layer_norm_eps));
  return state;
}

#define MUXPLM_INSTANTIATE(T)                                                                                   \
  template struct EncoderLayer<T>;                                                                              \
  template struct EncoderParams<T>;                                                                             \
  template EncoderLayer<T> init_encoder_layer<T>(std::size_t, std::size_t, Rng&);                               \
  template EncoderParams<T> init_encoder<T>(const ModelConfig&, Rng&);                                          \
  template Tensor<T> embed<T>(std::span<const std::int32_t>, std::size_t, const ModelConfig&, const EncoderParams<T>&); \
  template Tensor<T> encoder_layer_forward<T>(const Tensor<T>&, const EncoderLayer<T>&, const ModelConfig&,    \
                                              const ForwardOptions&, std::vector<T>*);                          \
  template EncoderState<T> encoder_forward<T>(const Tensor<T>&, const ModelConfig&, const EncoderParams<T>&,   \
                                              const ForwardOptions&);

MUXPLM_INSTANTIATE(float)
MUXPLM_INSTANTIATE(double)

#undef MUXPLM_INSTANTIATE

}  // namespace muxplm
