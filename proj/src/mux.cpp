#include "muxplm/mux.hpp"

#include "muxplm/errors.hpp"

namespace muxplm {

template <typename T>
MuxKeys<T> sample_mux_keys(std::size_t n, std::size_t width, std::uint64_t seed, bool trainable) {
  if (n == 0 || width == 0) throw ValueError("sample_mux_keys: N and d must be positive");
  Rng rng(seed);
  std::vector<T> values(n * width);
  for (auto& v : values) v = static_cast<T>(rng.normal());
  MuxKeys<T> keys;
  keys.keys = Tensor<T>::from({n, width}, std::move(values), trainable);
  keys.seed = seed;
  keys.trainable = trainable;
  return keys;
}

namespace {

template <typename T>
void check_instances(const char* op, const Tensor<T>& inputs, const MuxKeys<T>& keys) {
  if (inputs.rank() != 3 && inputs.rank() != 4) {
    throw DimensionError(std::string(op) + ": inputs must be [N×L×d] or [B×N×L×d], got " + diff::shape_str(inputs.shape()));
  }
  const std::size_t r = inputs.rank();
  if (inputs.dim(r - 3) != keys.n()) {
    throw DimensionError(std::string(op) + ": inputs carry " + std::to_string(inputs.dim(r - 3)) + " instances but keys have N=" +
                         std::to_string(keys.n()));
  }
  if (inputs.dim(r - 1) != keys.width()) {
    throw DimensionError(std::string(op) + ": input width " + std::to_string(inputs.dim(r - 1)) + " != key width " +
                         std::to_string(keys.width()));
  }
}

}  // namespace

template <typename T>
MultiplexedSequence<T> multiplex(const Tensor<T>& inputs, const MuxKeys<T>& keys) {
  check_instances("multiplex", inputs, keys);
  return {diff::keyed_mean(inputs, keys.keys), keys.n()};
}

template <typename T>
void ContextualMuxParams<T>::visit(const std::string& prefix, const ParamVisitor<T>& fn) {
  trans_ctx.visit(prefix + "ctx.", fn);
  trans_inst.visit(prefix + "inst.", fn);
}

template <typename T>
ContextualMuxParams<T> init_contextual_mux(const ModelConfig& config, Rng& rng, std::uint64_t key_seed, bool trainable_keys) {
  ContextualMuxParams<T> p;
  p.trans_ctx = init_encoder_layer<T>(config.hidden_size, config.ffn_size, rng);
  p.trans_inst = init_encoder_layer<T>(config.hidden_size, config.ffn_size, rng);
  p.keys = sample_mux_keys<T>(config.mux_width, config.hidden_size, key_seed, trainable_keys);
  return p;
}

template <typename T>
MultiplexedSequence<T> contextual_multiplex(const Tensor<T>& inputs, const ContextualMuxParams<T>& params,
                                            const ModelConfig& config, const ForwardOptions& options) {
  check_instances("contextual_multiplex", inputs, params.keys);
  if (inputs.dim(inputs.rank() - 1) != config.hidden_size) {
    throw DimensionError("contextual_multiplex: input width does not match the layer width " + std::to_string(config.hidden_size));
  }
  const bool single = inputs.rank() == 3;
  const std::size_t B = single ? 1 : inputs.dim(0);
  const std::size_t N = params.keys.n(), L = inputs.dim(inputs.rank() - 2), d = config.hidden_size;

  ForwardOptions ctx_opts = options;
  ctx_opts.capture = false;
  auto ctx = encoder_layer_forward(diff::reshape(inputs, {B * N, L, d}), params.trans_ctx, config, ctx_opts);
  auto keyed = diff::hadamard_keys(diff::reshape(ctx, {B, N, L, d}), params.keys.keys);
  // [B×N×L×d] -> [B×L×N×d]: each position becomes a length-N sequence.
  auto across = diff::reshape(diff::swap_adjacent(keyed, 1), {B * L, N, d});
  ForwardOptions inst_opts = options;
  inst_opts.capture = false;
  inst_opts.key_mask = {};
  auto mixed = encoder_layer_forward(across, params.trans_inst, config, inst_opts);
  auto averaged = diff::mean_axis(diff::reshape(mixed, {B, L, N, d}), 2);
  if (single) averaged = diff::reshape(averaged, {L, d});
  return {averaged, N};
}

#define MUXPLM_INSTANTIATE(T)                                                                                   \
  template MuxKeys<T> sample_mux_keys<T>(std::size_t, std::size_t, std::uint64_t, bool);                        \
  template MultiplexedSequence<T> multiplex<T>(const Tensor<T>&, const MuxKeys<T>&);                            \
  template struct ContextualMuxParams<T>;                                                                       \
  template ContextualMuxParams<T> init_contextual_mux<T>(const ModelConfig&, Rng&, std::uint64_t, bool);        \
  template MultiplexedSequence<T> contextual_multiplex<T>(const Tensor<T>&, const ContextualMuxParams<T>&,      \
                                                          const ModelConfig&, const ForwardOptions&);

MUXPLM_INSTANTIATE(float)
MUXPLM_INSTANTIATE(double)

#undef MUXPLM_INSTANTIATE

}  // namespace muxplm
