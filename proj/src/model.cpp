#include "muxplm/model.hpp"

#include "muxplm/errors.hpp"
#include "muxplm/vocab.hpp"

namespace muxplm {

std::string_view to_string(MuxKind k) {
  switch (k) {
    case MuxKind::gaussian: return "gaussian";
    case MuxKind::contextual: return "contextual";
    case MuxKind::none: return "none";
  }
  return "?";
}

std::string_view to_string(DemuxKind k) {
  switch (k) {
    case DemuxKind::rsa: return "rsa";
    case DemuxKind::prefix: return "prefix";
    case DemuxKind::none: return "none";
  }
  return "?";
}

MuxKind parse_mux_kind(std::string_view s) {
  if (s == "gaussian") return MuxKind::gaussian;
  if (s == "contextual") return MuxKind::contextual;
  if (s == "none") return MuxKind::none;
  throw ConfigError("unknown mux kind '" + std::string(s) + "' (expected gaussian, contextual or none)");
}

DemuxKind parse_demux_kind(std::string_view s) {
  if (s == "rsa") return DemuxKind::rsa;
  if (s == "prefix") return DemuxKind::prefix;
  if (s == "none") return DemuxKind::none;
  throw ConfigError("unknown demux kind '" + std::string(s) + "' (expected rsa, prefix or none)");
}

void ModelSpec::validate() const {
  config.validate();
  if (config.mux_width > vocab::kMaxMuxWidth) {
    throw ConfigError("N=" + std::to_string(config.mux_width) + " exceeds the maximum of " + std::to_string(vocab::kMaxMuxWidth));
  }
  if ((mux == MuxKind::none) != (demux == DemuxKind::none)) {
    throw ConfigError("mux and demux must both be 'none' (vanilla backbone) or both be set");
  }
  if (vanilla() && config.mux_width != 1) throw ConfigError("the vanilla backbone takes N=1");
  if (config.vocab_size < vocab::kSize) {
    throw ConfigError("vocab_size " + std::to_string(config.vocab_size) + " is smaller than the byte vocabulary (" +
                      std::to_string(vocab::kSize) + ")");
  }
  if (num_classes == 0 || num_tags == 0) throw ConfigError("num_classes and num_tags must be positive");
}

template <typename T>
void MuxModel<T>::visit(const ParamVisitor<T>& fn) {
  encoder.visit("encoder.", fn);
  switch (spec.mux) {
    case MuxKind::gaussian: fn("mux.keys", mux_keys.keys); break;
    case MuxKind::contextual:
      ctx_mux.visit("mux.", fn);
      fn("mux.keys", ctx_mux.keys.keys);
      break;
    case MuxKind::none: break;
  }
  switch (spec.demux) {
    case DemuxKind::rsa: rsa.visit("demux.", fn); break;
    case DemuxKind::prefix: prefix_mlp.visit("demux.", fn); break;
    case DemuxKind::none: break;
  }
  heads.visit("head.", fn);
}

template <typename T>
std::size_t MuxModel<T>::parameter_count() {
  std::size_t n = 0;
  visit([&n](const std::string&, Tensor<T>& t) { n += t.numel(); });
  return n;
}

template <typename T>
MuxModel<T> init_model(const ModelSpec& spec, std::uint64_t init_seed) {
  spec.validate();
  const auto& c = spec.config;
  Rng rng(init_seed);
  MuxModel<T> m;
  m.spec = spec;
  m.encoder = init_encoder<T>(c, rng);
  const std::uint64_t mux_seed = derive_seed(init_seed, 1), demux_seed = derive_seed(init_seed, 2);
  if (spec.mux == MuxKind::gaussian) {
    m.mux_keys = sample_mux_keys<T>(c.mux_width, c.hidden_size, mux_seed, spec.trainable_mux_keys);
  } else if (spec.mux == MuxKind::contextual) {
    m.ctx_mux = init_contextual_mux<T>(c, rng, mux_seed, spec.trainable_mux_keys);
  }
  if (spec.demux == DemuxKind::rsa) {
    m.rsa = init_demux_keys<T>(c.mux_width, c.hidden_size, demux_seed);
  } else if (spec.demux == DemuxKind::prefix) {
    m.prefix_mlp = init_demux_mlp<T>(c.hidden_size, rng);
  }
  m.heads = init_heads<T>(c.hidden_size, c.vocab_size, spec.num_classes, spec.num_tags, rng);
  return m;
}

namespace {

std::vector<std::uint8_t> validity(std::span<const std::int32_t> ids) {
  std::vector<std::uint8_t> v(ids.size());
  for (std::size_t i = 0; i < ids.size(); ++i) v[i] = ids[i] != vocab::kPad;
  return v;
}

}  // namespace

template <typename T>
ModelOutput<T> model_forward(const MuxModel<T>& model, std::span<const std::int32_t> tokens, std::size_t groups,
                             std::size_t seq_len, const ModelForwardOptions& options) {
  const auto& c = model.spec.config;
  const std::size_t N = model.n(), B = groups, L = seq_len, d = c.hidden_size;
  if (B == 0 || L == 0 || tokens.size() != B * N * L) {
    throw DimensionError("model_forward: " + std::to_string(tokens.size()) + " tokens do not form [" + std::to_string(B) + "x" +
                         std::to_string(N) + "x" + std::to_string(L) + "]");
  }
  ForwardOptions fopts;
  fopts.train = options.train;
  fopts.rng = options.rng;
  fopts.capture = options.capture;

  ModelOutput<T> out;
  if (model.spec.vanilla()) {
    out.encoder_mask = validity(tokens);
    out.encoder_len = L;
    fopts.key_mask = out.encoder_mask;
    out.encoder = encoder_forward(embed<T>(tokens, B, c, model.encoder), c, model.encoder, fopts);
    auto h = out.encoder.final_hidden;
    if (options.cls_only) h = diff::slice_axis(h, 1, 0, 1);
    out.demuxed = diff::reshape(h, {B, 1, h.dim(1), d});
    return out;
  }

  std::vector<std::int32_t> prefixed;
  std::span<const std::int32_t> ids = tokens;
  std::size_t Lx = L;
  if (model.spec.demux == DemuxKind::prefix) {
    prefixed = attach_prefix(tokens, L, make_prefix_block(N), c.max_seq_len);
    ids = prefixed;
    Lx = N + L;
  }
  const auto instance_valid = validity(ids);
  out.encoder_len = Lx;
  out.encoder_mask.assign(B * Lx, 0);
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t i = 0; i < N; ++i)
      for (std::size_t j = 0; j < Lx; ++j) out.encoder_mask[b * Lx + j] |= instance_valid[(b * N + i) * Lx + j];

  auto x = diff::reshape(embed<T>(ids, B * N, c, model.encoder), {B, N, Lx, d});
  Tensor<T> h_mux;
  if (model.spec.mux == MuxKind::gaussian) {
    h_mux = multiplex(x, model.mux_keys).h_mux;
  } else {
    ForwardOptions copts = fopts;
    copts.capture = false;
    copts.key_mask = instance_valid;
    h_mux = contextual_multiplex(x, model.ctx_mux, c, copts).h_mux;
  }
  fopts.key_mask = out.encoder_mask;
  out.encoder = encoder_forward(h_mux, c, model.encoder, fopts);
  auto h = out.encoder.final_hidden;
  if (model.spec.demux == DemuxKind::rsa) {
    if (options.cls_only) h = diff::slice_axis(h, 1, 0, 1);
    out.demuxed = rsa_demultiplex(h, model.rsa);
  } else {
    if (options.cls_only) h = diff::slice_axis(h, 1, 0, N + 1);
    out.demuxed = prefix_demultiplex(h, N, model.prefix_mlp);
  }
  return out;
}

#define MUXPLM_INSTANTIATE(T)                                                                                  \
  template struct MuxModel<T>;                                                                                 \
  template MuxModel<T> init_model<T>(const ModelSpec&, std::uint64_t);                                         \
  template ModelOutput<T> model_forward<T>(const MuxModel<T>&, std::span<const std::int32_t>, std::size_t,     \
                                           std::size_t, const ModelForwardOptions&);

MUXPLM_INSTANTIATE(float)
MUXPLM_INSTANTIATE(double)

#undef MUXPLM_INSTANTIATE

}  // namespace muxplm
