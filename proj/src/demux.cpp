#include "muxplm/demux.hpp"

#include <cmath>

#include "muxplm/errors.hpp"
#include "muxplm/vocab.hpp"

namespace muxplm {

template <typename T>
void DemuxMlp<T>::visit(const std::string& prefix, const ParamVisitor<T>& fn) {
  fn(prefix + "mlp.w1", w1);
  fn(prefix + "mlp.b1", b1);
  fn(prefix + "mlp.w2", w2);
  fn(prefix + "mlp.b2", b2);
}

template <typename T>
void DemuxKeys<T>::visit(const std::string& prefix, const ParamVisitor<T>& fn) {
  fn(prefix + "keys", keys);
  mlp.visit(prefix, fn);
}

template <typename T>
DemuxMlp<T> init_demux_mlp(std::size_t width, Rng& rng) {
  auto normal = [&rng](diff::Shape shape) {
    std::vector<T> values(diff::numel(shape));
    for (auto& v : values) v = static_cast<T>(0.02 * rng.normal());
    return Tensor<T>::from(std::move(shape), std::move(values), true);
  };
  DemuxMlp<T> mlp;
  mlp.w1 = normal({2 * width, width});
  mlp.b1 = Tensor<T>::zeros({width}, true);
  mlp.w2 = normal({width, width});
  mlp.b2 = Tensor<T>::zeros({width}, true);
  return mlp;
}

template <typename T>
DemuxKeys<T> init_demux_keys(std::size_t n, std::size_t width, std::uint64_t seed) {
  if (n == 0 || width == 0) throw ValueError("init_demux_keys: N and d must be positive");
  Rng rng(seed);
  const double stddev = std::pow(static_cast<double>(width), -0.25);
  std::vector<T> values(n * width);
  for (auto& v : values) v = static_cast<T>(stddev * rng.normal());
  DemuxKeys<T> dk;
  dk.keys = Tensor<T>::from({n, width}, std::move(values), true);
  dk.mlp = init_demux_mlp<T>(width, rng);
  return dk;
}

template <typename T>
Tensor<T> demux_head(const Tensor<T>& hidden, const Tensor<T>& keys, const DemuxMlp<T>& mlp) {
  const std::size_t d = mlp.width();
  if (hidden.rank() < 2 || hidden.shape().back() != d) {
    throw DimensionError("demux: hidden " + diff::shape_str(hidden.shape()) + " does not match MLP width " + std::to_string(d));
  }
  if (keys.rank() < 2 || keys.shape().back() != d) {
    throw DimensionError("demux: keys " + diff::shape_str(keys.shape()) + " do not match MLP width " + std::to_string(d));
  }
  // concat(h, k)·W1 = h·W1[0:d] + k·W1[d:2d], so the hidden half is computed
  // once per position and shared by every instance.
  auto w_hidden = diff::slice_axis(mlp.w1, 0, 0, d);
  auto w_key = diff::slice_axis(mlp.w1, 0, d, d);
  auto from_hidden = diff::linear(hidden, w_hidden);
  auto from_key = diff::linear(keys, w_key, &mlp.b1);
  auto pre = diff::pair_add(from_hidden, from_key);
  return diff::linear(diff::gelu(pre), mlp.w2, &mlp.b2);
}

template <typename T>
Tensor<T> rsa_demultiplex(const Tensor<T>& h_mux, const DemuxKeys<T>& dk) {
  if (h_mux.rank() != 2 && h_mux.rank() != 3) {
    throw DimensionError("rsa_demultiplex: h_mux must be [L×d] or [B×L×d], got " + diff::shape_str(h_mux.shape()));
  }
  if (h_mux.shape().back() != dk.keys.dim(1)) {
    throw DimensionError("rsa_demultiplex: h_mux width " + std::to_string(h_mux.shape().back()) + " != key width " +
                         std::to_string(dk.keys.dim(1)));
  }
  return demux_head(h_mux, dk.keys, dk.mlp);
}

template <typename T>
Tensor<T> rsa_demultiplex(const MultiplexedSequence<T>& h_mux, const DemuxKeys<T>& dk) {
  if (h_mux.n_instances != dk.n()) {
    throw DimensionError("rsa_demultiplex: sequence carries " + std::to_string(h_mux.n_instances) + " instances, keys expect " +
                         std::to_string(dk.n()));
  }
  return rsa_demultiplex(h_mux.h_mux, dk);
}

std::vector<std::int32_t> PrefixBlock::prefix(std::size_t instance) const {
  if (instance >= n()) throw ValueError("prefix: instance " + std::to_string(instance) + " out of range");
  std::vector<std::int32_t> out(n(), epsilon_pad);
  out[instance] = epsilon[instance];
  return out;
}

PrefixBlock make_prefix_block(std::size_t n) {
  if (n == 0 || n > vocab::kMaxMuxWidth) {
    throw ValueError("make_prefix_block: N must be in [1," + std::to_string(vocab::kMaxMuxWidth) + "]");
  }
  PrefixBlock pb;
  for (std::size_t i = 0; i < n; ++i) pb.epsilon.push_back(vocab::epsilon(i));
  pb.epsilon_pad = vocab::kEpsilonPad;
  return pb;
}

std::vector<std::int32_t> attach_prefix(std::span<const std::int32_t> tokens, std::size_t body_len, const PrefixBlock& pb,
                                        std::size_t max_seq_len) {
  const std::size_t n = pb.n();
  if (body_len + n > max_seq_len) {
    throw ValueError("attach_prefix: body length " + std::to_string(body_len) + " + prefix " + std::to_string(n) +
                     " exceeds max_seq_len " + std::to_string(max_seq_len));
  }
  if (body_len == 0 || tokens.size() % (n * body_len) != 0) {
    throw DimensionError("attach_prefix: " + std::to_string(tokens.size()) + " tokens are not groups of " + std::to_string(n) +
                         "x" + std::to_string(body_len));
  }
  const std::size_t rows = tokens.size() / body_len;
  std::vector<std::int32_t> out;
  out.reserve(rows * (n + body_len));
  for (std::size_t r = 0; r < rows; ++r) {
    const auto prefix = pb.prefix(r % n);
    out.insert(out.end(), prefix.begin(), prefix.end());
    out.insert(out.end(), tokens.begin() + static_cast<std::ptrdiff_t>(r * body_len),
               tokens.begin() + static_cast<std::ptrdiff_t>((r + 1) * body_len));
  }
  return out;
}

template <typename T>
Tensor<T> prefix_demultiplex(const Tensor<T>& enc_out, std::size_t n, const DemuxMlp<T>& mlp) {
  if (enc_out.rank() != 2 && enc_out.rank() != 3) {
    throw DimensionError("prefix_demultiplex: expected [(N+L)×d] or [B×(N+L)×d], got " + diff::shape_str(enc_out.shape()));
  }
  const std::size_t axis = enc_out.rank() - 2;
  const std::size_t total = enc_out.dim(axis);
  if (total <= n) {
    throw DimensionError("prefix_demultiplex: sequence length " + std::to_string(total) + " must exceed N=" + std::to_string(n));
  }
  auto prefix_zone = diff::slice_axis(enc_out, axis, 0, n);
  auto body = diff::slice_axis(enc_out, axis, n, total - n);
  return demux_head(body, prefix_zone, mlp);
}

#define MUXPLM_INSTANTIATE(T)                                                                        \
  template struct DemuxMlp<T>;                                                                       \
  template struct DemuxKeys<T>;                                                                      \
  template DemuxMlp<T> init_demux_mlp<T>(std::size_t, Rng&);                                         \
  template DemuxKeys<T> init_demux_keys<T>(std::size_t, std::size_t, std::uint64_t);                 \
  template Tensor<T> demux_head<T>(const Tensor<T>&, const Tensor<T>&, const DemuxMlp<T>&);          \
  template Tensor<T> rsa_demultiplex<T>(const Tensor<T>&, const DemuxKeys<T>&);                      \
  template Tensor<T> rsa_demultiplex<T>(const MultiplexedSequence<T>&, const DemuxKeys<T>&);         \
  template Tensor<T> prefix_demultiplex<T>(const Tensor<T>&, std::size_t, const DemuxMlp<T>&);

MUXPLM_INSTANTIATE(float)
MUXPLM_INSTANTIATE(double)

#undef MUXPLM_INSTANTIATE

}  // namespace muxplm
