#pragma once

// Dense tensors and a tape-based reverse-mode differentiation engine.
//
// A Tensor is a shared handle onto a Node holding a row-major buffer. While a
// TapeScope is active on the current thread, every primitive whose inputs
// require gradients records its result on the tape together with a backward
// closure. backward() replays the tape in reverse and accumulates gradients
// into leaves. Without an active tape primitives only compute values, which is
// the inference path.

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "muxplm/rng.hpp"

namespace muxplm::diff {

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& shape);
std::string shape_str(const Shape& shape);

template <typename T>
struct Node {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;  // empty until first touched
  bool requires_grad = false;
  bool leaf = true;
  std::function<void(Node&)> backward;

  T* grad_buffer() {
    if (grad.empty()) grad.assign(data.size(), T(0));
    return grad.data();
  }
};

template <typename T>
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<Node<T>> node) : node_(std::move(node)) {}

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, T value, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<T> data, bool requires_grad = false);
  static Tensor scalar(T value, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t axis) const { return node_->shape.at(axis); }
  std::size_t numel() const { return node_->data.size(); }

  std::span<const T> data() const { return node_->data; }
  // Direct buffer access for leaves (parameter updates, test fixtures).
  std::span<T> mutable_data() { return node_->data; }
  std::vector<T> to_vector() const { return node_->data; }

  bool has_grad() const { return !node_->grad.empty(); }
  std::span<const T> grad() const { return node_->grad; }
  std::span<T> mutable_grad() { return {node_->grad_buffer(), node_->data.size()}; }
  void zero_grad() { node_->grad.clear(); }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool on) { node_->requires_grad = on; }
  bool is_leaf() const { return node_->leaf; }

  T item() const;
  T at(std::initializer_list<std::size_t> index) const;

  // Copy of the values with no graph attached.
  Tensor detach() const;

  Node<T>* node() const { return node_.get(); }
  const std::shared_ptr<Node<T>>& node_ptr() const { return node_; }

 private:
  std::shared_ptr<Node<T>> node_;
};

// Ordered record of primitive applications for one differentiation pass.
template <typename T>
class Tape {
 public:
  void record(std::shared_ptr<Node<T>> node) { entries_.push_back(std::move(node)); }
  std::size_t size() const { return entries_.size(); }
  const std::vector<std::shared_ptr<Node<T>>>& entries() const { return entries_; }
  void clear() { entries_.clear(); }

 private:
  std::vector<std::shared_ptr<Node<T>>> entries_;
};

// Makes `tape` the recording target for primitives of scalar type T on this
// thread until the scope ends. Scopes nest.
template <typename T>
class TapeScope {
 public:
  explicit TapeScope(Tape<T>& tape);
  ~TapeScope();
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape<T>* previous_;
};

template <typename T>
Tape<T>* active_tape();

// Populates dLoss/dLeaf on every requires_grad leaf reachable through `tape`.
// Leaf gradients accumulate across calls; intermediate gradients are reset.
template <typename T>
void backward(const Tensor<T>& loss, Tape<T>& tape);

// ---------------------------------------------------------------------------
// Primitives. "Leading dims" means every axis except the last one or two is
// flattened and treated as a batch.

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);
// a[m×k] · b[n×k]ᵀ
template <typename T>
Tensor<T> matmul_bt(const Tensor<T>& a, const Tensor<T>& b);

// x[...×k] · w[k×n] (+ bias[n])
template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>* bias = nullptr);
// x[...×k] · w[n×k]ᵀ (+ bias[n]); used for tied output projections.
template <typename T>
Tensor<T> linear_bt(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>* bias = nullptr);

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> hadamard(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> scale(const Tensor<T>& x, T factor);
// x[...×d] + b[d]
template <typename T>
Tensor<T> add_rows(const Tensor<T>& x, const Tensor<T>& b);
// x[...×d] ⊙ v[d]
template <typename T>
Tensor<T> mul_rows(const Tensor<T>& x, const Tensor<T>& v);

template <typename T>
Tensor<T> softmax(const Tensor<T>& x, std::size_t axis);
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                     T eps = T(1e-12));
template <typename T>
Tensor<T> gelu(const Tensor<T>& x);
// Inverted dropout. p == 0 returns x unchanged.
template <typename T>
Tensor<T> dropout(const Tensor<T>& x, double p, Rng& rng);

inline constexpr std::int32_t kIgnoreIndex = -100;

// Mean of -log softmax(logits)[target] over rows whose target != ignore_index.
template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& logits, std::span<const std::int32_t> targets,
                        std::int32_t ignore_index = kIgnoreIndex);
// Mean binary cross-entropy with logits; rows with label < 0 are ignored.
template <typename T>
Tensor<T> bce_with_logits(const Tensor<T>& logits, std::span<const std::int8_t> labels);

// table[V×d] gathered at ids; result shape = out_prefix + [d].
template <typename T>
Tensor<T> embedding(const Tensor<T>& table, std::span<const std::int32_t> ids, Shape out_prefix);
// x[P×L×d] + pos[Lmax×d] (first L rows, broadcast over P)
template <typename T>
Tensor<T> add_positions(const Tensor<T>& x, const Tensor<T>& pos);

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape);
// Swaps axis and axis+1.
template <typename T>
Tensor<T> swap_adjacent(const Tensor<T>& x, std::size_t axis);
template <typename T>
Tensor<T> mean_axis(const Tensor<T>& x, std::size_t axis);
template <typename T>
Tensor<T> slice_axis(const Tensor<T>& x, std::size_t axis, std::size_t start, std::size_t length);
template <typename T>
Tensor<T> sum(const Tensor<T>& x);
template <typename T>
Tensor<T> mean(const Tensor<T>& x);

// x[...×N×L×d] ⊙ keys[N×d] broadcast over L.
template <typename T>
Tensor<T> hadamard_keys(const Tensor<T>& x, const Tensor<T>& keys);
// (1/N) Σ_i x[...,i,:,:] ⊙ keys[i]  ->  [...×L×d]
template <typename T>
Tensor<T> keyed_mean(const Tensor<T>& x, const Tensor<T>& keys);
// a[...×L×d], c[...×N×d] or c[N×d]  ->  out[...×N×L×d] with out[..,i,j] = a[..,j] + c[..,i]
template <typename T>
Tensor<T> pair_add(const Tensor<T>& a, const Tensor<T>& c);

struct AttentionOptions {
  std::size_t heads = 1;
  // Optional [P×L] validity of key positions (1 = attend). Empty = all valid.
  std::span<const std::uint8_t> key_mask{};
  double dropout = 0.0;
  Rng* rng = nullptr;
};

// Scaled dot-product multi-head attention on q,k,v[P×L×d]. When `probs_out`
// is non-null it receives the (pre-dropout) attention weights [P×heads×L×L].
template <typename T>
Tensor<T> attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                    const AttentionOptions& options, std::vector<T>* probs_out = nullptr);

namespace detail {

// Odd rational approximation of erf on [-4, 4], saturating outside; absolute
// error below 1e-6. Branch-free so elementwise loops vectorise.
inline float erf_rational(float x) {
  x = std::min(std::max(x, -4.0f), 4.0f);
  const float x2 = x * x;
  float p = x2 * -2.72614225801306e-10f + 2.77068142495902e-08f;
  p = x2 * p + -2.10102402082508e-06f;
  p = x2 * p + -5.69250639462346e-05f;
  p = x2 * p + -7.34990630326855e-04f;
  p = x2 * p + -2.95459980854025e-03f;
  p = x2 * p + -1.60960333262415e-02f;
  p = x * p;
  float q = x2 * -1.45660718464996e-05f + -2.13374055278905e-04f;
  q = x2 * q + -1.68282697438203e-03f;
  q = x2 * q + -7.37332916720468e-03f;
  q = x2 * q + -1.42647390514189e-02f;
  return p / q;
}

}  // namespace detail

// Tensor with values converted to another scalar type, no graph.
template <typename To, typename From>
Tensor<To> cast(const Tensor<From>& x) {
  std::vector<To> out(x.data().begin(), x.data().end());
  return Tensor<To>::from(x.shape(), std::move(out), x.requires_grad());
}

}  // namespace muxplm::diff
