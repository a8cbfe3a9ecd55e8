#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <type_traits>

#include "blas.hpp"
#include "muxplm/errors.hpp"
#include "muxplm/tensor.hpp"

namespace muxplm::diff {

namespace {

using detail::gemm;

template <typename T>
bool tracking(std::initializer_list<const Tensor<T>*> inputs) {
  if (active_tape<T>() == nullptr) return false;
  return std::any_of(inputs.begin(), inputs.end(),
                     [](const Tensor<T>* t) { return t != nullptr && t->requires_grad(); });
}

template <typename T>
std::shared_ptr<Node<T>> make_node(Shape shape) {
  auto node = std::make_shared<Node<T>>();
  node->data.assign(numel(shape), T(0));
  node->shape = std::move(shape);
  return node;
}

template <typename T>
Tensor<T> finish(std::shared_ptr<Node<T>> out, bool track, std::function<void(Node<T>&)> bw) {
  if (track) {
    out->requires_grad = true;
    out->leaf = false;
    out->backward = std::move(bw);
    active_tape<T>()->record(out);
  }
  return Tensor<T>(std::move(out));
}

// Gradient buffer of an input, or nullptr when it does not take gradients.
template <typename T>
T* grad_of(const std::shared_ptr<Node<T>>& node) {
  return node->requires_grad ? node->grad_buffer() : nullptr;
}

[[noreturn]] void dim_error(const std::string& op, const Shape& a, const Shape& b) {
  throw DimensionError(op + ": incompatible shapes " + shape_str(a) + " and " + shape_str(b));
}

void require_rank_at_least(const std::string& op, const Shape& s, std::size_t r) {
  if (s.size() < r) {
    throw DimensionError(op + ": expected rank >= " + std::to_string(r) + ", got " + shape_str(s));
  }
}

// Splits shape at `axis` into (outer, extent, inner).
struct AxisView {
  std::size_t outer = 1, extent = 1, inner = 1;
};

AxisView axis_view(const Shape& s, std::size_t axis) {
  AxisView v;
  for (std::size_t i = 0; i < axis; ++i) v.outer *= s[i];
  v.extent = s[axis];
  for (std::size_t i = axis + 1; i < s.size(); ++i) v.inner *= s[i];
  return v;
}

}  // namespace

// ---------------------------------------------------------------------------
// Matrix products

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) dim_error("matmul", a.shape(), b.shape());
  const int m = static_cast<int>(a.dim(0)), k = static_cast<int>(a.dim(1)), n = static_cast<int>(b.dim(1));
  auto out = make_node<T>({a.dim(0), b.dim(1)});
  if (m && n && k) gemm(false, false, m, n, k, T(1), a.data().data(), k, b.data().data(), n, T(0), out->data.data(), n);
  auto an = a.node_ptr(), bn = b.node_ptr();
  return finish<T>(out, tracking<T>({&a, &b}), [an, bn, m, n, k](Node<T>& self) {
    if (!m || !n || !k) return;
    if (T* ga = grad_of(an)) gemm(false, true, m, k, n, T(1), self.grad.data(), n, bn->data.data(), n, T(1), ga, k);
    if (T* gb = grad_of(bn)) gemm(true, false, k, n, m, T(1), an->data.data(), k, self.grad.data(), n, T(1), gb, n);
  });
}

template <typename T>
Tensor<T> matmul_bt(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(1)) dim_error("matmul_bt", a.shape(), b.shape());
  const int m = static_cast<int>(a.dim(0)), k = static_cast<int>(a.dim(1)), n = static_cast<int>(b.dim(0));
  auto out = make_node<T>({a.dim(0), b.dim(0)});
  if (m && n && k) gemm(false, true, m, n, k, T(1), a.data().data(), k, b.data().data(), k, T(0), out->data.data(), n);
  auto an = a.node_ptr(), bn = b.node_ptr();
  return finish<T>(out, tracking<T>({&a, &b}), [an, bn, m, n, k](Node<T>& self) {
    if (!m || !n || !k) return;
    if (T* ga = grad_of(an)) gemm(false, false, m, k, n, T(1), self.grad.data(), n, bn->data.data(), k, T(1), ga, k);
    if (T* gb = grad_of(bn)) gemm(true, false, n, k, m, T(1), self.grad.data(), n, an->data.data(), k, T(1), gb, k);
  });
}

namespace {

template <typename T>
Tensor<T> linear_impl(const char* name, const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>* bias,
                      bool w_transposed) {
  require_rank_at_least(name, x.shape(), 1);
  if (w.rank() != 2) dim_error(name, x.shape(), w.shape());
  const std::size_t k = x.shape().back();
  const std::size_t n = w_transposed ? w.dim(0) : w.dim(1);
  if ((w_transposed ? w.dim(1) : w.dim(0)) != k) dim_error(name, x.shape(), w.shape());
  if (bias && (bias->rank() != 1 || bias->dim(0) != n)) dim_error(name, w.shape(), bias->shape());
  const std::size_t rows = x.numel() / std::max<std::size_t>(k, 1);
  Shape out_shape = x.shape();
  out_shape.back() = n;
  auto out = make_node<T>(out_shape);
  const int M = static_cast<int>(rows), N = static_cast<int>(n), K = static_cast<int>(k);
  const int ldw = w_transposed ? K : N;
  if (M && N && K) gemm(false, w_transposed, M, N, K, T(1), x.data().data(), K, w.data().data(), ldw, T(0), out->data.data(), N);
  if (bias) {
    const T* b = bias->data().data();
    for (std::size_t r = 0; r < rows; ++r) {
      T* row = out->data.data() + r * n;
      for (std::size_t j = 0; j < n; ++j) row[j] += b[j];
    }
  }
  auto xn = x.node_ptr(), wn = w.node_ptr();
  auto bn = bias ? bias->node_ptr() : nullptr;
  const bool track = tracking<T>({&x, &w, bias});
  return finish<T>(out, track, [xn, wn, bn, M, N, K, ldw, w_transposed](Node<T>& self) {
    if (!M || !N) return;
    const T* g = self.grad.data();
    if (K) {
      if (T* gx = grad_of(xn)) gemm(false, !w_transposed, M, K, N, T(1), g, N, wn->data.data(), ldw, T(1), gx, K);
      if (T* gw = grad_of(wn)) {
        if (w_transposed) {
          gemm(true, false, N, K, M, T(1), g, N, xn->data.data(), K, T(1), gw, K);
        } else {
          gemm(true, false, K, N, M, T(1), xn->data.data(), K, g, N, T(1), gw, N);
        }
      }
    }
    if (bn) {
      if (T* gb = grad_of(bn)) {
        for (int r = 0; r < M; ++r)
          for (int j = 0; j < N; ++j) gb[j] += g[static_cast<std::size_t>(r) * N + j];
      }
    }
  });
}

}  // namespace

template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>* bias) {
  return linear_impl("linear", x, w, bias, false);
}

template <typename T>
Tensor<T> linear_bt(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>* bias) {
  return linear_impl("linear_bt", x, w, bias, true);
}

// ---------------------------------------------------------------------------
// Elementwise

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) dim_error("add", a.shape(), b.shape());
  auto out = make_node<T>(a.shape());
  for (std::size_t i = 0; i < out->data.size(); ++i) out->data[i] = a.data()[i] + b.data()[i];
  auto an = a.node_ptr(), bn = b.node_ptr();
  return finish<T>(out, tracking<T>({&a, &b}), [an, bn](Node<T>& self) {
    for (auto& in : {an, bn}) {
      if (T* g = grad_of(in))
        for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
    }
  });
}

template <typename T>
Tensor<T> hadamard(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) dim_error("hadamard", a.shape(), b.shape());
  auto out = make_node<T>(a.shape());
  for (std::size_t i = 0; i < out->data.size(); ++i) out->data[i] = a.data()[i] * b.data()[i];
  auto an = a.node_ptr(), bn = b.node_ptr();
  return finish<T>(out, tracking<T>({&a, &b}), [an, bn](Node<T>& self) {
    if (T* ga = grad_of(an))
      for (std::size_t i = 0; i < self.grad.size(); ++i) ga[i] += self.grad[i] * bn->data[i];
    if (T* gb = grad_of(bn))
      for (std::size_t i = 0; i < self.grad.size(); ++i) gb[i] += self.grad[i] * an->data[i];
  });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& x, T factor) {
  auto out = make_node<T>(x.shape());
  for (std::size_t i = 0; i < out->data.size(); ++i) out->data[i] = x.data()[i] * factor;
  auto xn = x.node_ptr();
  return finish<T>(out, tracking<T>({&x}), [xn, factor](Node<T>& self) {
    if (T* g = grad_of(xn))
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * factor;
  });
}

template <typename T>
Tensor<T> add_rows(const Tensor<T>& x, const Tensor<T>& b) {
  require_rank_at_least("add_rows", x.shape(), 1);
  const std::size_t d = x.shape().back();
  if (b.rank() != 1 || b.dim(0) != d) dim_error("add_rows", x.shape(), b.shape());
  auto out = make_node<T>(x.shape());
  const std::size_t rows = d ? x.numel() / d : 0;
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < d; ++j) out->data[r * d + j] = x.data()[r * d + j] + b.data()[j];
  auto xn = x.node_ptr(), bn = b.node_ptr();
  return finish<T>(out, tracking<T>({&x, &b}), [xn, bn, rows, d](Node<T>& self) {
    if (T* gx = grad_of(xn))
      for (std::size_t i = 0; i < self.grad.size(); ++i) gx[i] += self.grad[i];
    if (T* gb = grad_of(bn))
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < d; ++j) gb[j] += self.grad[r * d + j];
  });
}

template <typename T>
Tensor<T> mul_rows(const Tensor<T>& x, const Tensor<T>& v) {
  require_rank_at_least("mul_rows", x.shape(), 1);
  const std::size_t d = x.shape().back();
  if (v.rank() != 1 || v.dim(0) != d) dim_error("mul_rows", x.shape(), v.shape());
  auto out = make_node<T>(x.shape());
  const std::size_t rows = d ? x.numel() / d : 0;
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < d; ++j) out->data[r * d + j] = x.data()[r * d + j] * v.data()[j];
  auto xn = x.node_ptr(), vn = v.node_ptr();
  return finish<T>(out, tracking<T>({&x, &v}), [xn, vn, rows, d](Node<T>& self) {
    if (T* gx = grad_of(xn))
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < d; ++j) gx[r * d + j] += self.grad[r * d + j] * vn->data[j];
    if (T* gv = grad_of(vn))
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < d; ++j) gv[j] += self.grad[r * d + j] * xn->data[r * d + j];
  });
}

// ---------------------------------------------------------------------------
// Normalization and nonlinearities

template <typename T>
Tensor<T> softmax(const Tensor<T>& x, std::size_t axis) {
  if (axis >= x.rank()) throw DimensionError("softmax: axis " + std::to_string(axis) + " invalid for " + shape_str(x.shape()));
  const AxisView v = axis_view(x.shape(), axis);
  if (v.extent == 0) throw DimensionError("softmax: empty axis");
  auto out = make_node<T>(x.shape());
  const T* in = x.data().data();
  T* y = out->data.data();
  for (std::size_t o = 0; o < v.outer; ++o) {
    for (std::size_t i = 0; i < v.inner; ++i) {
      const std::size_t base = o * v.extent * v.inner + i;
      T mx = -std::numeric_limits<T>::infinity();
      for (std::size_t e = 0; e < v.extent; ++e) mx = std::max(mx, in[base + e * v.inner]);
      double total = 0.0;
      for (std::size_t e = 0; e < v.extent; ++e) {
        const T ex = std::exp(in[base + e * v.inner] - mx);
        y[base + e * v.inner] = ex;
        total += ex;
      }
      const T inv = static_cast<T>(1.0 / total);
      for (std::size_t e = 0; e < v.extent; ++e) y[base + e * v.inner] *= inv;
    }
  }
  auto xn = x.node_ptr();
  return finish<T>(out, tracking<T>({&x}), [xn, v](Node<T>& self) {
    T* gx = grad_of(xn);
    if (!gx) return;
    for (std::size_t o = 0; o < v.outer; ++o) {
      for (std::size_t i = 0; i < v.inner; ++i) {
        const std::size_t base = o * v.extent * v.inner + i;
        double dot = 0.0;
        for (std::size_t e = 0; e < v.extent; ++e) {
          const std::size_t at = base + e * v.inner;
          dot += static_cast<double>(self.grad[at]) * self.data[at];
        }
        for (std::size_t e = 0; e < v.extent; ++e) {
          const std::size_t at = base + e * v.inner;
          gx[at] += self.data[at] * (self.grad[at] - static_cast<T>(dot));
        }
      }
    }
  });
}

template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, T eps) {
  require_rank_at_least("layer_norm", x.shape(), 1);
  const std::size_t d = x.shape().back();
  if (gamma.rank() != 1 || gamma.dim(0) != d) dim_error("layer_norm", x.shape(), gamma.shape());
  if (beta.rank() != 1 || beta.dim(0) != d) dim_error("layer_norm", x.shape(), beta.shape());
  const std::size_t rows = d ? x.numel() / d : 0;
  auto out = make_node<T>(x.shape());
  auto xhat = std::make_shared<std::vector<T>>(x.numel());
  auto rstd = std::make_shared<std::vector<T>>(rows);
  const T* in = x.data().data();
  const T* g = gamma.data().data();
  const T* b = beta.data().data();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* row = in + r * d;
    double mu = 0.0;
    for (std::size_t j = 0; j < d; ++j) mu += row[j];
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= static_cast<double>(d);
    const double rs = 1.0 / std::sqrt(var + static_cast<double>(eps));
    (*rstd)[r] = static_cast<T>(rs);
    for (std::size_t j = 0; j < d; ++j) {
      const T xh = static_cast<T>((row[j] - mu) * rs);
      (*xhat)[r * d + j] = xh;
      out->data[r * d + j] = xh * g[j] + b[j];
    }
  }
  auto xn = x.node_ptr(), gn = gamma.node_ptr(), bn = beta.node_ptr();
  return finish<T>(out, tracking<T>({&x, &gamma, &beta}), [xn, gn, bn, xhat, rstd, rows, d](Node<T>& self) {
    T* gx = grad_of(xn);
    T* gg = grad_of(gn);
    T* gb = grad_of(bn);
    for (std::size_t r = 0; r < rows; ++r) {
      const T* dy = self.grad.data() + r * d;
      const T* xh = xhat->data() + r * d;
      double mean_dxh = 0.0, mean_dxh_xh = 0.0;
      for (std::size_t j = 0; j < d; ++j) {
        const double dxh = static_cast<double>(dy[j]) * gn->data[j];
        mean_dxh += dxh;
        mean_dxh_xh += dxh * xh[j];
        if (gg) gg[j] += dy[j] * xh[j];
        if (gb) gb[j] += dy[j];
      }
      if (!gx) continue;
      mean_dxh /= static_cast<double>(d);
      mean_dxh_xh /= static_cast<double>(d);
      const double rs = (*rstd)[r];
      for (std::size_t j = 0; j < d; ++j) {
        const double dxh = static_cast<double>(dy[j]) * gn->data[j];
        gx[r * d + j] += static_cast<T>(rs * (dxh - mean_dxh - xh[j] * mean_dxh_xh));
      }
    }
  });
}

template <typename T>
Tensor<T> gelu(const Tensor<T>& x) {
  auto out = make_node<T>(x.shape());
  const T inv_sqrt2 = static_cast<T>(1.0 / std::numbers::sqrt2);
  const T* xv = x.data().data();
  T* ov = out->data.data();
  const std::size_t count = out->data.size();
  for (std::size_t i = 0; i < count; ++i) {
    const T v = xv[i];
    if constexpr (std::is_same_v<T, float>) {
      ov[i] = v * 0.5f * (1.0f + detail::erf_rational(v * inv_sqrt2));
    } else {
      ov[i] = v * T(0.5) * (T(1) + std::erf(v * inv_sqrt2));
    }
  }
  auto xn = x.node_ptr();
  return finish<T>(out, tracking<T>({&x}), [xn, inv_sqrt2](Node<T>& self) {
    T* gx = grad_of(xn);
    if (!gx) return;
    const T inv_sqrt2pi = static_cast<T>(1.0 / std::sqrt(2.0 * std::numbers::pi));
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      const T v = xn->data[i];
      const T cdf = T(0.5) * (T(1) + std::erf(v * inv_sqrt2));
      const T pdf = inv_sqrt2pi * std::exp(T(-0.5) * v * v);
      gx[i] += self.grad[i] * (cdf + v * pdf);
    }
  });
}

template <typename T>
Tensor<T> dropout(const Tensor<T>& x, double p, Rng& rng) {
  if (p < 0.0 || p >= 1.0) throw ValueError("dropout: probability must be in [0,1)");
  if (p == 0.0) return x;
  auto out = make_node<T>(x.shape());
  auto mask = std::make_shared<std::vector<T>>(x.numel());
  const T keep_scale = static_cast<T>(1.0 / (1.0 - p));
  for (std::size_t i = 0; i < out->data.size(); ++i) {
    (*mask)[i] = rng.bernoulli(p) ? T(0) : keep_scale;
    out->data[i] = x.data()[i] * (*mask)[i];
  }
  auto xn = x.node_ptr();
  return finish<T>(out, tracking<T>({&x}), [xn, mask](Node<T>& self) {
    if (T* gx = grad_of(xn))
      for (std::size_t i = 0; i < self.grad.size(); ++i) gx[i] += self.grad[i] * (*mask)[i];
  });
}

// ---------------------------------------------------------------------------
// Losses

template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& logits, std::span<const std::int32_t> targets, std::int32_t ignore_index) {
  require_rank_at_least("cross_entropy", logits.shape(), 1);
  const std::size_t vocab = logits.shape().back();
  if (vocab == 0) throw DimensionError("cross_entropy: zero classes");
  const std::size_t rows = logits.numel() / vocab;
  if (targets.size() != rows) {
    throw DimensionError("cross_entropy: " + std::to_string(rows) + " logit rows vs " +
                         std::to_string(targets.size()) + " targets");
  }
  std::size_t count = 0;
  for (auto t : targets) {
    if (t == ignore_index) continue;
    if (t < 0 || static_cast<std::size_t>(t) >= vocab) {
      throw ValueError("cross_entropy: target " + std::to_string(t) + " outside [0," + std::to_string(vocab) + ")");
    }
    ++count;
  }
  if (count == 0) throw ValueError("cross_entropy: every row is ignored");

  auto probs = std::make_shared<std::vector<T>>(logits.numel(), T(0));
  double total = 0.0;
  const T* z = logits.data().data();
  for (std::size_t r = 0; r < rows; ++r) {
    if (targets[r] == ignore_index) continue;
    const T* row = z + r * vocab;
    const T mx = *std::max_element(row, row + vocab);
    double s = 0.0;
    for (std::size_t j = 0; j < vocab; ++j) s += std::exp(static_cast<double>(row[j] - mx));
    const double lse = mx + std::log(s);
    total += lse - row[targets[r]];
    for (std::size_t j = 0; j < vocab; ++j) (*probs)[r * vocab + j] = static_cast<T>(std::exp(row[j] - lse));
  }
  auto out = make_node<T>({});
  out->data[0] = static_cast<T>(total / static_cast<double>(count));
  auto ln = logits.node_ptr();
  std::vector<std::int32_t> tgt(targets.begin(), targets.end());
  return finish<T>(out, tracking<T>({&logits}), [ln, probs, tgt = std::move(tgt), rows, vocab, count, ignore_index](Node<T>& self) {
    T* g = grad_of(ln);
    if (!g) return;
    const T upstream = self.grad[0] / static_cast<T>(count);
    for (std::size_t r = 0; r < rows; ++r) {
      if (tgt[r] == ignore_index) continue;
      for (std::size_t j = 0; j < vocab; ++j) g[r * vocab + j] += upstream * (*probs)[r * vocab + j];
      g[r * vocab + tgt[r]] -= upstream;
    }
  });
}

template <typename T>
Tensor<T> bce_with_logits(const Tensor<T>& logits, std::span<const std::int8_t> labels) {
  if (labels.size() != logits.numel()) {
    throw DimensionError("bce_with_logits: " + std::to_string(logits.numel()) + " logits vs " +
                         std::to_string(labels.size()) + " labels");
  }
  std::size_t count = 0;
  double total = 0.0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0) continue;
    const double z = logits.data()[i];
    total += std::max(z, 0.0) - z * labels[i] + std::log1p(std::exp(-std::abs(z)));
    ++count;
  }
  if (count == 0) throw ValueError("bce_with_logits: no labelled positions");
  auto out = make_node<T>({});
  out->data[0] = static_cast<T>(total / static_cast<double>(count));
  auto ln = logits.node_ptr();
  std::vector<std::int8_t> lab(labels.begin(), labels.end());
  return finish<T>(out, tracking<T>({&logits}), [ln, lab = std::move(lab), count](Node<T>& self) {
    T* g = grad_of(ln);
    if (!g) return;
    const double upstream = static_cast<double>(self.grad[0]) / static_cast<double>(count);
    for (std::size_t i = 0; i < lab.size(); ++i) {
      if (lab[i] < 0) continue;
      const double sig = 1.0 / (1.0 + std::exp(-static_cast<double>(ln->data[i])));
      g[i] += static_cast<T>(upstream * (sig - lab[i]));
    }
  });
}

// ---------------------------------------------------------------------------
// Lookup and layout

template <typename T>
Tensor<T> embedding(const Tensor<T>& table, std::span<const std::int32_t> ids, Shape out_prefix) {
  if (table.rank() != 2) throw DimensionError("embedding: table must be rank 2, got " + shape_str(table.shape()));
  if (numel(out_prefix) != ids.size()) {
    throw DimensionError("embedding: prefix " + shape_str(out_prefix) + " does not hold " + std::to_string(ids.size()) + " ids");
  }
  const std::size_t vocab = table.dim(0), d = table.dim(1);
  for (auto id : ids) {
    if (id < 0 || static_cast<std::size_t>(id) >= vocab) {
      throw ValueError("embedding: token id " + std::to_string(id) + " outside vocabulary of " + std::to_string(vocab));
    }
  }
  Shape shape = std::move(out_prefix);
  shape.push_back(d);
  auto out = make_node<T>(shape);
  for (std::size_t r = 0; r < ids.size(); ++r)
    std::copy_n(table.data().data() + static_cast<std::size_t>(ids[r]) * d, d, out->data.data() + r * d);
  auto tn = table.node_ptr();
  std::vector<std::int32_t> idv(ids.begin(), ids.end());
  return finish<T>(out, tracking<T>({&table}), [tn, idv = std::move(idv), d](Node<T>& self) {
    T* g = grad_of(tn);
    if (!g) return;
    for (std::size_t r = 0; r < idv.size(); ++r) {
      T* dst = g + static_cast<std::size_t>(idv[r]) * d;
      for (std::size_t j = 0; j < d; ++j) dst[j] += self.grad[r * d + j];
    }
  });
}

template <typename T>
Tensor<T> add_positions(const Tensor<T>& x, const Tensor<T>& pos) {
  if (x.rank() != 3 || pos.rank() != 2 || pos.dim(1) != x.dim(2)) dim_error("add_positions", x.shape(), pos.shape());
  const std::size_t P = x.dim(0), L = x.dim(1), d = x.dim(2);
  if (L > pos.dim(0)) {
    throw ValueError("add_positions: sequence length " + std::to_string(L) + " exceeds maximum " + std::to_string(pos.dim(0)));
  }
  auto out = make_node<T>(x.shape());
  for (std::size_t p = 0; p < P; ++p)
    for (std::size_t i = 0; i < L * d; ++i) out->data[p * L * d + i] = x.data()[p * L * d + i] + pos.data()[i];
  auto xn = x.node_ptr(), pn = pos.node_ptr();
  return finish<T>(out, tracking<T>({&x, &pos}), [xn, pn, P, L, d](Node<T>& self) {
    if (T* gx = grad_of(xn))
      for (std::size_t i = 0; i < self.grad.size(); ++i) gx[i] += self.grad[i];
    if (T* gp = grad_of(pn))
      for (std::size_t p = 0; p < P; ++p)
        for (std::size_t i = 0; i < L * d; ++i) gp[i] += self.grad[p * L * d + i];
  });
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  if (numel(shape) != x.numel()) dim_error("reshape", x.shape(), shape);
  auto out = std::make_shared<Node<T>>();
  out->shape = std::move(shape);
  out->data.assign(x.data().begin(), x.data().end());
  auto xn = x.node_ptr();
  return finish<T>(out, tracking<T>({&x}), [xn](Node<T>& self) {
    if (T* g = grad_of(xn))
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
  });
}

template <typename T>
Tensor<T> swap_adjacent(const Tensor<T>& x, std::size_t axis) {
  if (axis + 1 >= x.rank()) throw DimensionError("swap_adjacent: axis " + std::to_string(axis) + " invalid for " + shape_str(x.shape()));
  std::size_t pre = 1, post = 1;
  for (std::size_t i = 0; i < axis; ++i) pre *= x.dim(i);
  for (std::size_t i = axis + 2; i < x.rank(); ++i) post *= x.dim(i);
  const std::size_t A = x.dim(axis), B = x.dim(axis + 1);
  Shape shape = x.shape();
  std::swap(shape[axis], shape[axis + 1]);
  auto out = make_node<T>(shape);
  // out[p, b, a, :] = x[p, a, b, :]
  for (std::size_t p = 0; p < pre; ++p)
    for (std::size_t a = 0; a < A; ++a)
      for (std::size_t b = 0; b < B; ++b)
        std::copy_n(x.data().data() + ((p * A + a) * B + b) * post, post, out->data.data() + ((p * B + b) * A + a) * post);
  auto xn = x.node_ptr();
  return finish<T>(out, tracking<T>({&x}), [xn, pre, A, B, post](Node<T>& self) {
    T* g = grad_of(xn);
    if (!g) return;
    for (std::size_t p = 0; p < pre; ++p)
      for (std::size_t a = 0; a < A; ++a)
        for (std::size_t b = 0; b < B; ++b) {
          T* dst = g + ((p * A + a) * B + b) * post;
          const T* src = self.grad.data() + ((p * B + b) * A + a) * post;
          for (std::size_t i = 0; i < post; ++i) dst[i] += src[i];
        }
  });
}

template <typename T>
Tensor<T> mean_axis(const Tensor<T>& x, std::size_t axis) {
  if (axis >= x.rank()) throw DimensionError("mean_axis: axis invalid for " + shape_str(x.shape()));
  const AxisView v = axis_view(x.shape(), axis);
  if (v.extent == 0) throw DimensionError("mean_axis: empty axis");
  Shape shape = x.shape();
  shape.erase(shape.begin() + static_cast<std::ptrdiff_t>(axis));
  auto out = make_node<T>(shape);
  const T inv = T(1) / static_cast<T>(v.extent);
  for (std::size_t o = 0; o < v.outer; ++o)
    for (std::size_t e = 0; e < v.extent; ++e)
      for (std::size_t i = 0; i < v.inner; ++i)
        out->data[o * v.inner + i] += x.data()[(o * v.extent + e) * v.inner + i] * inv;
  auto xn = x.node_ptr();
  return finish<T>(out, tracking<T>({&x}), [xn, v, inv](Node<T>& self) {
    T* g = grad_of(xn);
    if (!g) return;
    for (std::size_t o = 0; o < v.outer; ++o)
      for (std::size_t e = 0; e < v.extent; ++e)
        for (std::size_t i = 0; i < v.inner; ++i) g[(o * v.extent + e) * v.inner + i] += self.grad[o * v.inner + i] * inv;
  });
}

template <typename T>
Tensor<T> slice_axis(const Tensor<T>& x, std::size_t axis, std::size_t start, std::size_t length) {
  if (axis >= x.rank()) throw DimensionError("slice_axis: axis invalid for " + shape_str(x.shape()));
  const AxisView v = axis_view(x.shape(), axis);
  if (start + length > v.extent) {
    throw DimensionError("slice_axis: range [" + std::to_string(start) + "," + std::to_string(start + length) +
                         ") exceeds extent " + std::to_string(v.extent));
  }
  Shape shape = x.shape();
  shape[axis] = length;
  auto out = make_node<T>(shape);
  for (std::size_t o = 0; o < v.outer; ++o)
    std::copy_n(x.data().data() + (o * v.extent + start) * v.inner, length * v.inner, out->data.data() + o * length * v.inner);
  auto xn = x.node_ptr();
  return finish<T>(out, tracking<T>({&x}), [xn, v, start, length](Node<T>& self) {
    T* g = grad_of(xn);
    if (!g) return;
    for (std::size_t o = 0; o < v.outer; ++o) {
      T* dst = g + (o * v.extent + start) * v.inner;
      const T* src = self.grad.data() + o * length * v.inner;
      for (std::size_t i = 0; i < length * v.inner; ++i) dst[i] += src[i];
    }
  });
}

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
  auto out = make_node<T>({});
  double total = 0.0;
  for (auto value : x.data()) total += value;
  out->data[0] = static_cast<T>(total);
  auto xn = x.node_ptr();
  return finish<T>(out, tracking<T>({&x}), [xn](Node<T>& self) {
    if (T* g = grad_of(xn))
      for (std::size_t i = 0; i < xn->data.size(); ++i) g[i] += self.grad[0];
  });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& x) {
  if (x.numel() == 0) throw DimensionError("mean: empty tensor");
  return scale(sum(x), T(1) / static_cast<T>(x.numel()));
}

// ---------------------------------------------------------------------------
// Multiplexing primitives

namespace {

struct KeyedView {
  std::size_t pre = 1, n = 0, len = 0, d = 0;
};

KeyedView keyed_view(const char* op, const Shape& x, const Shape& keys) {
  require_rank_at_least(op, x, 3);
  KeyedView v;
  const std::size_t r = x.size();
  for (std::size_t i = 0; i + 3 < r; ++i) v.pre *= x[i];
  v.n = x[r - 3];
  v.len = x[r - 2];
  v.d = x[r - 1];
  if (keys.size() != 2 || keys[0] != v.n || keys[1] != v.d) dim_error(op, x, keys);
  return v;
}

}  // namespace

template <typename T>
Tensor<T> hadamard_keys(const Tensor<T>& x, const Tensor<T>& keys) {
  const KeyedView v = keyed_view("hadamard_keys", x.shape(), keys.shape());
  auto out = make_node<T>(x.shape());
  const T* in = x.data().data();
  const T* k = keys.data().data();
  for (std::size_t p = 0; p < v.pre; ++p)
    for (std::size_t i = 0; i < v.n; ++i)
      for (std::size_t j = 0; j < v.len; ++j) {
        const std::size_t base = ((p * v.n + i) * v.len + j) * v.d;
        for (std::size_t c = 0; c < v.d; ++c) out->data[base + c] = in[base + c] * k[i * v.d + c];
      }
  auto xn = x.node_ptr(), kn = keys.node_ptr();
  return finish<T>(out, tracking<T>({&x, &keys}), [xn, kn, v](Node<T>& self) {
    T* gx = grad_of(xn);
    T* gk = grad_of(kn);
    for (std::size_t p = 0; p < v.pre; ++p)
      for (std::size_t i = 0; i < v.n; ++i)
        for (std::size_t j = 0; j < v.len; ++j) {
          const std::size_t base = ((p * v.n + i) * v.len + j) * v.d;
          for (std::size_t c = 0; c < v.d; ++c) {
            if (gx) gx[base + c] += self.grad[base + c] * kn->data[i * v.d + c];
            if (gk) gk[i * v.d + c] += self.grad[base + c] * xn->data[base + c];
          }
        }
  });
}

template <typename T>
Tensor<T> keyed_mean(const Tensor<T>& x, const Tensor<T>& keys) {
  const KeyedView v = keyed_view("keyed_mean", x.shape(), keys.shape());
  Shape shape(x.shape().begin(), x.shape().end() - 3);
  shape.push_back(v.len);
  shape.push_back(v.d);
  auto out = make_node<T>(shape);
  const T inv = T(1) / static_cast<T>(v.n);
  const T* in = x.data().data();
  const T* k = keys.data().data();
  for (std::size_t p = 0; p < v.pre; ++p)
    for (std::size_t i = 0; i < v.n; ++i)
      for (std::size_t j = 0; j < v.len; ++j) {
        const T* src = in + ((p * v.n + i) * v.len + j) * v.d;
        T* dst = out->data.data() + (p * v.len + j) * v.d;
        for (std::size_t c = 0; c < v.d; ++c) dst[c] += src[c] * k[i * v.d + c] * inv;
      }
  auto xn = x.node_ptr(), kn = keys.node_ptr();
  return finish<T>(out, tracking<T>({&x, &keys}), [xn, kn, v, inv](Node<T>& self) {
    T* gx = grad_of(xn);
    T* gk = grad_of(kn);
    for (std::size_t p = 0; p < v.pre; ++p)
      for (std::size_t i = 0; i < v.n; ++i)
        for (std::size_t j = 0; j < v.len; ++j) {
          const std::size_t xb = ((p * v.n + i) * v.len + j) * v.d;
          const T* g = self.grad.data() + (p * v.len + j) * v.d;
          for (std::size_t c = 0; c < v.d; ++c) {
            if (gx) gx[xb + c] += g[c] * kn->data[i * v.d + c] * inv;
            if (gk) gk[i * v.d + c] += g[c] * xn->data[xb + c] * inv;
          }
        }
  });
}

template <typename T>
Tensor<T> pair_add(const Tensor<T>& a, const Tensor<T>& c) {
  require_rank_at_least("pair_add", a.shape(), 2);
  const std::size_t r = a.rank();
  const std::size_t len = a.dim(r - 2), d = a.dim(r - 1);
  std::size_t pre = 1;
  for (std::size_t i = 0; i + 2 < r; ++i) pre *= a.dim(i);
  // c is either shared keys [N×d] or per-sequence vectors [...×N×d].
  const bool per_sequence = c.rank() == r && r > 2;
  bool ok = c.rank() >= 2 && c.shape().back() == d;
  if (per_sequence) {
    for (std::size_t i = 0; i + 2 < r; ++i) ok = ok && c.dim(i) == a.dim(i);
  } else {
    ok = ok && c.rank() == 2;
  }
  if (!ok) dim_error("pair_add", a.shape(), c.shape());
  const std::size_t n = c.dim(c.rank() - 2);
  Shape shape(a.shape().begin(), a.shape().end() - 2);
  shape.insert(shape.end(), {n, len, d});
  auto out = make_node<T>(shape);
  for (std::size_t p = 0; p < pre; ++p)
    for (std::size_t i = 0; i < n; ++i) {
      const T* cv = c.data().data() + ((per_sequence ? p * n : 0) + i) * d;
      for (std::size_t j = 0; j < len; ++j) {
        const T* av = a.data().data() + (p * len + j) * d;
        T* dst = out->data.data() + ((p * n + i) * len + j) * d;
        for (std::size_t q = 0; q < d; ++q) dst[q] = av[q] + cv[q];
      }
    }
  auto an = a.node_ptr(), cn = c.node_ptr();
  return finish<T>(out, tracking<T>({&a, &c}), [an, cn, pre, n, len, d, per_sequence](Node<T>& self) {
    T* ga = grad_of(an);
    T* gc = grad_of(cn);
    for (std::size_t p = 0; p < pre; ++p)
      for (std::size_t i = 0; i < n; ++i) {
        T* gcv = gc ? gc + ((per_sequence ? p * n : 0) + i) * d : nullptr;
        for (std::size_t j = 0; j < len; ++j) {
          const T* g = self.grad.data() + ((p * n + i) * len + j) * d;
          if (ga) {
            T* gav = ga + (p * len + j) * d;
            for (std::size_t q = 0; q < d; ++q) gav[q] += g[q];
          }
          if (gcv)
            for (std::size_t q = 0; q < d; ++q) gcv[q] += g[q];
        }
      }
  });
}

// ---------------------------------------------------------------------------
// Attention

template <typename T>
Tensor<T> attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v, const AttentionOptions& options,
                    std::vector<T>* probs_out) {
  if (q.rank() != 3) throw DimensionError("attention: expected [P×L×d], got " + shape_str(q.shape()));
  if (k.shape() != q.shape()) dim_error("attention", q.shape(), k.shape());
  if (v.shape() != q.shape()) dim_error("attention", q.shape(), v.shape());
  const std::size_t P = q.dim(0), L = q.dim(1), d = q.dim(2), H = options.heads;
  if (H == 0 || d % H != 0) throw DimensionError("attention: width " + std::to_string(d) + " not divisible by " + std::to_string(H) + " heads");
  if (!options.key_mask.empty() && options.key_mask.size() != P * L) {
    throw DimensionError("attention: key mask holds " + std::to_string(options.key_mask.size()) + " entries, expected " + std::to_string(P * L));
  }
  const double drop = options.dropout;
  if (drop < 0.0 || drop >= 1.0) throw ValueError("attention: dropout must be in [0,1)");
  if (drop > 0.0 && options.rng == nullptr) throw ValueError("attention: dropout requires an rng");
  const std::size_t hd = d / H;
  const T scale_factor = static_cast<T>(1.0 / std::sqrt(static_cast<double>(hd)));
  const bool track = tracking<T>({&q, &k, &v});
  const bool keep_all = track || probs_out != nullptr;

  auto out = make_node<T>(q.shape());
  const std::size_t block = L * L;
  auto probs = std::make_shared<std::vector<T>>(keep_all ? P * H * block : block);
  std::shared_ptr<std::vector<T>> dropped;  // probabilities after dropout (when active)
  if (drop > 0.0) dropped = std::make_shared<std::vector<T>>(track ? P * H * block : block);
  std::vector<std::uint8_t> mask_copy(options.key_mask.begin(), options.key_mask.end());
  const T keep_scale = static_cast<T>(1.0 / (1.0 - drop));
  const int Li = static_cast<int>(L), hdi = static_cast<int>(hd), di = static_cast<int>(d);

  for (std::size_t p = 0; p < P; ++p) {
    const std::uint8_t* km = mask_copy.empty() ? nullptr : mask_copy.data() + p * L;
    for (std::size_t h = 0; h < H; ++h) {
      T* s = probs->data() + (keep_all ? (p * H + h) * block : 0);
      const T* qp = q.data().data() + p * L * d + h * hd;
      const T* kp = k.data().data() + p * L * d + h * hd;
      const T* vp = v.data().data() + p * L * d + h * hd;
      if (L && hd) gemm(false, true, Li, Li, hdi, scale_factor, qp, di, kp, di, T(0), s, Li);
      for (std::size_t i = 0; i < L; ++i) {
        T* row = s + i * L;
        T mx = -std::numeric_limits<T>::infinity();
        for (std::size_t j = 0; j < L; ++j) {
          if (km && !km[j]) continue;
          mx = std::max(mx, row[j]);
        }
        if (mx == -std::numeric_limits<T>::infinity()) {
          std::fill(row, row + L, T(0));
          continue;
        }
        T total = 0;
        for (std::size_t j = 0; j < L; ++j) {
          row[j] = (km && !km[j]) ? T(0) : std::exp(row[j] - mx);
          total += row[j];
        }
        const T inv = T(1) / total;
        for (std::size_t j = 0; j < L; ++j) row[j] *= inv;
      }
      const T* used = s;
      if (dropped) {
        T* dp = dropped->data() + (track ? (p * H + h) * block : 0);
        for (std::size_t i = 0; i < block; ++i) dp[i] = options.rng->bernoulli(drop) ? T(0) : s[i] * keep_scale;
        used = dp;
      }
      T* op = out->data.data() + p * L * d + h * hd;
      if (L && hd) gemm(false, false, Li, hdi, Li, T(1), used, Li, vp, di, T(0), op, di);
    }
  }
  if (probs_out) *probs_out = *probs;

  auto qn = q.node_ptr(), kn = k.node_ptr(), vn = v.node_ptr();
  return finish<T>(out, track, [qn, kn, vn, probs, dropped, P, L, d, H, hd, scale_factor, keep_scale](Node<T>& self) {
    T* gq = grad_of(qn);
    T* gk = grad_of(kn);
    T* gv = grad_of(vn);
    const std::size_t block = L * L;
    const int Li = static_cast<int>(L), hdi = static_cast<int>(hd), di = static_cast<int>(d);
    std::vector<T> dprobs(block);
    for (std::size_t p = 0; p < P; ++p) {
      for (std::size_t h = 0; h < H; ++h) {
        const std::size_t off = p * L * d + h * hd;
        const T* pr = probs->data() + (p * H + h) * block;
        const T* used = dropped ? dropped->data() + (p * H + h) * block : pr;
        const T* g = self.grad.data() + off;
        if (!L || !hd) continue;
        if (gv) gemm(true, false, Li, hdi, Li, T(1), used, Li, g, di, T(1), gv + off, di);
        if (!gq && !gk) continue;
        gemm(false, true, Li, Li, hdi, T(1), g, di, vn->data.data() + off, di, T(0), dprobs.data(), Li);
        if (dropped) {
          for (std::size_t i = 0; i < block; ++i) dprobs[i] = used[i] == T(0) ? T(0) : dprobs[i] * keep_scale;
        }
        for (std::size_t i = 0; i < L; ++i) {
          T dot = 0;
          for (std::size_t j = 0; j < L; ++j) dot += dprobs[i * L + j] * pr[i * L + j];
          for (std::size_t j = 0; j < L; ++j) dprobs[i * L + j] = pr[i * L + j] * (dprobs[i * L + j] - dot);
        }
        if (gq) gemm(false, false, Li, hdi, Li, scale_factor, dprobs.data(), Li, kn->data.data() + off, di, T(1), gq + off, di);
        if (gk) gemm(true, false, Li, hdi, Li, scale_factor, dprobs.data(), Li, qn->data.data() + off, di, T(1), gk + off, di);
      }
    }
  });
}

// ---------------------------------------------------------------------------

#define MUXPLM_INSTANTIATE(T)                                                                             \
  template Tensor<T> matmul(const Tensor<T>&, const Tensor<T>&);                                          \
  template Tensor<T> matmul_bt(const Tensor<T>&, const Tensor<T>&);                                       \
  template Tensor<T> linear(const Tensor<T>&, const Tensor<T>&, const Tensor<T>*);                        \
  template Tensor<T> linear_bt(const Tensor<T>&, const Tensor<T>&, const Tensor<T>*);                     \
  template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                                             \
  template Tensor<T> hadamard(const Tensor<T>&, const Tensor<T>&);                                        \
  template Tensor<T> scale(const Tensor<T>&, T);                                                          \
  template Tensor<T> add_rows(const Tensor<T>&, const Tensor<T>&);                                        \
  template Tensor<T> mul_rows(const Tensor<T>&, const Tensor<T>&);                                        \
  template Tensor<T> softmax(const Tensor<T>&, std::size_t);                                              \
  template Tensor<T> layer_norm(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, T);                 \
  template Tensor<T> gelu(const Tensor<T>&);                                                              \
  template Tensor<T> dropout(const Tensor<T>&, double, Rng&);                                             \
  template Tensor<T> cross_entropy(const Tensor<T>&, std::span<const std::int32_t>, std::int32_t);        \
  template Tensor<T> bce_with_logits(const Tensor<T>&, std::span<const std::int8_t>);                     \
  template Tensor<T> embedding(const Tensor<T>&, std::span<const std::int32_t>, Shape);                   \
  template Tensor<T> add_positions(const Tensor<T>&, const Tensor<T>&);                                   \
  template Tensor<T> reshape(const Tensor<T>&, Shape);                                                    \
  template Tensor<T> swap_adjacent(const Tensor<T>&, std::size_t);                                        \
  template Tensor<T> mean_axis(const Tensor<T>&, std::size_t);                                            \
  template Tensor<T> slice_axis(const Tensor<T>&, std::size_t, std::size_t, std::size_t);                 \
  template Tensor<T> sum(const Tensor<T>&);                                                               \
  template Tensor<T> mean(const Tensor<T>&);                                                              \
  template Tensor<T> hadamard_keys(const Tensor<T>&, const Tensor<T>&);                                   \
  template Tensor<T> keyed_mean(const Tensor<T>&, const Tensor<T>&);                                      \
  template Tensor<T> pair_add(const Tensor<T>&, const Tensor<T>&);                                        \
  template Tensor<T> attention(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, const AttentionOptions&, \
                               std::vector<T>*);

MUXPLM_INSTANTIATE(float)
MUXPLM_INSTANTIATE(double)

#undef MUXPLM_INSTANTIATE

}  // namespace muxplm::diff
