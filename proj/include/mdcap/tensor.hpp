#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <vector>

namespace mdcap {

// ---------------------------------------------------------------------------
// Shapes
// ---------------------------------------------------------------------------

using Shape = std::vector<int>;

inline int64_t numel(const Shape& s) {
  int64_t n = 1;
  for (int d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::string out = "(";
  for (size_t i = 0; i < s.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(s[i]);
  }
  return out + ")";
}

[[noreturn]] inline void shape_error(const char* op, const Shape& a, const Shape& b) {
  throw std::invalid_argument(std::string(op) + ": incompatible shapes " + shape_str(a) + " and " + shape_str(b));
}

// ---------------------------------------------------------------------------
// Gradient mode
// ---------------------------------------------------------------------------

namespace detail {
inline thread_local bool grad_mode = true;
inline thread_local uint64_t node_serial = 0;
}  // namespace detail

// Disables graph recording on the current thread for its lifetime.
struct NoGradGuard {
  bool prev;
  NoGradGuard() : prev(detail::grad_mode) { detail::grad_mode = false; }
  ~NoGradGuard() { detail::grad_mode = prev; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;
};

inline bool grad_enabled() { return detail::grad_mode; }

// ---------------------------------------------------------------------------
// Tensor
// ---------------------------------------------------------------------------

template <typename T>
struct TensorNode {
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;  // allocated on first use, same length as value
  bool requires_grad = false;
  uint64_t serial = 0;
  const char* op = "leaf";
  std::vector<std::shared_ptr<TensorNode<T>>> parents;
  std::function<void()> backward_fn;  // accumulates this->grad into parents

  void ensure_grad() {
    if (grad.size() != value.size()) grad.assign(value.size(), T(0));
  }
};

// A value-semantics handle to a node in the implicit tape. Ops executed while
// gradients are enabled record a backward rule; backward() then visits the
// reachable nodes in reverse topological order exactly once.
template <typename T>
class Tensor {
 public:
  using Scalar = T;

  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    return Tensor(std::move(shape), {}, requires_grad, true);
  }
  static Tensor full(Shape shape, T v) {
    Tensor t(std::move(shape), {}, false, true);
    std::fill(t.values().begin(), t.values().end(), v);
    return t;
  }
  static Tensor from_values(Shape shape, std::vector<T> data, bool requires_grad = false) {
    if (static_cast<int64_t>(data.size()) != numel(shape))
      throw std::invalid_argument("from_values: data length does not match shape " + shape_str(shape));
    return Tensor(std::move(shape), std::move(data), requires_grad, false);
  }
  static Tensor scalar(T v) { return from_values({1}, {v}); }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  int dim(int i) const { return node_->shape[i]; }
  int rank() const { return static_cast<int>(node_->shape.size()); }
  int64_t size() const { return static_cast<int64_t>(node_->value.size()); }

  std::vector<T>& values() { return node_->value; }
  const std::vector<T>& values() const { return node_->value; }
  T item() const {
    if (size() != 1) throw std::invalid_argument("item: tensor is not a scalar, shape " + shape_str(shape()));
    return node_->value[0];
  }

  std::vector<T>& grad() {
    node_->ensure_grad();
    return node_->grad;
  }
  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool b) { node_->requires_grad = b; }
  void zero_grad() {
    if (!node_->grad.empty()) std::fill(node_->grad.begin(), node_->grad.end(), T(0));
  }

  std::shared_ptr<TensorNode<T>> node() const { return node_; }

  static Tensor wrap(std::shared_ptr<TensorNode<T>> n) {
    Tensor t;
    t.node_ = std::move(n);
    return t;
  }

 private:
  Tensor(Shape shape, std::vector<T> data, bool requires_grad, bool zero_fill) {
    node_ = std::make_shared<TensorNode<T>>();
    node_->shape = std::move(shape);
    if (zero_fill)
      node_->value.assign(numel(node_->shape), T(0));
    else
      node_->value = std::move(data);
    node_->requires_grad = requires_grad;
    node_->serial = ++detail::node_serial;
  }

  std::shared_ptr<TensorNode<T>> node_;
};

namespace detail {

template <typename T>
Tensor<T> make_result(const char* op, Shape shape, std::vector<Tensor<T>> inputs) {
  auto out = Tensor<T>::zeros(std::move(shape));
  out.node()->op = op;
  if (grad_enabled()) {
    bool needs = false;
    for (const auto& in : inputs) needs = needs || in.requires_grad();
    if (needs) {
      out.node()->requires_grad = true;
      for (auto& in : inputs) out.node()->parents.push_back(in.node());
    }
  }
  return out;
}

template <typename T>
void set_backward(Tensor<T>& out, std::function<void()> fn) {
  if (out.node()->requires_grad) out.node()->backward_fn = std::move(fn);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// BLAS-backed matrix kernels
// ---------------------------------------------------------------------------

namespace detail {
// C(m,n) += or = A(m,k) op B(k,n), row major, optional transposes on the
// logical operands. Implemented in tensor_blas.cpp on top of cblas.
void gemm(bool trans_a, bool trans_b, int m, int n, int k, float alpha, const float* a, int lda,
          const float* b, int ldb, float beta, float* c, int ldc);
void gemm(bool trans_a, bool trans_b, int m, int n, int k, double alpha, const double* a, int lda,
          const double* b, int ldb, double beta, double* c, int ldc);
}  // namespace detail

// ---------------------------------------------------------------------------
// Primitive ops
// ---------------------------------------------------------------------------

// matmul: (m,k)@(k,n) -> (m,n), or batched (b,m,k)@(bk,k,n) -> (b,m,n) where
// bk divides b; the right operand cycles over its batch, which covers the
// shared-context case (bk = heads) without materializing copies.
template <typename T>
Tensor<T> matmul(Tensor<T> a, Tensor<T> b) {
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  int batch = 1, batch_b = 1, m, k, n;
  Shape out_shape;
  if (sa.size() == 2 && sb.size() == 2) {
    if (sa[1] != sb[0]) shape_error("matmul", sa, sb);
    m = sa[0], k = sa[1], n = sb[1];
    out_shape = {m, n};
  } else if (sa.size() == 3 && sb.size() == 3) {
    if (sa[0] % sb[0] != 0 || sa[2] != sb[1]) shape_error("matmul", sa, sb);
    batch = sa[0], batch_b = sb[0], m = sa[1], k = sa[2], n = sb[2];
    out_shape = {batch, m, n};
  } else {
    shape_error("matmul", sa, sb);
  }
  auto out = detail::make_result<T>("matmul", out_shape, {a, b});
  const T* pa = a.values().data();
  const T* pb = b.values().data();
  T* pc = out.values().data();
  for (int i = 0; i < batch; ++i)
    detail::gemm(false, false, m, n, k, T(1), pa + int64_t(i) * m * k, k,
                 pb + int64_t(i % batch_b) * k * n, n, T(0), pc + int64_t(i) * m * n, n);
  detail::set_backward(out, [a, b, on = out.node().get(), batch, batch_b, m, k, n]() mutable {
    const T* g = on->grad.data();
    if (a.requires_grad()) {
      a.grad();
      for (int i = 0; i < batch; ++i)
        detail::gemm(false, true, m, k, n, T(1), g + int64_t(i) * m * n, n,
                     b.values().data() + int64_t(i % batch_b) * k * n, n, T(1),
                     a.node()->grad.data() + int64_t(i) * m * k, k);
    }
    if (b.requires_grad()) {
      b.grad();
      for (int i = 0; i < batch; ++i)
        detail::gemm(true, false, k, n, m, T(1), a.values().data() + int64_t(i) * m * k, k,
                     g + int64_t(i) * m * n, n, T(1),
                     b.node()->grad.data() + int64_t(i % batch_b) * k * n, n);
    }
  });
  return out;
}

// add: identical shapes, or b with rank 1 broadcast over the last dimension.
template <typename T>
Tensor<T> add(Tensor<T> a, Tensor<T> b) {
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  const bool bias = (sb.size() == 1 && sa.size() >= 1 && sa.back() == sb[0] && sa != sb);
  if (!bias && sa != sb) shape_error("add", sa, sb);
  auto out = detail::make_result<T>("add", sa, {a, b});
  const int64_t n = a.size();
  const int64_t c = bias ? sb[0] : n;
  const T* pa = a.values().data();
  const T* pb = b.values().data();
  T* po = out.values().data();
  for (int64_t i = 0; i < n; ++i) po[i] = pa[i] + pb[bias ? i % c : i];
  detail::set_backward(out, [a, b, on = out.node().get(), bias, n, c]() mutable {
    const T* g = on->grad.data();
    if (a.requires_grad()) {
      T* ga = a.grad().data();
      for (int64_t i = 0; i < n; ++i) ga[i] += g[i];
    }
    if (b.requires_grad()) {
      T* gb = b.grad().data();
      if (bias)
        for (int64_t i = 0; i < n; ++i) gb[i % c] += g[i];
      else
        for (int64_t i = 0; i < n; ++i) gb[i] += g[i];
    }
  });
  return out;
}

// Elementwise product of same-shape tensors.
template <typename T>
Tensor<T> mul(Tensor<T> a, Tensor<T> b) {
  if (a.shape() != b.shape()) shape_error("mul", a.shape(), b.shape());
  auto out = detail::make_result<T>("mul", a.shape(), {a, b});
  const int64_t n = a.size();
  const T* pa = a.values().data();
  const T* pb = b.values().data();
  T* po = out.values().data();
  for (int64_t i = 0; i < n; ++i) po[i] = pa[i] * pb[i];
  detail::set_backward(out, [a, b, on = out.node().get(), n]() mutable {
    const T* g = on->grad.data();
    if (a.requires_grad()) {
      T* ga = a.grad().data();
      const T* pb2 = b.values().data();
      for (int64_t i = 0; i < n; ++i) ga[i] += g[i] * pb2[i];
    }
    if (b.requires_grad()) {
      T* gb = b.grad().data();
      const T* pa2 = a.values().data();
      for (int64_t i = 0; i < n; ++i) gb[i] += g[i] * pa2[i];
    }
  });
  return out;
}

template <typename T>
Tensor<T> scale(Tensor<T> a, T c) {
  auto out = detail::make_result<T>("scale", a.shape(), {a});
  const int64_t n = a.size();
  const T* pa = a.values().data();
  T* po = out.values().data();
  for (int64_t i = 0; i < n; ++i) po[i] = pa[i] * c;
  detail::set_backward(out, [a, on = out.node().get(), c, n]() mutable {
    if (!a.requires_grad()) return;
    const T* g = on->grad.data();
    T* ga = a.grad().data();
    for (int64_t i = 0; i < n; ++i) ga[i] += g[i] * c;
  });
  return out;
}

// Softmax over the last dimension, with max subtraction.
template <typename T>
Tensor<T> softmax(Tensor<T> x) {
  const Shape& s = x.shape();
  const int64_t cols = s.back();
  const int64_t rows = numel(s) / cols;
  auto out = detail::make_result<T>("softmax", s, {x});
  const T* px = x.values().data();
  T* po = out.values().data();
  for (int64_t r = 0; r < rows; ++r) {
    const T* in = px + r * cols;
    T* o = po + r * cols;
    T m = in[0];
    for (int64_t j = 1; j < cols; ++j) m = std::max(m, in[j]);
    T sum = T(0);
    for (int64_t j = 0; j < cols; ++j) {
      o[j] = std::exp(in[j] - m);
      sum += o[j];
    }
    const T inv = T(1) / sum;
    for (int64_t j = 0; j < cols; ++j) o[j] *= inv;
  }
  detail::set_backward(out, [x, on = out.node().get(), rows, cols]() mutable {
    if (!x.requires_grad()) return;
    const T* g = on->grad.data();
    const T* y = on->value.data();
    T* gx = x.grad().data();
    for (int64_t r = 0; r < rows; ++r) {
      const T* gr = g + r * cols;
      const T* yr = y + r * cols;
      T dot = T(0);
      for (int64_t j = 0; j < cols; ++j) dot += gr[j] * yr[j];
      T* gxr = gx + r * cols;
      for (int64_t j = 0; j < cols; ++j) gxr[j] += (gr[j] - dot) * yr[j];
    }
  });
  return out;
}

// Layer normalization over the last dimension with learned gain and bias.
template <typename T>
Tensor<T> layer_norm(Tensor<T> x, Tensor<T> gain, Tensor<T> bias, T eps = T(1e-5)) {
  const Shape& s = x.shape();
  const int64_t cols = s.back();
  if (gain.shape() != Shape{static_cast<int>(cols)}) shape_error("layer_norm", s, gain.shape());
  if (bias.shape() != Shape{static_cast<int>(cols)}) shape_error("layer_norm", s, bias.shape());
  const int64_t rows = numel(s) / cols;
  auto out = detail::make_result<T>("layer_norm", s, {x, gain, bias});
  // xhat retained for the backward pass
  auto xhat = std::make_shared<std::vector<T>>(numel(s));
  auto inv_std = std::make_shared<std::vector<T>>(rows);
  const T* px = x.values().data();
  const T* pg = gain.values().data();
  const T* pb = bias.values().data();
  T* po = out.values().data();
  for (int64_t r = 0; r < rows; ++r) {
    const T* in = px + r * cols;
    T mean = T(0);
    for (int64_t j = 0; j < cols; ++j) mean += in[j];
    mean /= T(cols);
    T var = T(0);
    for (int64_t j = 0; j < cols; ++j) {
      const T d = in[j] - mean;
      var += d * d;
    }
    var /= T(cols);
    const T istd = T(1) / std::sqrt(var + eps);
    (*inv_std)[r] = istd;
    T* xh = xhat->data() + r * cols;
    T* o = po + r * cols;
    for (int64_t j = 0; j < cols; ++j) {
      xh[j] = (in[j] - mean) * istd;
      o[j] = xh[j] * pg[j] + pb[j];
    }
  }
  detail::set_backward(out, [x, gain, bias, on = out.node().get(), xhat, inv_std, rows, cols]() mutable {
    const T* g = on->grad.data();
    const T* pg = gain.values().data();
    if (gain.requires_grad()) {
      T* gg = gain.grad().data();
      for (int64_t r = 0; r < rows; ++r)
        for (int64_t j = 0; j < cols; ++j) gg[j] += g[r * cols + j] * (*xhat)[r * cols + j];
    }
    if (bias.requires_grad()) {
      T* gb = bias.grad().data();
      for (int64_t r = 0; r < rows; ++r)
        for (int64_t j = 0; j < cols; ++j) gb[j] += g[r * cols + j];
    }
    if (x.requires_grad()) {
      T* gx = x.grad().data();
      for (int64_t r = 0; r < rows; ++r) {
        const T* gr = g + r * cols;
        const T* xh = xhat->data() + r * cols;
        T mean_dxhat = T(0), mean_dxhat_xhat = T(0);
        for (int64_t j = 0; j < cols; ++j) {
          const T dxh = gr[j] * pg[j];
          mean_dxhat += dxh;
          mean_dxhat_xhat += dxh * xh[j];
        }
        mean_dxhat /= T(cols);
        mean_dxhat_xhat /= T(cols);
        const T istd = (*inv_std)[r];
        for (int64_t j = 0; j < cols; ++j) {
          const T dxh = gr[j] * pg[j];
          gx[r * cols + j] += istd * (dxh - mean_dxhat - xh[j] * mean_dxhat_xhat);
        }
      }
    }
  });
  return out;
}

// Exact GELU, x * Phi(x).
template <typename T>
Tensor<T> gelu(Tensor<T> x) {
  auto out = detail::make_result<T>("gelu", x.shape(), {x});
  const int64_t n = x.size();
  const T* px = x.values().data();
  T* po = out.values().data();
  const T inv_sqrt2 = T(0.7071067811865475244);
  for (int64_t i = 0; i < n; ++i) {
    const T cdf = T(0.5) * (T(1) + std::erf(px[i] * inv_sqrt2));
    po[i] = px[i] * cdf;
  }
  detail::set_backward(out, [x, on = out.node().get(), n, inv_sqrt2]() mutable {
    if (!x.requires_grad()) return;
    const T* g = on->grad.data();
    const T* px2 = x.values().data();
    T* gx = x.grad().data();
    const T inv_sqrt2pi = T(0.3989422804014326779);
    for (int64_t i = 0; i < n; ++i) {
      const T xi = px2[i];
      const T cdf = T(0.5) * (T(1) + std::erf(xi * inv_sqrt2));
      const T pdf = inv_sqrt2pi * std::exp(T(-0.5) * xi * xi);
      gx[i] += g[i] * (cdf + xi * pdf);
    }
  });
  return out;
}

// Row gather from an embedding table: (V,d) x ids(n) -> (n,d).
template <typename T>
Tensor<T> embedding(Tensor<T> table, std::vector<int> ids) {
  const Shape& s = table.shape();
  if (s.size() != 2) throw std::invalid_argument("embedding: table must be rank 2, got " + shape_str(s));
  const int v = s[0], d = s[1];
  for (int id : ids)
    if (id < 0 || id >= v)
      throw std::invalid_argument("embedding: id " + std::to_string(id) + " out of range for table " + shape_str(s));
  auto out = detail::make_result<T>("embedding", {static_cast<int>(ids.size()), d}, {table});
  const T* pt = table.values().data();
  T* po = out.values().data();
  for (size_t i = 0; i < ids.size(); ++i)
    std::copy(pt + int64_t(ids[i]) * d, pt + int64_t(ids[i]) * d + d, po + i * d);
  detail::set_backward(out, [table, on = out.node().get(), ids = std::move(ids), d]() mutable {
    if (!table.requires_grad()) return;
    const T* g = on->grad.data();
    T* gt = table.grad().data();
    for (size_t i = 0; i < ids.size(); ++i) {
      T* row = gt + int64_t(ids[i]) * d;
      const T* gr = g + i * d;
      for (int j = 0; j < d; ++j) row[j] += gr[j];
    }
  });
  return out;
}

// Per-row negative log-likelihood from logits: (R,K) x targets(R) -> (R).
// Rows with target < 0 are skipped and produce exactly zero loss and gradient.
template <typename T>
Tensor<T> cross_entropy(Tensor<T> logits, std::vector<int> targets) {
  const Shape& s = logits.shape();
  if (s.size() != 2) throw std::invalid_argument("cross_entropy: logits must be rank 2, got " + shape_str(s));
  const int rows = s[0], k = s[1];
  if (static_cast<int>(targets.size()) != rows)
    throw std::invalid_argument("cross_entropy: expected " + std::to_string(rows) + " targets, got " +
                                std::to_string(targets.size()));
  auto out = detail::make_result<T>("cross_entropy", {rows}, {logits});
  auto probs = std::make_shared<std::vector<T>>(int64_t(rows) * k);
  const T* pl = logits.values().data();
  T* po = out.values().data();
  for (int r = 0; r < rows; ++r) {
    const int target = targets[r];
    if (target >= k) throw std::invalid_argument("cross_entropy: target id " + std::to_string(target) +
                                                 " out of range for " + std::to_string(k) + " classes");
    const T* in = pl + int64_t(r) * k;
    T* pr = probs->data() + int64_t(r) * k;
    T m = in[0];
    for (int j = 1; j < k; ++j) m = std::max(m, in[j]);
    T sum = T(0);
    for (int j = 0; j < k; ++j) {
      pr[j] = std::exp(in[j] - m);
      sum += pr[j];
    }
    const T inv = T(1) / sum;
    for (int j = 0; j < k; ++j) pr[j] *= inv;
    po[r] = target < 0 ? T(0) : -(in[target] - m - std::log(sum));
  }
  detail::set_backward(out, [logits, on = out.node().get(), probs, targets = std::move(targets), rows, k]() mutable {
    if (!logits.requires_grad()) return;
    const T* g = on->grad.data();
    T* gl = logits.grad().data();
    for (int r = 0; r < rows; ++r) {
      if (targets[r] < 0) continue;
      const T gr = g[r];
      if (gr == T(0)) continue;
      const T* pr = probs->data() + int64_t(r) * k;
      T* row = gl + int64_t(r) * k;
      for (int j = 0; j < k; ++j) row[j] += gr * pr[j];
      row[targets[r]] -= gr;
    }
  });
  return out;
}

template <typename T>
Tensor<T> reshape(Tensor<T> x, Shape shape) {
  if (numel(shape) != x.size()) shape_error("reshape", x.shape(), shape);
  auto out = detail::make_result<T>("reshape", shape, {x});
  out.values() = x.values();
  const int64_t n = x.size();
  detail::set_backward(out, [x, on = out.node().get(), n]() mutable {
    if (!x.requires_grad()) return;
    const T* g = on->grad.data();
    T* gx = x.grad().data();
    for (int64_t i = 0; i < n; ++i) gx[i] += g[i];
  });
  return out;
}

namespace detail {
inline std::vector<int64_t> row_major_strides(const Shape& s) {
  std::vector<int64_t> st(s.size());
  int64_t acc = 1;
  for (int i = static_cast<int>(s.size()) - 1; i >= 0; --i) {
    st[i] = acc;
    acc *= s[i];
  }
  return st;
}

template <typename T>
void permute_copy(const Shape& in_shape, const std::vector<int>& axes, const T* src, T* dst, bool accumulate) {
  const int r = static_cast<int>(in_shape.size());
  Shape out_shape(r);
  for (int i = 0; i < r; ++i) out_shape[i] = in_shape[axes[i]];
  const auto in_strides = row_major_strides(in_shape);
  const auto out_strides = row_major_strides(out_shape);
  const int64_t n = numel(in_shape);
  for (int64_t o = 0; o < n; ++o) {
    int64_t rem = o, src_idx = 0;
    for (int i = 0; i < r; ++i) {
      const int64_t coord = rem / out_strides[i];
      rem %= out_strides[i];
      src_idx += coord * in_strides[axes[i]];
    }
    if (accumulate)
      dst[src_idx] += src[o];
    else
      dst[o] = src[src_idx];
  }
}
}  // namespace detail

// Axis permutation (generalized transpose), rank <= 4.
template <typename T>
Tensor<T> permute(Tensor<T> x, std::vector<int> axes) {
  const Shape& s = x.shape();
  if (axes.size() != s.size() || s.size() > 4)
    throw std::invalid_argument("permute: axes " + std::to_string(axes.size()) + " vs shape " + shape_str(s));
  std::vector<bool> seen(s.size(), false);
  Shape out_shape(s.size());
  for (size_t i = 0; i < axes.size(); ++i) {
    if (axes[i] < 0 || axes[i] >= static_cast<int>(s.size()) || seen[axes[i]])
      throw std::invalid_argument("permute: invalid axis order");
    seen[axes[i]] = true;
    out_shape[i] = s[axes[i]];
  }
  auto out = detail::make_result<T>("permute", out_shape, {x});
  detail::permute_copy(s, axes, x.values().data(), out.values().data(), false);
  detail::set_backward(out, [x, on = out.node().get(), axes = std::move(axes)]() mutable {
    if (!x.requires_grad()) return;
    detail::permute_copy(x.shape(), axes, on->grad.data(), x.grad().data(), true);
  });
  return out;
}

// Matrix transpose shorthand.
template <typename T>
Tensor<T> transpose(Tensor<T> x) {
  if (x.rank() == 2) return permute(x, {1, 0});
  if (x.rank() == 3) return permute(x, {0, 2, 1});
  throw std::invalid_argument("transpose: expects rank 2 or 3, got " + shape_str(x.shape()));
}

template <typename T>
Tensor<T> sum(Tensor<T> x) {
  auto out = detail::make_result<T>("sum", {1}, {x});
  T acc = T(0);
  for (T v : x.values()) acc += v;
  out.values()[0] = acc;
  const int64_t n = x.size();
  detail::set_backward(out, [x, on = out.node().get(), n]() mutable {
    if (!x.requires_grad()) return;
    const T g = on->grad[0];
    T* gx = x.grad().data();
    for (int64_t i = 0; i < n; ++i) gx[i] += g;
  });
  return out;
}

template <typename T>
Tensor<T> mean(Tensor<T> x) {
  auto s = sum(x);
  return scale(s, T(1) / T(x.size()));
}

// Attention mask application: keeps scores where allowed, else a large
// negative constant so softmax assigns exactly zero weight. Gradients pass
// only through allowed entries.
template <typename T>
Tensor<T> apply_attention_mask(Tensor<T> scores, std::shared_ptr<const std::vector<uint8_t>> allowed) {
  if (static_cast<int64_t>(allowed->size()) != scores.size())
    throw std::invalid_argument("apply_attention_mask: mask length " + std::to_string(allowed->size()) +
                                " does not match scores " + shape_str(scores.shape()));
  auto out = detail::make_result<T>("attention_mask", scores.shape(), {scores});
  const int64_t n = scores.size();
  const T* ps = scores.values().data();
  T* po = out.values().data();
  const T neg = T(-1e30);
  const uint8_t* m = allowed->data();
  for (int64_t i = 0; i < n; ++i) po[i] = m[i] ? ps[i] : neg;
  detail::set_backward(out, [scores, on = out.node().get(), allowed, n]() mutable {
    if (!scores.requires_grad()) return;
    const T* g = on->grad.data();
    T* gs = scores.grad().data();
    const uint8_t* m2 = allowed->data();
    for (int64_t i = 0; i < n; ++i)
      if (m2[i]) gs[i] += g[i];
  });
  return out;
}

// ---------------------------------------------------------------------------
// Backward
// ---------------------------------------------------------------------------

enum class BackwardOrder {
  kReverseSerial,  // reverse creation order (default)
  kDfsPostorder,   // reversed depth-first postorder from the root
};

namespace detail {

template <typename T>
void collect_nodes(TensorNode<T>* root, std::vector<TensorNode<T>*>& out) {
  std::unordered_set<TensorNode<T>*> seen;
  std::vector<std::pair<TensorNode<T>*, size_t>> stack;
  stack.emplace_back(root, 0);
  seen.insert(root);
  // iterative DFS; nodes are appended in postorder
  while (!stack.empty()) {
    auto& [node, idx] = stack.back();
    if (idx < node->parents.size()) {
      TensorNode<T>* p = node->parents[idx++].get();
      if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
    } else {
      out.push_back(node);
      stack.pop_back();
    }
  }
}

}  // namespace detail

// Runs reverse-mode accumulation from a scalar loss. Each reachable node's
// backward rule fires exactly once, in reverse topological order.
template <typename T>
void backward(Tensor<T> loss, BackwardOrder order = BackwardOrder::kReverseSerial) {
  if (loss.size() != 1) throw std::invalid_argument("backward: loss must be scalar, shape " + shape_str(loss.shape()));
  if (!loss.requires_grad()) return;
  std::vector<TensorNode<T>*> nodes;
  detail::collect_nodes(loss.node().get(), nodes);
  if (order == BackwardOrder::kReverseSerial)
    std::sort(nodes.begin(), nodes.end(),
              [](const TensorNode<T>* a, const TensorNode<T>* b) { return a->serial > b->serial; });
  else
    std::reverse(nodes.begin(), nodes.end());
  for (auto* n : nodes) n->ensure_grad();
  loss.node()->grad[0] = T(1);
  for (auto* n : nodes)
    if (n->backward_fn) n->backward_fn();
}

// Zeros the gradient buffers of every node reachable from `root`.
template <typename T>
void zero_all_grads(Tensor<T> root) {
  std::vector<TensorNode<T>*> nodes;
  detail::collect_nodes(root.node().get(), nodes);
  for (auto* n : nodes) std::fill(n->grad.begin(), n->grad.end(), T(0));
}

// ---------------------------------------------------------------------------
// Gradient checking
// ---------------------------------------------------------------------------

// Compares the reverse-mode gradient of f at `point` against central finite
// differences, component by component, and returns the worst relative error.
// f must build a fresh graph on every call and return a scalar tensor.
template <typename T, typename Fn>
double gradcheck(Fn f, Tensor<T> point, double epsilon = 1e-5) {
  static_assert(std::is_same_v<T, double>, "gradcheck requires 64-bit tensors");
  point.set_requires_grad(true);
  point.zero_grad();
  Tensor<T> loss = f(point);
  if (!std::isfinite(loss.item())) throw std::runtime_error("gradcheck: non-finite loss value");
  backward(loss);
  std::vector<T> analytic = point.grad();
  double worst = 0.0;
  for (int64_t i = 0; i < point.size(); ++i) {
    const T saved = point.values()[i];
    point.values()[i] = saved + static_cast<T>(epsilon);
    T up;
    {
      NoGradGuard ng;
      up = f(point).item();
    }
    point.values()[i] = saved - static_cast<T>(epsilon);
    T down;
    {
      NoGradGuard ng;
      down = f(point).item();
    }
    point.values()[i] = saved;
    if (!std::isfinite(up) || !std::isfinite(down)) throw std::runtime_error("gradcheck: non-finite probe value");
    const double numeric = (up - down) / (2.0 * epsilon);
    const double a = analytic[i];
    const double err = std::abs(a - numeric) / std::max({1.0, std::abs(a), std::abs(numeric)});
    worst = std::max(worst, err);
  }
  return worst;
}

}  // namespace mdcap
