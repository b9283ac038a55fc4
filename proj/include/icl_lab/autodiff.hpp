// SPDX-License-Identifier: Apache-2.0
//
// Tape-based reverse-mode automatic differentiation over a fixed set of
// tensor primitives. Every primitive records its output value plus a
// closure that pushes the upstream gradient back to its inputs.

#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <numbers>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "icl_lab/error.hpp"
#include "icl_lab/tensor.hpp"

namespace icl::ad {

/// Additive logit for masked (future) positions. exp(sentinel - max) underflows
/// to exactly 0 while keeping every value finite.
inline constexpr double kMaskSentinel = -1e30;
inline constexpr double kLayerNormEps = 1e-5;

class Tape;

/// Handle to a node on a tape.
class Var {
 public:
  Var() = default;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  std::size_t id() const noexcept { return id_; }
  Tape* tape() const noexcept { return tape_; }

 private:
  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, std::size_t)>;

  Var leaf(Tensor value, bool requires_grad, std::string name = {}) {
    if (!value.all_finite()) {
      throw NonFiniteError("non-finite value in leaf '" + name + "' of shape " +
                           shape_str(value.shape()));
    }
    nodes_.push_back(Node{"leaf", std::move(value), {}, false, requires_grad, {}, {}, std::move(name)});
    return Var(this, nodes_.size() - 1);
  }
  Var constant(Tensor value) { return leaf(std::move(value), false); }
  Var param(Tensor value, std::string name) { return leaf(std::move(value), true, std::move(name)); }

  /// Appends a primitive application. The backward closure is dropped when no
  /// input is differentiable.
  Var record(std::string op, Tensor value, std::vector<std::size_t> inputs, BackwardFn fn) {
    if (!value.all_finite()) {
      throw NonFiniteError("primitive '" + op + "' produced a non-finite value (shape " +
                           shape_str(value.shape()) + ")");
    }
    bool rg = false;
    for (auto i : inputs) rg = rg || nodes_.at(i).requires_grad;
    nodes_.push_back(Node{std::move(op), std::move(value), {}, false, rg, std::move(inputs),
                          rg ? std::move(fn) : BackwardFn{}, {}});
    return Var(this, nodes_.size() - 1);
  }

  const Tensor& value(std::size_t id) const { return nodes_.at(id).value; }
  bool requires_grad(std::size_t id) const { return nodes_.at(id).requires_grad; }
  const std::string& op(std::size_t id) const { return nodes_.at(id).op; }
  std::size_t size() const noexcept { return nodes_.size(); }

  /// Upstream gradient of node `id` during the backward sweep.
  const Tensor& upstream(std::size_t id) const { return nodes_.at(id).grad; }

  /// Gradient accumulator for `id`, zero-initialised on first touch.
  Tensor& grad_buffer(std::size_t id) {
    Node& n = nodes_.at(id);
    if (!n.has_grad) {
      n.grad = Tensor(n.value.shape(), 0.0);
      n.has_grad = true;
    }
    return n.grad;
  }

  void backward(Var output) {
    const Node& out = nodes_.at(output.id());
    if (out.value.size() != 1 || out.value.rank() > 1) {
      throw ShapeError("backward requires a scalar output, got shape " + shape_str(out.value.shape()));
    }
    for (auto& n : nodes_) {
      n.has_grad = false;
      n.grad = Tensor();
    }
    if (!out.requires_grad) return;
    grad_buffer(output.id())[0] = 1.0;
    for (std::size_t i = output.id() + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (n.has_grad && n.backward) n.backward(*this, i);
    }
  }

  /// Gradient of a differentiable node after backward(); nullopt for constants.
  std::optional<Tensor> grad(Var v) const {
    const Node& n = nodes_.at(v.id());
    if (!n.requires_grad) return std::nullopt;
    if (!n.has_grad) return Tensor(n.value.shape(), 0.0);
    return n.grad;
  }

  void clear() { nodes_.clear(); }

 private:
  struct Node {
    std::string op;
    Tensor value;
    Tensor grad;
    bool has_grad = false;
    bool requires_grad = false;
    std::vector<std::size_t> inputs;
    BackwardFn backward;
    std::string name;
  };
  std::vector<Node> nodes_;
};

inline const Tensor& Var::value() const { return tape_->value(id_); }

namespace detail {

inline Tape& same_tape(const Var& a, const Var& b) {
  if (a.tape() == nullptr || a.tape() != b.tape()) throw Error("variables live on different tapes");
  return *a.tape();
}

inline Shape broadcast_shape(const Shape& a, const Shape& b, const char* op) {
  const std::size_t r = std::max(a.size(), b.size());
  Shape out(r);
  for (std::size_t i = 0; i < r; ++i) {
    const std::size_t da = i < r - a.size() ? 1 : a[i - (r - a.size())];
    const std::size_t db = i < r - b.size() ? 1 : b[i - (r - b.size())];
    if (da != db && da != 1 && db != 1) {
      throw ShapeError(std::string(op) + ": cannot broadcast " + shape_str(a) + " with " + shape_str(b));
    }
    out[i] = std::max(da, db);
  }
  return out;
}

/// Strides of `s` viewed inside broadcast shape `out` (0 on broadcast axes).
inline std::vector<std::size_t> broadcast_strides(const Shape& s, const Shape& out) {
  std::vector<std::size_t> st(out.size(), 0);
  std::size_t stride = 1;
  for (std::size_t i = s.size(); i-- > 0;) {
    const std::size_t oi = i + (out.size() - s.size());
    st[oi] = s[i] == 1 ? 0 : stride;
    stride *= s[i];
  }
  return st;
}

/// Calls fn(out_index, a_index, b_index) for every element of the broadcast result.
template <typename Fn>
void for_each_broadcast(const Shape& a, const Shape& b, const Shape& out, Fn&& fn) {
  const std::size_t n = shape_numel(out);
  if (a == out && b == out) {
    for (std::size_t i = 0; i < n; ++i) fn(i, i, i);
    return;
  }
  const std::size_t nb = shape_numel(b);
  if (a == out && nb > 0 && out.size() >= b.size() &&
      std::equal(b.begin(), b.end(), out.end() - static_cast<std::ptrdiff_t>(b.size()))) {
    for (std::size_t i = 0; i < n; ++i) fn(i, i, i % nb);
    return;
  }
  const auto sa = broadcast_strides(a, out);
  const auto sb = broadcast_strides(b, out);
  std::vector<std::size_t> idx(out.size(), 0);
  std::size_t ia = 0, ib = 0;
  for (std::size_t i = 0; i < n; ++i) {
    fn(i, ia, ib);
    for (std::size_t ax = out.size(); ax-- > 0;) {
      ++idx[ax];
      ia += sa[ax];
      ib += sb[ax];
      if (idx[ax] < out[ax]) break;
      ia -= sa[ax] * out[ax];
      ib -= sb[ax] * out[ax];
      idx[ax] = 0;
    }
  }
}

template <typename F, typename DF>
Var unary(const char* name, Var a, F f, DF df) {
  Tape& t = *a.tape();
  const Tensor& x = a.value();
  Tensor y(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = f(x[i]);
  const std::size_t ia = a.id();
  return t.record(name, std::move(y), {ia}, [ia, df](Tape& tape, std::size_t self) {
    const Tensor& g = tape.upstream(self);
    const Tensor& xv = tape.value(ia);
    const Tensor& yv = tape.value(self);
    Tensor& gx = tape.grad_buffer(ia);
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * df(xv[i], yv[i]);
  });
}

inline std::size_t normalize_axis(std::ptrdiff_t axis, std::size_t rank) {
  const auto r = static_cast<std::ptrdiff_t>(rank);
  if (axis < 0) axis += r;
  if (axis < 0 || axis >= r) throw ShapeError("axis " + std::to_string(axis) + " out of range for rank " + std::to_string(rank));
  return static_cast<std::size_t>(axis);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise binary (numpy broadcasting)

inline Var add(Var a, Var b) {
  Tape& t = detail::same_tape(a, b);
  const Shape out = detail::broadcast_shape(a.shape(), b.shape(), "add");
  Tensor y(out);
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  detail::for_each_broadcast(av.shape(), bv.shape(), out,
                             [&](std::size_t i, std::size_t ia, std::size_t ib) { y[i] = av[ia] + bv[ib]; });
  const std::size_t ida = a.id(), idb = b.id();
  return t.record("add", std::move(y), {ida, idb}, [ida, idb](Tape& tape, std::size_t self) {
    const Tensor& g = tape.upstream(self);
    const Shape& sa = tape.value(ida).shape();
    const Shape& sb = tape.value(idb).shape();
    Tensor* ga = tape.requires_grad(ida) ? &tape.grad_buffer(ida) : nullptr;
    Tensor* gb = tape.requires_grad(idb) ? &tape.grad_buffer(idb) : nullptr;
    detail::for_each_broadcast(sa, sb, g.shape(), [&](std::size_t i, std::size_t ia, std::size_t ib) {
      if (ga) (*ga)[ia] += g[i];
      if (gb) (*gb)[ib] += g[i];
    });
  });
}

inline Var sub(Var a, Var b) {
  Tape& t = detail::same_tape(a, b);
  const Shape out = detail::broadcast_shape(a.shape(), b.shape(), "sub");
  Tensor y(out);
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  detail::for_each_broadcast(av.shape(), bv.shape(), out,
                             [&](std::size_t i, std::size_t ia, std::size_t ib) { y[i] = av[ia] - bv[ib]; });
  const std::size_t ida = a.id(), idb = b.id();
  return t.record("sub", std::move(y), {ida, idb}, [ida, idb](Tape& tape, std::size_t self) {
    const Tensor& g = tape.upstream(self);
    const Shape& sa = tape.value(ida).shape();
    const Shape& sb = tape.value(idb).shape();
    Tensor* ga = tape.requires_grad(ida) ? &tape.grad_buffer(ida) : nullptr;
    Tensor* gb = tape.requires_grad(idb) ? &tape.grad_buffer(idb) : nullptr;
    detail::for_each_broadcast(sa, sb, g.shape(), [&](std::size_t i, std::size_t ia, std::size_t ib) {
      if (ga) (*ga)[ia] += g[i];
      if (gb) (*gb)[ib] -= g[i];
    });
  });
}

inline Var mul(Var a, Var b) {
  Tape& t = detail::same_tape(a, b);
  const Shape out = detail::broadcast_shape(a.shape(), b.shape(), "mul");
  Tensor y(out);
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  detail::for_each_broadcast(av.shape(), bv.shape(), out,
                             [&](std::size_t i, std::size_t ia, std::size_t ib) { y[i] = av[ia] * bv[ib]; });
  const std::size_t ida = a.id(), idb = b.id();
  return t.record("mul", std::move(y), {ida, idb}, [ida, idb](Tape& tape, std::size_t self) {
    const Tensor& g = tape.upstream(self);
    const Tensor& av = tape.value(ida);
    const Tensor& bv = tape.value(idb);
    Tensor* ga = tape.requires_grad(ida) ? &tape.grad_buffer(ida) : nullptr;
    Tensor* gb = tape.requires_grad(idb) ? &tape.grad_buffer(idb) : nullptr;
    detail::for_each_broadcast(av.shape(), bv.shape(), g.shape(), [&](std::size_t i, std::size_t ia, std::size_t ib) {
      if (ga) (*ga)[ia] += g[i] * bv[ib];
      if (gb) (*gb)[ib] += g[i] * av[ia];
    });
  });
}

inline Var operator+(Var a, Var b) { return add(a, b); }
inline Var operator-(Var a, Var b) { return sub(a, b); }
inline Var operator*(Var a, Var b) { return mul(a, b); }

inline Var scale(Var a, double c) {
  return detail::unary("scale", a, [c](double x) { return c * x; }, [c](double, double) { return c; });
}

inline Var add_scalar(Var a, double c) {
  return detail::unary("add_scalar", a, [c](double x) { return x + c; }, [](double, double) { return 1.0; });
}

// ---------------------------------------------------------------------------
// Elementwise unary

inline Var tanh(Var a) {
  return detail::unary("tanh", a, [](double x) { return std::tanh(x); },
                       [](double, double y) { return 1.0 - y * y; });
}

inline Var exp(Var a) {
  return detail::unary("exp", a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

inline Var square(Var a) {
  return detail::unary("square", a, [](double x) { return x * x; }, [](double x, double) { return 2.0 * x; });
}

inline Var relu(Var a) {
  return detail::unary("relu", a, [](double x) { return x > 0.0 ? x : 0.0; },
                       [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

/// Exact (erf) GELU.
inline Var gelu(Var a) {
  return detail::unary(
      "gelu", a, [](double x) { return 0.5 * x * (1.0 + std::erf(x * std::numbers::sqrt2 / 2.0)); },
      [](double x, double) {
        const double cdf = 0.5 * (1.0 + std::erf(x * std::numbers::sqrt2 / 2.0));
        const double pdf = std::exp(-0.5 * x * x) * std::numbers::inv_sqrtpi / std::numbers::sqrt2;
        return cdf + x * pdf;
      });
}

inline double sigmoid_value(double x) {
  return x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
}

inline double softplus_value(double x) { return x > 30.0 ? x : std::log1p(std::exp(x)); }

inline Var sigmoid(Var a) {
  return detail::unary("sigmoid", a, sigmoid_value, [](double, double y) { return y * (1.0 - y); });
}

inline Var softplus(Var a) {
  return detail::unary("softplus", a, softplus_value, [](double x, double) { return sigmoid_value(x); });
}

/// x * sigmoid(x)
inline Var silu(Var a) {
  return detail::unary("silu", a, [](double x) { return x * sigmoid_value(x); },
                       [](double x, double) {
                         const double s = sigmoid_value(x);
                         return s * (1.0 + x * (1.0 - s));
                       });
}

// ---------------------------------------------------------------------------
// Last-axis reductions

inline Var softmax_last(Var a) {
  Tape& t = *a.tape();
  const Tensor& x = a.value();
  if (x.rank() == 0) throw ShapeError("softmax over a rank-0 tensor");
  const std::size_t n = x.shape().back();
  const std::size_t rows = n == 0 ? 0 : x.size() / n;
  Tensor y(x.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = x.data().data() + r * n;
    double* yr = y.data().data() + r * n;
    const double m = *std::max_element(xr, xr + n);
    double s = 0.0;
    for (std::size_t j = 0; j < n; ++j) s += (yr[j] = std::exp(xr[j] - m));
    for (std::size_t j = 0; j < n; ++j) yr[j] /= s;
  }
  const std::size_t ia = a.id();
  return t.record("softmax", std::move(y), {ia}, [ia, n, rows](Tape& tape, std::size_t self) {
    const Tensor& g = tape.upstream(self);
    const Tensor& yv = tape.value(self);
    Tensor& gx = tape.grad_buffer(ia);
    for (std::size_t r = 0; r < rows; ++r) {
      double dot = 0.0;
      for (std::size_t j = 0; j < n; ++j) dot += g[r * n + j] * yv[r * n + j];
      for (std::size_t j = 0; j < n; ++j) gx[r * n + j] += yv[r * n + j] * (g[r * n + j] - dot);
    }
  });
}

/// Normalises the last axis to zero mean and unit variance (no affine terms).
inline Var layer_norm_last(Var a) {
  Tape& t = *a.tape();
  const Tensor& x = a.value();
  if (x.rank() == 0) throw ShapeError("layer_norm over a rank-0 tensor");
  const std::size_t n = x.shape().back();
  const std::size_t rows = n == 0 ? 0 : x.size() / n;
  Tensor y(x.shape());
  std::vector<double> inv_std(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = x.data().data() + r * n;
    double mean = 0.0;
    for (std::size_t j = 0; j < n; ++j) mean += xr[j];
    mean /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t j = 0; j < n; ++j) var += (xr[j] - mean) * (xr[j] - mean);
    var /= static_cast<double>(n);
    inv_std[r] = 1.0 / std::sqrt(var + kLayerNormEps);
    for (std::size_t j = 0; j < n; ++j) y[r * n + j] = (xr[j] - mean) * inv_std[r];
  }
  const std::size_t ia = a.id();
  return t.record("layer_norm", std::move(y), {ia},
                  [ia, n, rows, inv_std = std::move(inv_std)](Tape& tape, std::size_t self) {
                    const Tensor& g = tape.upstream(self);
                    const Tensor& yv = tape.value(self);
                    Tensor& gx = tape.grad_buffer(ia);
                    const double dn = static_cast<double>(n);
                    for (std::size_t r = 0; r < rows; ++r) {
                      double mg = 0.0, mgy = 0.0;
                      for (std::size_t j = 0; j < n; ++j) {
                        mg += g[r * n + j];
                        mgy += g[r * n + j] * yv[r * n + j];
                      }
                      mg /= dn;
                      mgy /= dn;
                      for (std::size_t j = 0; j < n; ++j) {
                        gx[r * n + j] += inv_std[r] * (g[r * n + j] - mg - yv[r * n + j] * mgy);
                      }
                    }
                  });
}

/// Adds kMaskSentinel to every entry (.., i, j) with j > i of a [..., T, T] tensor.
inline Var causal_mask(Var a) {
  Tape& t = *a.tape();
  const Tensor& x = a.value();
  if (x.rank() < 2 || x.shape()[x.rank() - 1] != x.shape()[x.rank() - 2]) {
    throw ShapeError("causal_mask expects [..., T, T], got " + shape_str(x.shape()));
  }
  const std::size_t n = x.shape().back();
  Tensor y = x;
  const std::size_t mats = n == 0 ? 0 : x.size() / (n * n);
  for (std::size_t m = 0; m < mats; ++m)
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = i + 1; j < n; ++j) y[m * n * n + i * n + j] += kMaskSentinel;
  const std::size_t ia = a.id();
  return t.record("causal_mask", std::move(y), {ia}, [ia, n, mats](Tape& tape, std::size_t self) {
    const Tensor& g = tape.upstream(self);
    Tensor& gx = tape.grad_buffer(ia);
    for (std::size_t m = 0; m < mats; ++m)
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j <= i; ++j) gx[m * n * n + i * n + j] += g[m * n * n + i * n + j];
  });
}

// ---------------------------------------------------------------------------
// Linear algebra

/// a: [..., m, k]; b: [k, n] (shared) or [..., k, n] with identical leading dims.
inline Var matmul(Var a, Var b) {
  Tape& t = detail::same_tape(a, b);
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  if (sa.size() < 2 || sb.size() < 2) {
    throw ShapeError("matmul needs rank >= 2 operands, got " + shape_str(sa) + " and " + shape_str(sb));
  }
  const std::size_t m = sa[sa.size() - 2], k = sa.back();
  const std::size_t kb = sb[sb.size() - 2], n = sb.back();
  const bool shared = sb.size() == 2;
  const bool batched_ok =
      shared || (sb.size() == sa.size() && std::equal(sa.begin(), sa.end() - 2, sb.begin()));
  if (k != kb || !batched_ok) {
    throw ShapeError("matmul shape mismatch: " + shape_str(sa) + " x " + shape_str(sb));
  }
  const std::size_t batch = m == 0 || k == 0 ? shape_numel(Shape(sa.begin(), sa.end() - 2)) : a.value().size() / (m * k);
  Shape out(sa.begin(), sa.end() - 1);
  out.push_back(n);
  Tensor y(out);
  const double* A = a.value().data().data();
  const double* B = b.value().data().data();
  if (shared) {
    kernels::gemm(A, B, y.data().data(), batch * m, k, n, false, false, false);
  } else {
    for (std::size_t i = 0; i < batch; ++i)
      kernels::gemm(A + i * m * k, B + i * k * n, y.data().data() + i * m * n, m, k, n, false, false, false);
  }
  const std::size_t ida = a.id(), idb = b.id();
  return t.record("matmul", std::move(y), {ida, idb},
                  [ida, idb, batch, m, k, n, shared](Tape& tape, std::size_t self) {
                    const double* G = tape.upstream(self).data().data();
                    const double* Av = tape.value(ida).data().data();
                    const double* Bv = tape.value(idb).data().data();
                    if (tape.requires_grad(ida)) {
                      double* GA = tape.grad_buffer(ida).data().data();
                      if (shared) {
                        kernels::gemm(G, Bv, GA, batch * m, n, k, false, true, true);
                      } else {
                        for (std::size_t i = 0; i < batch; ++i)
                          kernels::gemm(G + i * m * n, Bv + i * k * n, GA + i * m * k, m, n, k, false, true, true);
                      }
                    }
                    if (tape.requires_grad(idb)) {
                      double* GB = tape.grad_buffer(idb).data().data();
                      if (shared) {
                        kernels::gemm(Av, G, GB, k, batch * m, n, true, false, true);
                      } else {
                        for (std::size_t i = 0; i < batch; ++i)
                          kernels::gemm(Av + i * m * k, G + i * m * n, GB + i * k * n, k, m, n, true, false, true);
                      }
                    }
                  });
}

/// Generic axis permutation: out.shape[i] = in.shape[perm[i]].
inline Var permute(Var a, std::vector<std::size_t> perm) {
  Tape& t = *a.tape();
  const Tensor& x = a.value();
  const std::size_t r = x.rank();
  if (perm.size() != r) throw ShapeError("permute rank mismatch for " + shape_str(x.shape()));
  std::vector<bool> seen(r, false);
  for (auto p : perm) {
    if (p >= r || seen[p]) throw ShapeError("permute: invalid permutation");
    seen[p] = true;
  }
  Shape out(r);
  for (std::size_t i = 0; i < r; ++i) out[i] = x.shape()[perm[i]];
  std::vector<std::size_t> in_strides(r, 1);
  for (std::size_t i = r; i-- > 1;) in_strides[i - 1] = in_strides[i] * x.shape()[i];
  // map[i] = flat input index of flat output index i
  std::vector<std::size_t> map(x.size());
  {
    std::vector<std::size_t> idx(r, 0);
    std::size_t src = 0;
    for (std::size_t i = 0; i < map.size(); ++i) {
      map[i] = src;
      for (std::size_t ax = r; ax-- > 0;) {
        ++idx[ax];
        src += in_strides[perm[ax]];
        if (idx[ax] < out[ax]) break;
        src -= in_strides[perm[ax]] * out[ax];
        idx[ax] = 0;
      }
    }
  }
  Tensor y(out);
  for (std::size_t i = 0; i < map.size(); ++i) y[i] = x[map[i]];
  const std::size_t ia = a.id();
  return t.record("permute", std::move(y), {ia}, [ia, map = std::move(map)](Tape& tape, std::size_t self) {
    const Tensor& g = tape.upstream(self);
    Tensor& gx = tape.grad_buffer(ia);
    for (std::size_t i = 0; i < map.size(); ++i) gx[map[i]] += g[i];
  });
}

inline Var transpose_last2(Var a) {
  const std::size_t r = a.value().rank();
  if (r < 2) throw ShapeError("transpose_last2 needs rank >= 2");
  std::vector<std::size_t> perm(r);
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  std::swap(perm[r - 1], perm[r - 2]);
  return permute(a, std::move(perm));
}

// ---------------------------------------------------------------------------
// Structural

inline Var reshape(Var a, Shape shape) {
  Tape& t = *a.tape();
  Tensor y = a.value().reshaped(std::move(shape));
  const std::size_t ia = a.id();
  return t.record("reshape", std::move(y), {ia}, [ia](Tape& tape, std::size_t self) {
    const Tensor& g = tape.upstream(self);
    Tensor& gx = tape.grad_buffer(ia);
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
  });
}

/// Contiguous range [start, start+len) along `axis`.
inline Var slice(Var a, std::ptrdiff_t axis_in, std::size_t start, std::size_t len) {
  Tape& t = *a.tape();
  const Tensor& x = a.value();
  const std::size_t axis = detail::normalize_axis(axis_in, x.rank());
  if (start + len > x.shape()[axis]) {
    throw ShapeError("slice [" + std::to_string(start) + ", " + std::to_string(start + len) +
                     ") out of range on axis " + std::to_string(axis) + " of " + shape_str(x.shape()));
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= x.shape()[i];
  for (std::size_t i = axis + 1; i < x.rank(); ++i) inner *= x.shape()[i];
  const std::size_t full = x.shape()[axis];
  Shape out = x.shape();
  out[axis] = len;
  Tensor y(out);
  for (std::size_t o = 0; o < outer; ++o)
    std::copy_n(x.data().data() + (o * full + start) * inner, len * inner, y.data().data() + o * len * inner);
  const std::size_t ia = a.id();
  return t.record("slice", std::move(y), {ia}, [ia, outer, inner, full, start, len](Tape& tape, std::size_t self) {
    const Tensor& g = tape.upstream(self);
    Tensor& gx = tape.grad_buffer(ia);
    for (std::size_t o = 0; o < outer; ++o)
      for (std::size_t j = 0; j < len * inner; ++j) gx[(o * full + start) * inner + j] += g[o * len * inner + j];
  });
}

/// Selects `indices` (in order, repeats allowed) along `axis`.
inline Var gather(Var a, std::ptrdiff_t axis_in, std::vector<std::size_t> indices) {
  Tape& t = *a.tape();
  const Tensor& x = a.value();
  const std::size_t axis = detail::normalize_axis(axis_in, x.rank());
  const std::size_t full = x.shape()[axis];
  for (auto i : indices)
    if (i >= full) throw ShapeError("gather index " + std::to_string(i) + " out of range for " + shape_str(x.shape()));
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= x.shape()[i];
  for (std::size_t i = axis + 1; i < x.rank(); ++i) inner *= x.shape()[i];
  Shape out = x.shape();
  out[axis] = indices.size();
  Tensor y(out);
  const std::size_t len = indices.size();
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t j = 0; j < len; ++j)
      std::copy_n(x.data().data() + (o * full + indices[j]) * inner, inner, y.data().data() + (o * len + j) * inner);
  const std::size_t ia = a.id();
  return t.record("gather", std::move(y), {ia},
                  [ia, outer, inner, full, indices = std::move(indices)](Tape& tape, std::size_t self) {
                    const Tensor& g = tape.upstream(self);
                    Tensor& gx = tape.grad_buffer(ia);
                    const std::size_t len = indices.size();
                    for (std::size_t o = 0; o < outer; ++o)
                      for (std::size_t j = 0; j < len; ++j)
                        for (std::size_t e = 0; e < inner; ++e)
                          gx[(o * full + indices[j]) * inner + e] += g[(o * len + j) * inner + e];
                  });
}

inline Var concat(const std::vector<Var>& parts, std::ptrdiff_t axis_in) {
  if (parts.empty()) throw ShapeError("concat of zero tensors");
  Tape& t = *parts.front().tape();
  const Shape& s0 = parts.front().shape();
  const std::size_t axis = detail::normalize_axis(axis_in, s0.size());
  std::size_t total = 0;
  for (const auto& p : parts) {
    const Shape& s = p.shape();
    bool ok = p.tape() == &t && s.size() == s0.size();
    for (std::size_t i = 0; ok && i < s.size(); ++i) ok = i == axis || s[i] == s0[i];
    if (!ok) throw ShapeError("concat shape mismatch: " + shape_str(s0) + " vs " + shape_str(s));
    total += s[axis];
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= s0[i];
  for (std::size_t i = axis + 1; i < s0.size(); ++i) inner *= s0[i];
  Shape out = s0;
  out[axis] = total;
  Tensor y(out);
  std::vector<std::size_t> ids, offsets, lens;
  std::size_t off = 0;
  for (const auto& p : parts) {
    const std::size_t len = p.shape()[axis];
    for (std::size_t o = 0; o < outer; ++o)
      std::copy_n(p.value().data().data() + o * len * inner, len * inner,
                  y.data().data() + (o * total + off) * inner);
    ids.push_back(p.id());
    offsets.push_back(off);
    lens.push_back(len);
    off += len;
  }
  return t.record("concat", std::move(y), ids, [ids, offsets, lens, outer, inner, total](Tape& tape, std::size_t self) {
    const Tensor& g = tape.upstream(self);
    for (std::size_t p = 0; p < ids.size(); ++p) {
      if (!tape.requires_grad(ids[p])) continue;
      Tensor& gx = tape.grad_buffer(ids[p]);
      for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t j = 0; j < lens[p] * inner; ++j)
          gx[o * lens[p] * inner + j] += g[(o * total + offsets[p]) * inner + j];
    }
  });
}

// ---------------------------------------------------------------------------
// Full reductions

inline Var reduce_sum(Var a) {
  Tape& t = *a.tape();
  double s = 0.0;
  for (double v : a.value().data()) s += v;
  const std::size_t ia = a.id();
  return t.record("reduce_sum", Tensor::scalar(s), {ia}, [ia](Tape& tape, std::size_t self) {
    const double g = tape.upstream(self)[0];
    Tensor& gx = tape.grad_buffer(ia);
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g;
  });
}

inline Var reduce_mean(Var a) {
  const std::size_t n = a.value().size();
  if (n == 0) throw ShapeError("reduce_mean of an empty tensor");
  return scale(reduce_sum(a), 1.0 / static_cast<double>(n));
}

// ---------------------------------------------------------------------------
// Sequence primitives

/// Per-channel causal convolution. u: [B, T, D], filter: [L, D].
/// y[b, t, d] = sum_{s=0}^{min(t, L-1)} filter[s, d] * u[b, t-s, d].
inline Var causal_conv(Var u, Var filter) {
  Tape& t = detail::same_tape(u, filter);
  const Shape& su = u.shape();
  const Shape& sf = filter.shape();
  if (su.size() != 3 || sf.size() != 2 || sf[1] != su[2]) {
    throw ShapeError("causal_conv expects u [B, T, D] and filter [L, D], got " + shape_str(su) + " and " + shape_str(sf));
  }
  const std::size_t B = su[0], T = su[1], D = su[2], L = sf[0];
  const Tensor& uv = u.value();
  const Tensor& fv = filter.value();
  Tensor y(su);
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t tt = 0; tt < T; ++tt) {
      double* yr = y.data().data() + (b * T + tt) * D;
      const std::size_t smax = std::min(tt + 1, L);
      for (std::size_t s = 0; s < smax; ++s) {
        const double* ur = uv.data().data() + (b * T + tt - s) * D;
        const double* fr = fv.data().data() + s * D;
        for (std::size_t d = 0; d < D; ++d) yr[d] += fr[d] * ur[d];
      }
    }
  const std::size_t iu = u.id(), iff = filter.id();
  return t.record("causal_conv", std::move(y), {iu, iff}, [iu, iff, B, T, D, L](Tape& tape, std::size_t self) {
    const Tensor& g = tape.upstream(self);
    const Tensor& uv = tape.value(iu);
    const Tensor& fv = tape.value(iff);
    Tensor* gu = tape.requires_grad(iu) ? &tape.grad_buffer(iu) : nullptr;
    Tensor* gf = tape.requires_grad(iff) ? &tape.grad_buffer(iff) : nullptr;
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t tt = 0; tt < T; ++tt) {
        const double* gr = g.data().data() + (b * T + tt) * D;
        const std::size_t smax = std::min(tt + 1, L);
        for (std::size_t s = 0; s < smax; ++s) {
          const std::size_t src = (b * T + tt - s) * D;
          for (std::size_t d = 0; d < D; ++d) {
            if (gu) (*gu)[src + d] += fv[s * D + d] * gr[d];
            if (gf) (*gf)[s * D + d] += uv[src + d] * gr[d];
          }
        }
      }
  });
}

/// Linear recurrence with input-dependent coefficients.
///   h[t] = abar[t] * h[t-1] + bbar[t] * u[t]     (elementwise over [D, N], h[-1] = 0)
///   y[t, d] = sum_n c[t, n] * h[t, d, n]
/// Shapes: abar, bbar [B, T, D, N]; c [B, T, N]; u [B, T, D]. Output [B, T, D].
inline Var selective_scan(Var abar, Var bbar, Var c, Var u) {
  Tape& t = detail::same_tape(abar, bbar);
  detail::same_tape(abar, c);
  detail::same_tape(abar, u);
  const Shape& sa = abar.shape();
  if (sa.size() != 4 || bbar.shape() != sa || c.shape() != Shape{sa[0], sa[1], sa[3]} ||
      u.shape() != Shape{sa[0], sa[1], sa[2]}) {
    throw ShapeError("selective_scan shape mismatch: abar " + shape_str(sa) + ", bbar " + shape_str(bbar.shape()) +
                     ", c " + shape_str(c.shape()) + ", u " + shape_str(u.shape()));
  }
  const std::size_t B = sa[0], T = sa[1], D = sa[2], N = sa[3];
  const Tensor& A = abar.value();
  const Tensor& Bb = bbar.value();
  const Tensor& C = c.value();
  const Tensor& U = u.value();
  auto states = std::make_shared<Tensor>(sa);  // h[b, t, d, n]
  Tensor y(u.shape());
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t tt = 0; tt < T; ++tt)
      for (std::size_t d = 0; d < D; ++d) {
        const std::size_t base = ((b * T + tt) * D + d) * N;
        const std::size_t prev = tt == 0 ? 0 : ((b * T + tt - 1) * D + d) * N;
        const double ud = U[(b * T + tt) * D + d];
        double acc = 0.0;
        for (std::size_t n = 0; n < N; ++n) {
          const double hp = tt == 0 ? 0.0 : (*states)[prev + n];
          const double h = A[base + n] * hp + Bb[base + n] * ud;
          (*states)[base + n] = h;
          acc += C[(b * T + tt) * N + n] * h;
        }
        y[(b * T + tt) * D + d] = acc;
      }
  if (!states->all_finite()) throw NonFiniteError("selective_scan: non-finite hidden state");
  const std::size_t ia = abar.id(), ib = bbar.id(), ic = c.id(), iu = u.id();
  return t.record("selective_scan", std::move(y), {ia, ib, ic, iu},
                  [ia, ib, ic, iu, B, T, D, N, states](Tape& tape, std::size_t self) {
                    const Tensor& g = tape.upstream(self);
                    const Tensor& A = tape.value(ia);
                    const Tensor& Bb = tape.value(ib);
                    const Tensor& C = tape.value(ic);
                    const Tensor& U = tape.value(iu);
                    const Tensor& H = *states;
                    Tensor* ga = tape.requires_grad(ia) ? &tape.grad_buffer(ia) : nullptr;
                    Tensor* gb = tape.requires_grad(ib) ? &tape.grad_buffer(ib) : nullptr;
                    Tensor* gc = tape.requires_grad(ic) ? &tape.grad_buffer(ic) : nullptr;
                    Tensor* gu = tape.requires_grad(iu) ? &tape.grad_buffer(iu) : nullptr;
                    std::vector<double> gh(D * N);
                    for (std::size_t b = 0; b < B; ++b) {
                      std::fill(gh.begin(), gh.end(), 0.0);
                      for (std::size_t tt = T; tt-- > 0;) {
                        for (std::size_t d = 0; d < D; ++d) {
                          const double gy = g[(b * T + tt) * D + d];
                          const std::size_t base = ((b * T + tt) * D + d) * N;
                          const double ud = U[(b * T + tt) * D + d];
                          double gud = 0.0;
                          for (std::size_t n = 0; n < N; ++n) {
                            double& adj = gh[d * N + n];
                            // carry from t+1 was folded in at the end of the previous iteration
                            adj += C[(b * T + tt) * N + n] * gy;
                            if (gc) (*gc)[(b * T + tt) * N + n] += gy * H[base + n];
                            const double hp = tt == 0 ? 0.0 : H[((b * T + tt - 1) * D + d) * N + n];
                            if (ga) (*ga)[base + n] += adj * hp;
                            if (gb) (*gb)[base + n] += adj * ud;
                            gud += adj * Bb[base + n];
                            adj *= A[base + n];
                          }
                          if (gu) (*gu)[(b * T + tt) * D + d] += gud;
                        }
                      }
                    }
                  });
}

}  // namespace icl::ad
