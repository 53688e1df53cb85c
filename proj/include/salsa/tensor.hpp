#pragma once

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <numeric>
#include <random>
#include <string>
#include <unordered_set>
#include <vector>

#include "salsa/common.hpp"

namespace salsa {

using Dims = std::vector<int>;

inline long dims_numel(const Dims& d) {
  long n = 1;
  for (int x : d) {
    require_shape(x > 0, "dimension must be positive");
    n *= x;
  }
  return n;
}

inline std::string dims_str(const Dims& d) {
  std::string s = "[";
  for (size_t i = 0; i < d.size(); ++i) s += (i ? "x" : "") + std::to_string(d[i]);
  return s + "]";
}

template <typename S>
using RowMat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename S>
using MatMap = Eigen::Map<RowMat<S>>;
template <typename S>
using ConstMatMap = Eigen::Map<const RowMat<S>>;
template <typename S>
using StridedMap = Eigen::Map<RowMat<S>, 0, Eigen::OuterStride<>>;
template <typename S>
using ConstStridedMap = Eigen::Map<const RowMat<S>, 0, Eigen::OuterStride<>>;

// Thread-local switch: when disabled, ops produce detached value-only nodes.
struct GradMode {
  static bool& enabled() {
    thread_local bool on = true;
    return on;
  }
};

struct NoGradGuard {
  bool prev;
  NoGradGuard() : prev(GradMode::enabled()) { GradMode::enabled() = false; }
  ~NoGradGuard() { GradMode::enabled() = prev; }
};

template <typename S>
struct Node {
  const char* op = "leaf";
  Dims dims;
  std::vector<S> value;
  std::vector<S> grad;  // allocated on first accumulation
  bool requires_grad = false;  // leaf flag: gradient is accumulated and kept
  bool needs_grad = false;     // grads flow through this node
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(Node&)> backward_fn;

  void ensure_grad() {
    if (grad.size() != value.size()) grad.assign(value.size(), S(0));
  }
};

template <typename S>
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<Node<S>> n) : node_(std::move(n)) {}

  static Tensor from(Dims dims, std::vector<S> data) {
    require_shape(dims_numel(dims) == long(data.size()), "from: dims " + dims_str(dims) +
                                                             " do not match data length " + std::to_string(data.size()));
    auto n = std::make_shared<Node<S>>();
    n->dims = std::move(dims);
    n->value = std::move(data);
    return Tensor(n);
  }
  static Tensor zeros(Dims dims) { return full(std::move(dims), S(0)); }
  static Tensor full(Dims dims, S v) {
    auto n = std::make_shared<Node<S>>();
    long c = dims_numel(dims);
    n->dims = std::move(dims);
    n->value.assign(size_t(c), v);
    return Tensor(n);
  }
  static Tensor scalar(S v) { return full({1}, v); }
  static Tensor randn(Dims dims, std::mt19937_64& rng, S stddev = S(1)) {
    auto t = zeros(std::move(dims));
    std::normal_distribution<double> d(0.0, 1.0);
    for (auto& x : t.node_->value) x = S(d(rng)) * stddev;
    return t;
  }

  bool defined() const { return node_ != nullptr; }
  const Dims& dims() const { return node_->dims; }
  long numel() const { return long(node_->value.size()); }
  int dim(int i) const { return node_->dims[size_t(i)]; }
  int rank() const { return int(node_->dims.size()); }

  std::vector<S>& values() { return node_->value; }
  const std::vector<S>& values() const { return node_->value; }
  S* data() { return node_->value.data(); }
  const S* data() const { return node_->value.data(); }

  S item() const {
    require_shape(numel() == 1, "item: tensor has " + std::to_string(numel()) + " elements");
    return node_->value[0];
  }
  S at(int i, int j) const { return node_->value[size_t(i) * size_t(dim(1)) + size_t(j)]; }

  Tensor& set_requires_grad(bool b = true) {
    node_->requires_grad = b;
    node_->needs_grad = b;
    return *this;
  }
  bool requires_grad() const { return node_->requires_grad; }

  bool has_grad() const { return !node_->grad.empty(); }
  const std::vector<S>& grad() const {
    require(has_grad(), "grad: no gradient accumulated");
    return node_->grad;
  }
  void zero_grad() { node_->grad.clear(); }

  /// Value copy detached from any graph.
  Tensor detached_copy() const { return Tensor::from(node_->dims, node_->value); }

  bool all_finite() const {
    for (S v : node_->value)
      if (!std::isfinite(double(v))) return false;
    return true;
  }

  std::shared_ptr<Node<S>> node() const { return node_; }

 private:
  std::shared_ptr<Node<S>> node_;
};

namespace detail {

template <typename S>
Tensor<S> make_op(const char* op, Dims dims, std::initializer_list<Tensor<S>> inputs,
                  std::function<void(Node<S>&)> backward) {
  auto n = std::make_shared<Node<S>>();
  n->op = op;
  n->value.resize(size_t(dims_numel(dims)));
  n->dims = std::move(dims);
  if (GradMode::enabled()) {
    bool need = false;
    for (const auto& t : inputs) need = need || t.node()->needs_grad;
    if (need) {
      n->needs_grad = true;
      for (const auto& t : inputs) n->inputs.push_back(t.node());
      n->backward_fn = std::move(backward);
    }
  }
  return Tensor<S>(n);
}

template <typename S>
void debug_check_finite(const Tensor<S>& t, const char* op) {
#ifndef NDEBUG
  if (!t.all_finite()) throw NumericError(std::string("non-finite value produced by op ") + op);
#else
  (void)t;
  (void)op;
#endif
}

template <typename S>
inline S sigmoid(S x) {
  return S(1) / (S(1) + std::exp(-x));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Ops
// ---------------------------------------------------------------------------

template <typename S>
Tensor<S> add(const Tensor<S>& a, const Tensor<S>& b) {
  require_shape(a.dims() == b.dims(), "add: shape mismatch " + dims_str(a.dims()) + " vs " + dims_str(b.dims()));
  auto out = detail::make_op<S>("add", a.dims(), {a, b}, [](Node<S>& self) {
    for (auto& in : self.inputs) {
      if (!in->needs_grad) continue;
      in->ensure_grad();
      for (size_t i = 0; i < self.grad.size(); ++i) in->grad[i] += self.grad[i];
    }
  });
  const S* pa = a.data();
  const S* pb = b.data();
  S* po = out.data();
  for (long i = 0; i < a.numel(); ++i) po[i] = pa[i] + pb[i];
  detail::debug_check_finite(out, "add");
  return out;
}

/// x: [n, d], bias: [d]; adds the bias to every row.
template <typename S>
Tensor<S> add_bias(const Tensor<S>& x, const Tensor<S>& bias) {
  require_shape(x.rank() == 2 && bias.rank() == 1 && x.dim(1) == bias.dim(0), "add_bias: incompatible shapes");
  const int n = x.dim(0), d = x.dim(1);
  auto out = detail::make_op<S>("add_bias", x.dims(), {x, bias}, [n, d](Node<S>& self) {
    auto& xin = *self.inputs[0];
    auto& bin = *self.inputs[1];
    if (xin.needs_grad) {
      xin.ensure_grad();
      for (size_t i = 0; i < self.grad.size(); ++i) xin.grad[i] += self.grad[i];
    }
    if (bin.needs_grad) {
      bin.ensure_grad();
      for (int i = 0; i < n; ++i)
        for (int j = 0; j < d; ++j) bin.grad[size_t(j)] += self.grad[size_t(i) * size_t(d) + size_t(j)];
    }
  });
  const S* px = x.data();
  const S* pb = bias.data();
  S* po = out.data();
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < d; ++j) po[size_t(i) * size_t(d) + size_t(j)] = px[size_t(i) * size_t(d) + size_t(j)] + pb[size_t(j)];
  detail::debug_check_finite(out, "add_bias");
  return out;
}

template <typename S>
Tensor<S> mul(const Tensor<S>& a, const Tensor<S>& b) {
  require_shape(a.dims() == b.dims(), "mul: shape mismatch");
  auto out = detail::make_op<S>("mul", a.dims(), {a, b}, [](Node<S>& self) {
    auto& an = *self.inputs[0];
    auto& bn = *self.inputs[1];
    if (an.needs_grad) {
      an.ensure_grad();
      for (size_t i = 0; i < self.grad.size(); ++i) an.grad[i] += self.grad[i] * bn.value[i];
    }
    if (bn.needs_grad) {
      bn.ensure_grad();
      for (size_t i = 0; i < self.grad.size(); ++i) bn.grad[i] += self.grad[i] * an.value[i];
    }
  });
  for (long i = 0; i < a.numel(); ++i) out.data()[i] = a.data()[i] * b.data()[i];
  detail::debug_check_finite(out, "mul");
  return out;
}

template <typename S>
Tensor<S> scale(const Tensor<S>& a, S c) {
  auto out = detail::make_op<S>("scale", a.dims(), {a}, [c](Node<S>& self) {
    auto& an = *self.inputs[0];
    if (!an.needs_grad) return;
    an.ensure_grad();
    for (size_t i = 0; i < self.grad.size(); ++i) an.grad[i] += c * self.grad[i];
  });
  for (long i = 0; i < a.numel(); ++i) out.data()[i] = c * a.data()[i];
  detail::debug_check_finite(out, "scale");
  return out;
}

/// a: [m, k], b: [k, n] -> [m, n].
template <typename S>
Tensor<S> matmul(const Tensor<S>& a, const Tensor<S>& b) {
  require_shape(a.rank() == 2 && b.rank() == 2, "matmul: rank-2 tensors required");
  require_shape(a.dim(1) == b.dim(0),
                "matmul: inner dims differ, " + dims_str(a.dims()) + " vs " + dims_str(b.dims()));
  const int m = a.dim(0), k = a.dim(1), n = b.dim(1);
  auto out = detail::make_op<S>("matmul", {m, n}, {a, b}, [m, k, n](Node<S>& self) {
    auto& an = *self.inputs[0];
    auto& bn = *self.inputs[1];
    ConstMatMap<S> G(self.grad.data(), m, n);
    if (an.needs_grad) {
      an.ensure_grad();
      MatMap<S> dA(an.grad.data(), m, k);
      ConstMatMap<S> B(bn.value.data(), k, n);
      dA.noalias() += G * B.transpose();
    }
    if (bn.needs_grad) {
      bn.ensure_grad();
      MatMap<S> dB(bn.grad.data(), k, n);
      ConstMatMap<S> A(an.value.data(), m, k);
      dB.noalias() += A.transpose() * G;
    }
  });
  ConstMatMap<S> A(a.data(), m, k);
  ConstMatMap<S> B(b.data(), k, n);
  MatMap<S> C(out.data(), m, n);
  C.noalias() = A * B;
  detail::debug_check_finite(out, "matmul");
  return out;
}

template <typename S>
Tensor<S> silu(const Tensor<S>& x) {
  auto out = detail::make_op<S>("silu", x.dims(), {x}, [](Node<S>& self) {
    auto& xn = *self.inputs[0];
    if (!xn.needs_grad) return;
    xn.ensure_grad();
    for (size_t i = 0; i < self.grad.size(); ++i) {
      S v = xn.value[i];
      S sg = detail::sigmoid(v);
      xn.grad[i] += self.grad[i] * sg * (S(1) + v * (S(1) - sg));
    }
  });
  for (long i = 0; i < x.numel(); ++i) {
    S v = x.data()[i];
    out.data()[i] = v * detail::sigmoid(v);
  }
  detail::debug_check_finite(out, "silu");
  return out;
}

/// Per-row normalization over the last axis, then affine. x: [n, d] (or [d]).
template <typename S>
Tensor<S> layer_norm(const Tensor<S>& x, const Tensor<S>& gain, const Tensor<S>& bias, S eps = S(1e-5)) {
  require_shape(x.rank() == 1 || x.rank() == 2, "layer_norm: rank-1 or 2 input");
  const int d = x.dim(x.rank() - 1);
  const int n = x.rank() == 2 ? x.dim(0) : 1;
  require_shape(gain.rank() == 1 && gain.dim(0) == d && bias.rank() == 1 && bias.dim(0) == d,
                "layer_norm: gain/bias must match last dim");
  auto xhat = std::make_shared<std::vector<S>>(size_t(n) * size_t(d));
  auto inv_std = std::make_shared<std::vector<S>>(size_t(n));
  auto out = detail::make_op<S>("layer_norm", x.dims(), {x, gain, bias}, [n, d, xhat, inv_std](Node<S>& self) {
    auto& xn = *self.inputs[0];
    auto& gn = *self.inputs[1];
    auto& bn = *self.inputs[2];
    if (gn.needs_grad) gn.ensure_grad();
    if (bn.needs_grad) bn.ensure_grad();
    if (xn.needs_grad) xn.ensure_grad();
    for (int i = 0; i < n; ++i) {
      const S* g = self.grad.data() + size_t(i) * size_t(d);
      const S* xh = xhat->data() + size_t(i) * size_t(d);
      if (gn.needs_grad || bn.needs_grad) {
        for (int j = 0; j < d; ++j) {
          if (gn.needs_grad) gn.grad[size_t(j)] += g[j] * xh[j];
          if (bn.needs_grad) bn.grad[size_t(j)] += g[j];
        }
      }
      if (xn.needs_grad) {
        // dx = r * (dxhat - mean(dxhat) - xhat * mean(dxhat*xhat))
        S m1 = 0, m2 = 0;
        for (int j = 0; j < d; ++j) {
          S dxh = g[j] * gn.value[size_t(j)];
          m1 += dxh;
          m2 += dxh * xh[j];
        }
        m1 /= S(d);
        m2 /= S(d);
        S r = (*inv_std)[size_t(i)];
        for (int j = 0; j < d; ++j) {
          S dxh = g[j] * gn.value[size_t(j)];
          xn.grad[size_t(i) * size_t(d) + size_t(j)] += r * (dxh - m1 - xh[j] * m2);
        }
      }
    }
  });
  for (int i = 0; i < n; ++i) {
    const S* row = x.data() + size_t(i) * size_t(d);
    S mean = 0;
    for (int j = 0; j < d; ++j) mean += row[j];
    mean /= S(d);
    S var = 0;
    for (int j = 0; j < d; ++j) var += (row[j] - mean) * (row[j] - mean);
    var /= S(d);
    S r = S(1) / std::sqrt(var + eps);
    (*inv_std)[size_t(i)] = r;
    S* o = out.data() + size_t(i) * size_t(d);
    S* xh = xhat->data() + size_t(i) * size_t(d);
    for (int j = 0; j < d; ++j) {
      xh[j] = (row[j] - mean) * r;
      o[j] = gain.data()[j] * xh[j] + bias.data()[j];
    }
  }
  detail::debug_check_finite(out, "layer_norm");
  return out;
}

/// Row gather: table [V, d] indexed by ids -> [len(ids), d].
template <typename S>
Tensor<S> embedding(const Tensor<S>& table, const std::vector<int>& ids) {
  require_shape(table.rank() == 2, "embedding: table must be [V, d]");
  const int v = table.dim(0), d = table.dim(1);
  for (int id : ids)
    require(id >= 0 && id < v, "embedding: id " + std::to_string(id) + " out of range [0," + std::to_string(v) + ")");
  const int n = int(ids.size());
  auto idx = std::make_shared<std::vector<int>>(ids);
  auto out = detail::make_op<S>("embedding", {n, d}, {table}, [idx, d](Node<S>& self) {
    auto& tn = *self.inputs[0];
    if (!tn.needs_grad) return;
    tn.ensure_grad();
    for (size_t i = 0; i < idx->size(); ++i) {
      S* dst = tn.grad.data() + size_t((*idx)[i]) * size_t(d);
      const S* src = self.grad.data() + i * size_t(d);
      for (int j = 0; j < d; ++j) dst[j] += src[j];
    }
  });
  for (int i = 0; i < n; ++i)
    std::copy_n(table.data() + size_t(ids[size_t(i)]) * size_t(d), size_t(d), out.data() + size_t(i) * size_t(d));
  detail::debug_check_finite(out, "embedding");
  return out;
}

template <typename S>
Tensor<S> sum(const Tensor<S>& x) {
  auto out = detail::make_op<S>("sum", {1}, {x}, [](Node<S>& self) {
    auto& xn = *self.inputs[0];
    if (!xn.needs_grad) return;
    xn.ensure_grad();
    for (auto& g : xn.grad) g += self.grad[0];
  });
  S acc = 0;
  for (long i = 0; i < x.numel(); ++i) acc += x.data()[i];
  out.data()[0] = acc;
  return out;
}

/// Numerically stable in-place row softmax on a raw buffer (no graph).
template <typename S>
void softmax_rows(S* data, int rows, int cols) {
  for (int i = 0; i < rows; ++i) {
    S* row = data + size_t(i) * size_t(cols);
    S mx = row[0];
    for (int j = 1; j < cols; ++j) mx = std::max(mx, row[j]);
    S z = 0;
    for (int j = 0; j < cols; ++j) {
      row[j] = std::exp(row[j] - mx);
      z += row[j];
    }
    for (int j = 0; j < cols; ++j) row[j] /= z;
  }
}

// One attention span: query rows [q_start, q_start+q_len) attend to key/value
// rows [kv_start, kv_start+kv_len). Spans let one big projection GEMM serve a
// whole batch of variable-length sequences packed along the row axis.
struct AttnSegment {
  int q_start = 0;
  int q_len = 0;
  int kv_start = 0;
  int kv_len = 0;
};

/// Multi-head scaled dot-product attention over packed segments.
/// q: [Nq, h*hd], k/v: [Nk, h*hd]. With `causal`, query i of a segment only
/// attends to kv positions <= i (requires q_len == kv_len per segment).
template <typename S>
Tensor<S> segmented_attention(const Tensor<S>& q, const Tensor<S>& k, const Tensor<S>& v,
                              const std::vector<AttnSegment>& segs, int n_heads, bool causal, S att_scale) {
  require_shape(q.rank() == 2 && k.rank() == 2 && v.rank() == 2, "attention: rank-2 inputs");
  const int dm = q.dim(1);
  require_shape(k.dim(1) == dm && v.dim(1) == dm, "attention: q/k/v width mismatch");
  require_shape(dm % n_heads == 0, "attention: width not divisible by heads");
  const int hd = dm / n_heads;
  size_t probs_total = 0;
  for (const auto& s : segs) {
    require_shape(s.q_start >= 0 && s.q_len > 0 && s.q_start + s.q_len <= q.dim(0), "attention: bad q segment");
    require_shape(s.kv_start >= 0 && s.kv_len > 0 && s.kv_start + s.kv_len <= k.dim(0), "attention: bad kv segment");
    if (causal) require_shape(s.q_len == s.kv_len, "attention: causal segments must be square");
    probs_total += size_t(s.q_len) * size_t(s.kv_len);
  }
  // Attention probabilities are saved per (segment, head) for the backward pass.
  auto probs = std::make_shared<std::vector<S>>(probs_total * size_t(n_heads));
  auto segs_copy = std::make_shared<std::vector<AttnSegment>>(segs);

  auto out = detail::make_op<S>(
      "attention", q.dims(), {q, k, v}, [segs_copy, probs, n_heads, hd, dm, att_scale](Node<S>& self) {
        auto& qn = *self.inputs[0];
        auto& kn = *self.inputs[1];
        auto& vn = *self.inputs[2];
        if (qn.needs_grad) qn.ensure_grad();
        if (kn.needs_grad) kn.ensure_grad();
        if (vn.needs_grad) vn.ensure_grad();
        size_t poff = 0;
        for (const auto& s : *segs_copy) {
          for (int h = 0; h < n_heads; ++h) {
            ConstStridedMap<S> Q(qn.value.data() + size_t(s.q_start) * size_t(dm) + size_t(h) * size_t(hd), s.q_len,
                                 hd, Eigen::OuterStride<>(dm));
            ConstStridedMap<S> K(kn.value.data() + size_t(s.kv_start) * size_t(dm) + size_t(h) * size_t(hd), s.kv_len,
                                 hd, Eigen::OuterStride<>(dm));
            ConstStridedMap<S> V(vn.value.data() + size_t(s.kv_start) * size_t(dm) + size_t(h) * size_t(hd), s.kv_len,
                                 hd, Eigen::OuterStride<>(dm));
            ConstMatMap<S> P(probs->data() + poff, s.q_len, s.kv_len);
            ConstStridedMap<S> Go(self.grad.data() + size_t(s.q_start) * size_t(dm) + size_t(h) * size_t(hd), s.q_len,
                                  hd, Eigen::OuterStride<>(dm));
            if (vn.needs_grad) {
              StridedMap<S> dV(vn.grad.data() + size_t(s.kv_start) * size_t(dm) + size_t(h) * size_t(hd), s.kv_len,
                               hd, Eigen::OuterStride<>(dm));
              dV.noalias() += P.transpose() * Go;
            }
            if (qn.needs_grad || kn.needs_grad) {
              RowMat<S> dP = Go * V.transpose();  // [q_len, kv_len]
              // Softmax Jacobian rowwise: dS_ij = P_ij * (dP_ij - sum_k P_ik dP_ik)
              RowMat<S> dS(s.q_len, s.kv_len);
              for (int i = 0; i < s.q_len; ++i) {
                S rs = 0;
                for (int j = 0; j < s.kv_len; ++j) rs += P(i, j) * dP(i, j);
                for (int j = 0; j < s.kv_len; ++j) dS(i, j) = P(i, j) * (dP(i, j) - rs);
              }
              if (qn.needs_grad) {
                StridedMap<S> dQ(qn.grad.data() + size_t(s.q_start) * size_t(dm) + size_t(h) * size_t(hd), s.q_len,
                                 hd, Eigen::OuterStride<>(dm));
                dQ.noalias() += att_scale * (dS * K);
              }
              if (kn.needs_grad) {
                StridedMap<S> dK(kn.grad.data() + size_t(s.kv_start) * size_t(dm) + size_t(h) * size_t(hd), s.kv_len,
                                 hd, Eigen::OuterStride<>(dm));
                dK.noalias() += att_scale * (dS.transpose() * Q);
              }
            }
            poff += size_t(s.q_len) * size_t(s.kv_len);
          }
        }
      });

  std::fill(out.values().begin(), out.values().end(), S(0));
  size_t poff = 0;
  for (const auto& s : segs) {
    for (int h = 0; h < n_heads; ++h) {
      ConstStridedMap<S> Q(q.data() + size_t(s.q_start) * size_t(dm) + size_t(h) * size_t(hd), s.q_len, hd,
                           Eigen::OuterStride<>(dm));
      ConstStridedMap<S> K(k.data() + size_t(s.kv_start) * size_t(dm) + size_t(h) * size_t(hd), s.kv_len, hd,
                           Eigen::OuterStride<>(dm));
      ConstStridedMap<S> V(v.data() + size_t(s.kv_start) * size_t(dm) + size_t(h) * size_t(hd), s.kv_len, hd,
                           Eigen::OuterStride<>(dm));
      MatMap<S> P(probs->data() + poff, s.q_len, s.kv_len);
      P.noalias() = att_scale * (Q * K.transpose());
      if (causal) {
        for (int i = 0; i < s.q_len; ++i)
          for (int j = i + 1; j < s.kv_len; ++j) P(i, j) = -std::numeric_limits<S>::infinity();
      }
      softmax_rows(probs->data() + poff, s.q_len, s.kv_len);
      StridedMap<S> O(out.data() + size_t(s.q_start) * size_t(dm) + size_t(h) * size_t(hd), s.q_len, hd,
                      Eigen::OuterStride<>(dm));
      O.noalias() = P * V;
      poff += size_t(s.q_len) * size_t(s.kv_len);
    }
  }
  detail::debug_check_finite(out, "attention");
  return out;
}

/// Weighted token-level negative log-likelihood. logits: [n, V]. The loss is
/// sum_i w_i * nll_i, so weights encode the averaging convention.
template <typename S>
Tensor<S> weighted_cross_entropy(const Tensor<S>& logits, const std::vector<int>& targets,
                                 const std::vector<S>& weights) {
  require_shape(logits.rank() == 2, "cross_entropy: logits must be [n, V]");
  const int n = logits.dim(0), vsz = logits.dim(1);
  require(int(targets.size()) == n && int(weights.size()) == n, "cross_entropy: targets/weights length mismatch");
  for (int t : targets)
    require(t >= 0 && t < vsz, "cross_entropy: target id " + std::to_string(t) + " out of range");
  auto lse = std::make_shared<std::vector<S>>(size_t(n));
  auto tgt = std::make_shared<std::vector<int>>(targets);
  auto wts = std::make_shared<std::vector<S>>(weights);
  auto out = detail::make_op<S>("cross_entropy", {1}, {logits}, [lse, tgt, wts, n, vsz](Node<S>& self) {
    auto& ln = *self.inputs[0];
    if (!ln.needs_grad) return;
    ln.ensure_grad();
    const S g0 = self.grad[0];
    for (int i = 0; i < n; ++i) {
      const S w = (*wts)[size_t(i)] * g0;
      if (w == S(0)) continue;
      const S* z = ln.value.data() + size_t(i) * size_t(vsz);
      S* dz = ln.grad.data() + size_t(i) * size_t(vsz);
      for (int j = 0; j < vsz; ++j) dz[j] += w * std::exp(z[j] - (*lse)[size_t(i)]);
      dz[(*tgt)[size_t(i)]] -= w;
    }
  });
  S loss = 0;
  for (int i = 0; i < n; ++i) {
    const S* z = logits.data() + size_t(i) * size_t(vsz);
    S mx = z[0];
    for (int j = 1; j < vsz; ++j) mx = std::max(mx, z[j]);
    S acc = 0;
    for (int j = 0; j < vsz; ++j) acc += std::exp(z[j] - mx);
    S l = mx + std::log(acc);
    (*lse)[size_t(i)] = l;
    loss += weights[size_t(i)] * (l - z[targets[size_t(i)]]);
  }
  out.data()[0] = loss;
  return out;
}

/// Mean negative log-likelihood over unmasked positions (mask true = scored).
template <typename S>
Tensor<S> softmax_cross_entropy(const Tensor<S>& logits, const std::vector<int>& targets,
                                const std::vector<uint8_t>& mask) {
  require(targets.size() == mask.size(), "cross_entropy: targets/mask length mismatch");
  long n_scored = std::count(mask.begin(), mask.end(), uint8_t(1));
  require(n_scored > 0, "cross_entropy: all positions masked");
  std::vector<S> w(mask.size());
  for (size_t i = 0; i < mask.size(); ++i) w[i] = mask[i] ? S(1) / S(n_scored) : S(0);
  return weighted_cross_entropy(logits, targets, w);
}

// ---------------------------------------------------------------------------
// Backward
// ---------------------------------------------------------------------------

/// Topologically ordered view of the nodes reachable from a root through
/// gradient-carrying edges. order[i]'s inputs all appear before it.
template <typename S>
struct Graph {
  std::vector<std::shared_ptr<Node<S>>> order;

  static Graph build(const Tensor<S>& root) {
    Graph g;
    if (!root.node()->needs_grad) return g;
    std::unordered_set<Node<S>*> visited;
    // Iterative post-order DFS.
    std::vector<std::pair<std::shared_ptr<Node<S>>, size_t>> stack;
    stack.emplace_back(root.node(), 0);
    visited.insert(root.node().get());
    while (!stack.empty()) {
      auto& [node, next_child] = stack.back();
      bool descended = false;
      while (next_child < node->inputs.size()) {
        auto& child = node->inputs[next_child++];
        if (child->needs_grad && !visited.count(child.get())) {
          visited.insert(child.get());
          stack.emplace_back(child, 0);
          descended = true;
          break;
        }
      }
      if (!descended && (stack.back().second >= stack.back().first->inputs.size())) {
        g.order.push_back(stack.back().first);
        stack.pop_back();
      }
    }
    return g;
  }
};

/// Reverse-mode sweep from a scalar loss. Gradients accumulate into every
/// reachable node; leaves with requires_grad keep them for the optimizer.
template <typename S>
void backward(const Tensor<S>& loss) {
  require(loss.numel() == 1, "backward: loss must be scalar");
  require(loss.node()->needs_grad, "backward: loss does not depend on any requires_grad tensor");
  Graph<S> g = Graph<S>::build(loss);
  loss.node()->ensure_grad();
  loss.node()->grad[0] = S(1);
  for (auto it = g.order.rbegin(); it != g.order.rend(); ++it) {
    auto& node = **it;
    if (node.backward_fn) {
      node.ensure_grad();
      node.backward_fn(node);
    }
  }
}

// ---------------------------------------------------------------------------
// AdamW with decoupled weight decay.
// ---------------------------------------------------------------------------

template <typename S>
class AdamW {
 public:
  struct Options {
    S lr = S(1e-3);
    S weight_decay = S(0.02);
    S beta1 = S(0.9);
    S beta2 = S(0.999);
    S eps = S(1e-8);
  };

  AdamW(std::vector<Tensor<S>> params, Options opt) : params_(std::move(params)), opt_(opt) {
    m_.resize(params_.size());
    v_.resize(params_.size());
    for (size_t i = 0; i < params_.size(); ++i) {
      m_[i].assign(size_t(params_[i].numel()), S(0));
      v_[i].assign(size_t(params_[i].numel()), S(0));
    }
  }

  void step() {
    ++t_;
    const S bc1 = S(1) - std::pow(opt_.beta1, S(t_));
    const S bc2 = S(1) - std::pow(opt_.beta2, S(t_));
    for (size_t p = 0; p < params_.size(); ++p) {
      auto& param = params_[p];
      const bool has_g = param.has_grad();
      if (has_g)
        require_shape(param.grad().size() == m_[p].size(), "adamw: grad/moment shape mismatch");
      S* w = param.data();
      const S* g = has_g ? param.grad().data() : nullptr;
      for (size_t i = 0; i < m_[p].size(); ++i) {
        const S gi = g ? g[i] : S(0);
        m_[p][i] = opt_.beta1 * m_[p][i] + (S(1) - opt_.beta1) * gi;
        v_[p][i] = opt_.beta2 * v_[p][i] + (S(1) - opt_.beta2) * gi * gi;
        const S mhat = m_[p][i] / bc1;
        const S vhat = v_[p][i] / bc2;
        w[i] -= opt_.lr * (mhat / (std::sqrt(vhat) + opt_.eps) + opt_.weight_decay * w[i]);
      }
    }
  }

  void zero_grad() {
    for (auto& p : params_) p.zero_grad();
  }

  long step_count() const { return t_; }
  const Options& options() const { return opt_; }

 private:
  std::vector<Tensor<S>> params_;
  std::vector<std::vector<S>> m_, v_;
  Options opt_;
  long t_ = 0;
};

/// Scales gradients in place so their global L2 norm is at most max_norm.
/// Returns the pre-clip norm.
template <typename S>
S clip_grad_norm(std::vector<Tensor<S>>& params, S max_norm) {
  double total = 0;
  for (auto& p : params) {
    if (!p.has_grad()) continue;
    for (S g : p.grad()) total += double(g) * double(g);
  }
  S norm = S(std::sqrt(total));
  if (norm > max_norm && norm > S(0)) {
    S factor = max_norm / norm;
    for (auto& p : params) {
      if (!p.has_grad()) continue;
      for (auto& g : p.node()->grad) g *= factor;
    }
  }
  return norm;
}

}  // namespace salsa
