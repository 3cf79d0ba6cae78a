#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <memory>
#include <stdexcept>
#include <unordered_set>
#include <utility>
#include <vector>

#define EIGEN_DONT_PARALLELIZE
#include <Eigen/Dense>

#include "brokercc/tensor.hpp"

namespace brokercc {

/// Reverse-mode autodiff over Tensor<T>. Graphs are built eagerly by the
/// op functions below; Var is a shared handle to a graph node. Leaves with
/// requires_grad=true are parameters; everything reachable from them
/// propagates gradients.
template <class T>
struct Node {
  Tensor<T> value;
  Tensor<T> grad;  // sized lazily on first accumulation
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node<T>>> parents;
  std::function<void(Node<T>&)> backprop;  // pushes this->grad into parents

  void accumulate(const Tensor<T>& g) {
    if (grad.empty()) grad = Tensor<T>(value.dims());
    T* dst = grad.data();
    const T* src = g.data();
    const std::int64_t n = grad.size();
    for (std::int64_t i = 0; i < n; ++i) dst[i] += src[i];
  }

  Tensor<T>& grad_ref() {
    if (grad.empty()) grad = Tensor<T>(value.dims());
    return grad;
  }
};

template <class T>
class Var {
 public:
  Var() = default;
  explicit Var(std::shared_ptr<Node<T>> n) : n_(std::move(n)) {}

  static Var leaf(Tensor<T> v, bool requires_grad = false) {
    auto n = std::make_shared<Node<T>>();
    n->value = std::move(v);
    n->requires_grad = requires_grad;
    return Var(std::move(n));
  }

  bool valid() const { return n_ != nullptr; }
  Tensor<T>& value() { return n_->value; }
  const Tensor<T>& value() const { return n_->value; }
  Tensor<T>& grad() { return n_->grad_ref(); }
  bool requires_grad() const { return n_->requires_grad; }
  std::shared_ptr<Node<T>> node() const { return n_; }

  void zero_grad() {
    if (n_ && !n_->grad.empty()) n_->grad.fill(T(0));
  }

  /// Backpropagate from this (scalar) node.
  void backward() {
    if (n_->value.size() != 1)
      throw std::logic_error("backward() requires a scalar node");
    // Topological order by iterative DFS.
    std::vector<Node<T>*> order;
    std::unordered_set<Node<T>*> seen;
    std::vector<std::pair<Node<T>*, size_t>> stack;
    stack.emplace_back(n_.get(), 0);
    seen.insert(n_.get());
    while (!stack.empty()) {
      auto& [node, idx] = stack.back();
      if (idx < node->parents.size()) {
        Node<T>* p = node->parents[idx].get();
        ++idx;
        if (p->requires_grad && !seen.count(p)) {
          seen.insert(p);
          stack.emplace_back(p, 0);
        }
      } else {
        order.push_back(node);
        stack.pop_back();
      }
    }
    n_->grad_ref().fill(T(0));
    n_->grad[0] = T(1);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
      Node<T>* node = *it;
      if (node->backprop && !node->grad.empty()) node->backprop(*node);
    }
  }

 private:
  std::shared_ptr<Node<T>> n_;
};

namespace detail {

template <class T>
using EMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MapM = Eigen::Map<EMat<T>>;
template <class T>
using CMapM = Eigen::Map<const EMat<T>>;

template <class T>
std::shared_ptr<Node<T>> make_node(Tensor<T> value, std::vector<std::shared_ptr<Node<T>>> parents,
                                   std::function<void(Node<T>&)> backprop) {
  auto n = std::make_shared<Node<T>>();
  n->value = std::move(value);
  bool rg = false;
  for (auto& p : parents) rg = rg || p->requires_grad;
  n->requires_grad = rg;
  if (rg) {
    n->parents = std::move(parents);
    n->backprop = std::move(backprop);
  }
  return n;
}

inline void check(bool cond, const std::string& msg) {
  if (!cond) throw std::invalid_argument(msg);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise ops

template <class T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  detail::check(a.value().same_shape(b.value()), "add: shape mismatch");
  Tensor<T> out(a.value().dims());
  const std::int64_t n = out.size();
  for (std::int64_t i = 0; i < n; ++i) out[i] = a.value()[i] + b.value()[i];
  auto an = a.node(), bn = b.node();
  return Var<T>(detail::make_node<T>(std::move(out), {an, bn}, [an, bn](Node<T>& self) {
    if (an->requires_grad) an->accumulate(self.grad);
    if (bn->requires_grad) bn->accumulate(self.grad);
  }));
}

template <class T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  detail::check(a.value().same_shape(b.value()), "sub: shape mismatch");
  Tensor<T> out(a.value().dims());
  const std::int64_t n = out.size();
  for (std::int64_t i = 0; i < n; ++i) out[i] = a.value()[i] - b.value()[i];
  auto an = a.node(), bn = b.node();
  return Var<T>(detail::make_node<T>(std::move(out), {an, bn}, [an, bn](Node<T>& self) {
    if (an->requires_grad) an->accumulate(self.grad);
    if (bn->requires_grad) {
      Tensor<T>& g = bn->grad_ref();
      for (std::int64_t i = 0; i < self.grad.size(); ++i) g[i] -= self.grad[i];
    }
  }));
}

template <class T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  detail::check(a.value().same_shape(b.value()), "mul: shape mismatch");
  Tensor<T> out(a.value().dims());
  const std::int64_t n = out.size();
  for (std::int64_t i = 0; i < n; ++i) out[i] = a.value()[i] * b.value()[i];
  auto an = a.node(), bn = b.node();
  return Var<T>(detail::make_node<T>(std::move(out), {an, bn}, [an, bn](Node<T>& self) {
    if (an->requires_grad) {
      Tensor<T>& g = an->grad_ref();
      for (std::int64_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * bn->value[i];
    }
    if (bn->requires_grad) {
      Tensor<T>& g = bn->grad_ref();
      for (std::int64_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * an->value[i];
    }
  }));
}

template <class T>
Var<T> scale(const Var<T>& a, T s) {
  Tensor<T> out(a.value().dims());
  for (std::int64_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] * s;
  auto an = a.node();
  return Var<T>(detail::make_node<T>(std::move(out), {an}, [an, s](Node<T>& self) {
    Tensor<T>& g = an->grad_ref();
    for (std::int64_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * s;
  }));
}

template <class T>
Var<T> add_scalar(const Var<T>& a, T s) {
  Tensor<T> out(a.value().dims());
  for (std::int64_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] + s;
  auto an = a.node();
  return Var<T>(detail::make_node<T>(std::move(out), {an},
                                     [an](Node<T>& self) { an->accumulate(self.grad); }));
}

/// s - a (elementwise), used for |1 - <p_i, D>|.
template <class T>
Var<T> rsub_scalar(T s, const Var<T>& a) {
  Tensor<T> out(a.value().dims());
  for (std::int64_t i = 0; i < out.size(); ++i) out[i] = s - a.value()[i];
  auto an = a.node();
  return Var<T>(detail::make_node<T>(std::move(out), {an}, [an](Node<T>& self) {
    Tensor<T>& g = an->grad_ref();
    for (std::int64_t i = 0; i < self.grad.size(); ++i) g[i] -= self.grad[i];
  }));
}

template <class T>
Var<T> relu(const Var<T>& a) {
  Tensor<T> out(a.value().dims());
  for (std::int64_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] > T(0) ? a.value()[i] : T(0);
  auto an = a.node();
  return Var<T>(detail::make_node<T>(std::move(out), {an}, [an](Node<T>& self) {
    Tensor<T>& g = an->grad_ref();
    for (std::int64_t i = 0; i < self.grad.size(); ++i)
      if (an->value[i] > T(0)) g[i] += self.grad[i];
  }));
}

template <class T>
Var<T> sigmoid(const Var<T>& a) {
  Tensor<T> out(a.value().dims());
  for (std::int64_t i = 0; i < out.size(); ++i) out[i] = T(1) / (T(1) + std::exp(-a.value()[i]));
  auto an = a.node();
  auto on = detail::make_node<T>(std::move(out), {an}, nullptr);
  if (on->requires_grad) {
    on->backprop = [an](Node<T>& self) {
      Tensor<T>& g = an->grad_ref();
      for (std::int64_t i = 0; i < self.grad.size(); ++i) {
        const T y = self.value[i];
        g[i] += self.grad[i] * y * (T(1) - y);
      }
    };
  }
  return Var<T>(on);
}

/// |x| with true subgradient (0 at the kink).
template <class T>
Var<T> abs(const Var<T>& a) {
  Tensor<T> out(a.value().dims());
  for (std::int64_t i = 0; i < out.size(); ++i) out[i] = std::abs(a.value()[i]);
  auto an = a.node();
  return Var<T>(detail::make_node<T>(std::move(out), {an}, [an](Node<T>& self) {
    Tensor<T>& g = an->grad_ref();
    for (std::int64_t i = 0; i < self.grad.size(); ++i) {
      const T x = an->value[i];
      const T s = x > T(0) ? T(1) : (x < T(0) ? T(-1) : T(0));
      g[i] += self.grad[i] * s;
    }
  }));
}

// ---------------------------------------------------------------------------
// Reductions

template <class T>
Var<T> sum(const Var<T>& a) {
  T s = T(0);
  for (std::int64_t i = 0; i < a.value().size(); ++i) s += a.value()[i];
  Tensor<T> out({1});
  out[0] = s;
  auto an = a.node();
  return Var<T>(detail::make_node<T>(std::move(out), {an}, [an](Node<T>& self) {
    Tensor<T>& g = an->grad_ref();
    const T go = self.grad[0];
    for (std::int64_t i = 0; i < g.size(); ++i) g[i] += go;
  }));
}

/// Elementwise sum of n same-shaped tensors, accumulated in ascending value
/// order per element so the result is exactly invariant under permutation of
/// the inputs.
template <class T>
Var<T> add_n_symmetric(const std::vector<Var<T>>& xs) {
  detail::check(!xs.empty(), "add_n_symmetric: empty input");
  for (auto& x : xs) detail::check(x.value().same_shape(xs[0].value()), "add_n_symmetric: shape mismatch");
  Tensor<T> out(xs[0].value().dims());
  const size_t k = xs.size();
  std::vector<T> vals(k);
  for (std::int64_t i = 0; i < out.size(); ++i) {
    for (size_t j = 0; j < k; ++j) vals[j] = xs[j].value()[i];
    std::sort(vals.begin(), vals.end());
    T s = T(0);
    for (size_t j = 0; j < k; ++j) s += vals[j];
    out[i] = s;
  }
  std::vector<std::shared_ptr<Node<T>>> parents;
  for (auto& x : xs) parents.push_back(x.node());
  return Var<T>(detail::make_node<T>(std::move(out), std::move(parents), [](Node<T>& self) {
    for (auto& p : self.parents)
      if (p->requires_grad) p->accumulate(self.grad);
  }));
}

template <class T>
Var<T> mean(const Var<T>& a) {
  return scale(sum(a), T(1) / static_cast<T>(a.value().size()));
}

// ---------------------------------------------------------------------------
// Shape ops

template <class T>
Var<T> reshape(const Var<T>& a, std::vector<int> dims) {
  detail::check(Tensor<T>::count(dims) == a.value().size(), "reshape: element count mismatch");
  Tensor<T> out = Tensor<T>::from(std::move(dims), a.value().vec());
  auto an = a.node();
  return Var<T>(detail::make_node<T>(std::move(out), {an}, [an](Node<T>& self) {
    Tensor<T>& g = an->grad_ref();
    for (std::int64_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
  }));
}

template <class T>
Var<T> transpose(const Var<T>& a) {
  detail::check(a.value().rank() == 2, "transpose: expects 2D");
  const int m = a.value().dim(0), n = a.value().dim(1);
  Tensor<T> out({n, m});
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) out[static_cast<std::int64_t>(j) * m + i] = a.value()[static_cast<std::int64_t>(i) * n + j];
  auto an = a.node();
  return Var<T>(detail::make_node<T>(std::move(out), {an}, [an, m, n](Node<T>& self) {
    Tensor<T>& g = an->grad_ref();
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < n; ++j)
        g[static_cast<std::int64_t>(i) * n + j] += self.grad[static_cast<std::int64_t>(j) * m + i];
  }));
}

/// Columns [c0,c1) of a 2D tensor.
template <class T>
Var<T> slice_cols(const Var<T>& a, int c0, int c1) {
  detail::check(a.value().rank() == 2 && c0 >= 0 && c1 <= a.value().dim(1) && c0 < c1,
                "slice_cols: bad range");
  const int m = a.value().dim(0), n = a.value().dim(1), w = c1 - c0;
  Tensor<T> out({m, w});
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < w; ++j) out[static_cast<std::int64_t>(i) * w + j] = a.value()[static_cast<std::int64_t>(i) * n + c0 + j];
  auto an = a.node();
  return Var<T>(detail::make_node<T>(std::move(out), {an}, [an, m, n, w, c0](Node<T>& self) {
    Tensor<T>& g = an->grad_ref();
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < w; ++j)
        g[static_cast<std::int64_t>(i) * n + c0 + j] += self.grad[static_cast<std::int64_t>(i) * w + j];
  }));
}

template <class T>
Var<T> concat_cols(const std::vector<Var<T>>& parts) {
  detail::check(!parts.empty(), "concat_cols: empty");
  const int m = parts[0].value().dim(0);
  int n = 0;
  for (auto& p : parts) {
    detail::check(p.value().rank() == 2 && p.value().dim(0) == m, "concat_cols: shape mismatch");
    n += p.value().dim(1);
  }
  Tensor<T> out({m, n});
  std::vector<std::shared_ptr<Node<T>>> parents;
  std::vector<int> offs;
  int off = 0;
  for (auto& p : parts) {
    const int w = p.value().dim(1);
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < w; ++j)
        out[static_cast<std::int64_t>(i) * n + off + j] = p.value()[static_cast<std::int64_t>(i) * w + j];
    parents.push_back(p.node());
    offs.push_back(off);
    off += w;
  }
  return Var<T>(detail::make_node<T>(std::move(out), std::move(parents), [m, n, offs](Node<T>& self) {
    for (size_t k = 0; k < self.parents.size(); ++k) {
      auto& p = self.parents[k];
      if (!p->requires_grad) continue;
      const int w = p->value.dim(1);
      Tensor<T>& g = p->grad_ref();
      for (int i = 0; i < m; ++i)
        for (int j = 0; j < w; ++j)
          g[static_cast<std::int64_t>(i) * w + j] += self.grad[static_cast<std::int64_t>(i) * n + offs[k] + j];
    }
  }));
}

/// Channel concatenation of (C,H,W) tensors.
template <class T>
Var<T> concat_channels(const Var<T>& a, const Var<T>& b) {
  detail::check(a.value().rank() == 3 && b.value().rank() == 3 && a.value().dim(1) == b.value().dim(1) &&
                    a.value().dim(2) == b.value().dim(2),
                "concat_channels: spatial mismatch");
  const int ca = a.value().dim(0), cb = b.value().dim(0);
  const int h = a.value().dim(1), w = a.value().dim(2);
  Tensor<T> out({ca + cb, h, w});
  std::copy(a.value().data(), a.value().data() + a.value().size(), out.data());
  std::copy(b.value().data(), b.value().data() + b.value().size(), out.data() + a.value().size());
  auto an = a.node(), bn = b.node();
  return Var<T>(detail::make_node<T>(std::move(out), {an, bn}, [an, bn](Node<T>& self) {
    const std::int64_t na = an->value.size();
    if (an->requires_grad) {
      Tensor<T>& g = an->grad_ref();
      for (std::int64_t i = 0; i < na; ++i) g[i] += self.grad[i];
    }
    if (bn->requires_grad) {
      Tensor<T>& g = bn->grad_ref();
      for (std::int64_t i = 0; i < bn->value.size(); ++i) g[i] += self.grad[na + i];
    }
  }));
}

// ---------------------------------------------------------------------------
// Linear algebra

template <class T>
Var<T> matmul(const Var<T>& a, const Var<T>& b) {
  detail::check(a.value().rank() == 2 && b.value().rank() == 2 && a.value().dim(1) == b.value().dim(0),
                "matmul: incompatible shapes " + Tensor<T>::shape_str(a.value().dims()) + " x " +
                    Tensor<T>::shape_str(b.value().dims()));
  const int m = a.value().dim(0), k = a.value().dim(1), n = b.value().dim(1);
  Tensor<T> out({m, n});
  detail::CMapM<T> A(a.value().data(), m, k), B(b.value().data(), k, n);
  detail::MapM<T> C(out.data(), m, n);
  C.noalias() = A * B;
  auto an = a.node(), bn = b.node();
  return Var<T>(detail::make_node<T>(std::move(out), {an, bn}, [an, bn, m, k, n](Node<T>& self) {
    detail::CMapM<T> G(self.grad.data(), m, n);
    if (an->requires_grad) {
      detail::CMapM<T> B(bn->value.data(), k, n);
      detail::MapM<T> GA(an->grad_ref().data(), m, k);
      GA.noalias() += G * B.transpose();
    }
    if (bn->requires_grad) {
      detail::CMapM<T> A(an->value.data(), m, k);
      detail::MapM<T> GB(bn->grad_ref().data(), k, n);
      GB.noalias() += A.transpose() * G;
    }
  }));
}

/// x[n,din] * W[din,dout] + b[dout]
template <class T>
Var<T> linear(const Var<T>& x, const Var<T>& w, const Var<T>& b) {
  Var<T> y = matmul(x, w);
  detail::check(b.value().rank() == 1 && b.value().dim(0) == y.value().dim(1), "linear: bad bias");
  const int m = y.value().dim(0), n = y.value().dim(1);
  Tensor<T> out(y.value().dims());
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j)
      out[static_cast<std::int64_t>(i) * n + j] = y.value()[static_cast<std::int64_t>(i) * n + j] + b.value()[j];
  auto yn = y.node(), bn = b.node();
  return Var<T>(detail::make_node<T>(std::move(out), {yn, bn}, [yn, bn, m, n](Node<T>& self) {
    if (yn->requires_grad) yn->accumulate(self.grad);
    if (bn->requires_grad) {
      Tensor<T>& g = bn->grad_ref();
      for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) g[j] += self.grad[static_cast<std::int64_t>(i) * n + j];
    }
  }));
}

/// Row-wise softmax of a 2D tensor.
template <class T>
Var<T> softmax_rows(const Var<T>& a) {
  detail::check(a.value().rank() == 2, "softmax_rows: expects 2D");
  const int m = a.value().dim(0), n = a.value().dim(1);
  Tensor<T> out({m, n});
  for (int i = 0; i < m; ++i) {
    const T* row = a.value().data() + static_cast<std::int64_t>(i) * n;
    T* orow = out.data() + static_cast<std::int64_t>(i) * n;
    T mx = row[0];
    for (int j = 1; j < n; ++j) mx = std::max(mx, row[j]);
    T z = T(0);
    for (int j = 0; j < n; ++j) {
      orow[j] = std::exp(row[j] - mx);
      z += orow[j];
    }
    for (int j = 0; j < n; ++j) orow[j] /= z;
  }
  auto an = a.node();
  auto node = detail::make_node<T>(std::move(out), {an}, nullptr);
  if (node->requires_grad) {
    node->backprop = [an, m, n](Node<T>& self) {
      Tensor<T>& g = an->grad_ref();
      for (int i = 0; i < m; ++i) {
        const T* y = self.value.data() + static_cast<std::int64_t>(i) * n;
        const T* gy = self.grad.data() + static_cast<std::int64_t>(i) * n;
        T dot = T(0);
        for (int j = 0; j < n; ++j) dot += gy[j] * y[j];
        T* gx = g.data() + static_cast<std::int64_t>(i) * n;
        for (int j = 0; j < n; ++j) gx[j] += (gy[j] - dot) * y[j];
      }
    };
  }
  return Var<T>(node);
}

/// LayerNorm over the last dim of x[n,d] with affine gamma/beta[d].
template <class T>
Var<T> layer_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, T eps = T(1e-5)) {
  detail::check(x.value().rank() == 2, "layer_norm: expects 2D");
  const int m = x.value().dim(0), d = x.value().dim(1);
  detail::check(gamma.value().size() == d && beta.value().size() == d, "layer_norm: affine size");
  Tensor<T> out({m, d});
  Tensor<T> xhat({m, d});
  std::vector<T> inv_std(static_cast<size_t>(m));
  for (int i = 0; i < m; ++i) {
    const T* row = x.value().data() + static_cast<std::int64_t>(i) * d;
    T mu = T(0);
    for (int j = 0; j < d; ++j) mu += row[j];
    mu /= static_cast<T>(d);
    T var = T(0);
    for (int j = 0; j < d; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= static_cast<T>(d);
    const T is = T(1) / std::sqrt(var + eps);
    inv_std[static_cast<size_t>(i)] = is;
    for (int j = 0; j < d; ++j) {
      const T xh = (row[j] - mu) * is;
      xhat[static_cast<std::int64_t>(i) * d + j] = xh;
      out[static_cast<std::int64_t>(i) * d + j] = xh * gamma.value()[j] + beta.value()[j];
    }
  }
  auto xn = x.node(), gn = gamma.node(), bn = beta.node();
  auto xhat_p = std::make_shared<Tensor<T>>(std::move(xhat));
  auto istd_p = std::make_shared<std::vector<T>>(std::move(inv_std));
  return Var<T>(detail::make_node<T>(std::move(out), {xn, gn, bn},
                                     [xn, gn, bn, m, d, xhat_p, istd_p](Node<T>& self) {
    const Tensor<T>& xh = *xhat_p;
    for (int i = 0; i < m; ++i) {
      const T* gy = self.grad.data() + static_cast<std::int64_t>(i) * d;
      const T* xr = xh.data() + static_cast<std::int64_t>(i) * d;
      if (gn->requires_grad) {
        Tensor<T>& gg = gn->grad_ref();
        for (int j = 0; j < d; ++j) gg[j] += gy[j] * xr[j];
      }
      if (bn->requires_grad) {
        Tensor<T>& gb = bn->grad_ref();
        for (int j = 0; j < d; ++j) gb[j] += gy[j];
      }
      if (xn->requires_grad) {
        // dxhat = gy * gamma; dx = (dxhat - mean(dxhat) - xhat*mean(dxhat*xhat)) * inv_std
        T m1 = T(0), m2 = T(0);
        for (int j = 0; j < d; ++j) {
          const T dxh = gy[j] * gn->value[j];
          m1 += dxh;
          m2 += dxh * xr[j];
        }
        m1 /= static_cast<T>(d);
        m2 /= static_cast<T>(d);
        Tensor<T>& gx = xn->grad_ref();
        const T is = (*istd_p)[static_cast<size_t>(i)];
        for (int j = 0; j < d; ++j) {
          const T dxh = gy[j] * gn->value[j];
          gx[static_cast<std::int64_t>(i) * d + j] += (dxh - m1 - xr[j] * m2) * is;
        }
      }
    }
  }));
}

// ---------------------------------------------------------------------------
// Spatial ops

namespace detail {

template <class T>
void im2col(const Tensor<T>& x, int k, int stride, int pad, int ho, int wo, T* cols) {
  const int c = x.dim(0), h = x.dim(1), w = x.dim(2);
  // cols layout: [c*k*k, ho*wo]
  const std::int64_t area = static_cast<std::int64_t>(ho) * wo;
  for (int ch = 0; ch < c; ++ch) {
    for (int ky = 0; ky < k; ++ky) {
      for (int kx = 0; kx < k; ++kx) {
        T* dst = cols + ((static_cast<std::int64_t>(ch) * k + ky) * k + kx) * area;
        for (int oy = 0; oy < ho; ++oy) {
          const int iy = oy * stride + ky - pad;
          if (iy < 0 || iy >= h) {
            std::fill(dst + static_cast<std::int64_t>(oy) * wo, dst + static_cast<std::int64_t>(oy + 1) * wo, T(0));
            continue;
          }
          const T* src = x.data() + (static_cast<std::int64_t>(ch) * h + iy) * w;
          for (int ox = 0; ox < wo; ++ox) {
            const int ix = ox * stride + kx - pad;
            dst[static_cast<std::int64_t>(oy) * wo + ox] = (ix >= 0 && ix < w) ? src[ix] : T(0);
          }
        }
      }
    }
  }
}

template <class T>
void col2im_add(const T* cols, int c, int h, int w, int k, int stride, int pad, int ho, int wo,
                Tensor<T>& gx) {
  const std::int64_t area = static_cast<std::int64_t>(ho) * wo;
  for (int ch = 0; ch < c; ++ch) {
    for (int ky = 0; ky < k; ++ky) {
      for (int kx = 0; kx < k; ++kx) {
        const T* src = cols + ((static_cast<std::int64_t>(ch) * k + ky) * k + kx) * area;
        for (int oy = 0; oy < ho; ++oy) {
          const int iy = oy * stride + ky - pad;
          if (iy < 0 || iy >= h) continue;
          T* dst = gx.data() + (static_cast<std::int64_t>(ch) * h + iy) * w;
          for (int ox = 0; ox < wo; ++ox) {
            const int ix = ox * stride + kx - pad;
            if (ix >= 0 && ix < w) dst[ix] += src[static_cast<std::int64_t>(oy) * wo + ox];
          }
        }
      }
    }
  }
}

}  // namespace detail

/// 2D convolution: x(Cin,H,W), w(Cout,Cin,k,k), b(Cout). im2col + GEMM; the
/// column buffer is recomputed in the backward pass instead of stored.
template <class T>
Var<T> conv2d(const Var<T>& x, const Var<T>& w, const Var<T>& b, int stride = 1, int pad = 0) {
  detail::check(x.value().rank() == 3 && w.value().rank() == 4, "conv2d: bad ranks");
  const int cin = x.value().dim(0), h = x.value().dim(1), wd = x.value().dim(2);
  const int cout = w.value().dim(0), k = w.value().dim(2);
  detail::check(w.value().dim(1) == cin && w.value().dim(3) == k, "conv2d: kernel mismatch");
  detail::check(b.value().size() == cout, "conv2d: bias mismatch");
  // Floor output size (framework convention); right/bottom leftovers are
  // simply not visited.
  const int ho = (h + 2 * pad - k) / stride + 1;
  const int wo = (wd + 2 * pad - k) / stride + 1;
  detail::check(h + 2 * pad >= k && wd + 2 * pad >= k, "conv2d: input " +
                    Tensor<T>::shape_str(x.value().dims()) + " smaller than the kernel");
  const std::int64_t ck2 = static_cast<std::int64_t>(cin) * k * k;
  const std::int64_t area = static_cast<std::int64_t>(ho) * wo;
  std::vector<T> cols(static_cast<size_t>(ck2 * area));
  detail::im2col(x.value(), k, stride, pad, ho, wo, cols.data());
  Tensor<T> out({cout, ho, wo});
  detail::CMapM<T> W(w.value().data(), cout, ck2), C(cols.data(), ck2, area);
  detail::MapM<T> Y(out.data(), cout, area);
  Y.noalias() = W * C;
  for (int oc = 0; oc < cout; ++oc) {
    T* row = out.data() + static_cast<std::int64_t>(oc) * area;
    const T bias = b.value()[oc];
    for (std::int64_t i = 0; i < area; ++i) row[i] += bias;
  }
  auto xn = x.node(), wn = w.node(), bn = b.node();
  return Var<T>(detail::make_node<T>(
      std::move(out), {xn, wn, bn},
      [xn, wn, bn, cin, h, wd, cout, k, stride, pad, ho, wo, ck2, area](Node<T>& self) {
        detail::CMapM<T> G(self.grad.data(), cout, area);
        if (bn->requires_grad) {
          Tensor<T>& gb = bn->grad_ref();
          for (int oc = 0; oc < cout; ++oc) {
            const T* row = self.grad.data() + static_cast<std::int64_t>(oc) * area;
            T s = T(0);
            for (std::int64_t i = 0; i < area; ++i) s += row[i];
            gb[oc] += s;
          }
        }
        if (wn->requires_grad) {
          std::vector<T> cols(static_cast<size_t>(ck2 * area));
          detail::im2col(xn->value, k, stride, pad, ho, wo, cols.data());
          detail::CMapM<T> C(cols.data(), ck2, area);
          detail::MapM<T> GW(wn->grad_ref().data(), cout, ck2);
          GW.noalias() += G * C.transpose();
        }
        if (xn->requires_grad) {
          std::vector<T> gcols(static_cast<size_t>(ck2 * area));
          detail::CMapM<T> W(wn->value.data(), cout, ck2);
          detail::MapM<T> GC(gcols.data(), ck2, area);
          GC.noalias() = W.transpose() * G;
          detail::col2im_add(gcols.data(), cin, h, wd, k, stride, pad, ho, wo, xn->grad_ref());
        }
      }));
}

template <class T>
Var<T> max_pool2(const Var<T>& x) {
  detail::check(x.value().rank() == 3 && x.value().dim(1) % 2 == 0 && x.value().dim(2) % 2 == 0,
                "max_pool2: odd spatial size");
  const int c = x.value().dim(0), h = x.value().dim(1), w = x.value().dim(2);
  const int ho = h / 2, wo = w / 2;
  Tensor<T> out({c, ho, wo});
  auto arg = std::make_shared<std::vector<std::int64_t>>(static_cast<size_t>(out.size()));
  std::int64_t oi = 0;
  for (int ch = 0; ch < c; ++ch)
    for (int oy = 0; oy < ho; ++oy)
      for (int ox = 0; ox < wo; ++ox, ++oi) {
        T best = -std::numeric_limits<T>::infinity();
        std::int64_t bi = 0;
        for (int dy = 0; dy < 2; ++dy)
          for (int dx = 0; dx < 2; ++dx) {
            const std::int64_t idx = (static_cast<std::int64_t>(ch) * h + oy * 2 + dy) * w + ox * 2 + dx;
            if (x.value()[idx] > best) {
              best = x.value()[idx];
              bi = idx;
            }
          }
        out[oi] = best;
        (*arg)[static_cast<size_t>(oi)] = bi;
      }
  auto xn = x.node();
  return Var<T>(detail::make_node<T>(std::move(out), {xn}, [xn, arg](Node<T>& self) {
    Tensor<T>& g = xn->grad_ref();
    for (std::int64_t i = 0; i < self.grad.size(); ++i) g[(*arg)[static_cast<size_t>(i)]] += self.grad[i];
  }));
}

/// Bilinear resize of (C,H,W) to (C,ho,wo); half-pixel center mapping.
template <class T>
Var<T> upsample_bilinear(const Var<T>& x, int ho, int wo) {
  detail::check(x.value().rank() == 3, "upsample_bilinear: expects (C,H,W)");
  const int c = x.value().dim(0), h = x.value().dim(1), w = x.value().dim(2);
  struct Tap {
    int i0, i1;
    T w0, w1;
  };
  auto make_taps = [](int in, int out) {
    std::vector<Tap> taps(static_cast<size_t>(out));
    const T s = static_cast<T>(in) / static_cast<T>(out);
    for (int o = 0; o < out; ++o) {
      T src = (static_cast<T>(o) + T(0.5)) * s - T(0.5);
      if (src < T(0)) src = T(0);
      if (src > static_cast<T>(in - 1)) src = static_cast<T>(in - 1);
      const int i0 = static_cast<int>(std::floor(src));
      const int i1 = std::min(i0 + 1, in - 1);
      const T f = src - static_cast<T>(i0);
      taps[static_cast<size_t>(o)] = {i0, i1, T(1) - f, f};
    }
    return taps;
  };
  auto ty = std::make_shared<std::vector<Tap>>(make_taps(h, ho));
  auto tx = std::make_shared<std::vector<Tap>>(make_taps(w, wo));
  Tensor<T> out({c, ho, wo});
  for (int ch = 0; ch < c; ++ch) {
    const T* src = x.value().data() + static_cast<std::int64_t>(ch) * h * w;
    T* dst = out.data() + static_cast<std::int64_t>(ch) * ho * wo;
    for (int oy = 0; oy < ho; ++oy) {
      const Tap& y = (*ty)[static_cast<size_t>(oy)];
      for (int ox = 0; ox < wo; ++ox) {
        const Tap& xk = (*tx)[static_cast<size_t>(ox)];
        dst[static_cast<std::int64_t>(oy) * wo + ox] =
            y.w0 * (xk.w0 * src[static_cast<std::int64_t>(y.i0) * w + xk.i0] + xk.w1 * src[static_cast<std::int64_t>(y.i0) * w + xk.i1]) +
            y.w1 * (xk.w0 * src[static_cast<std::int64_t>(y.i1) * w + xk.i0] + xk.w1 * src[static_cast<std::int64_t>(y.i1) * w + xk.i1]);
      }
    }
  }
  auto xn = x.node();
  return Var<T>(detail::make_node<T>(std::move(out), {xn}, [xn, c, h, w, ho, wo, ty, tx](Node<T>& self) {
    Tensor<T>& g = xn->grad_ref();
    for (int ch = 0; ch < c; ++ch) {
      T* gsrc = g.data() + static_cast<std::int64_t>(ch) * h * w;
      const T* gdst = self.grad.data() + static_cast<std::int64_t>(ch) * ho * wo;
      for (int oy = 0; oy < ho; ++oy) {
        const Tap& y = (*ty)[static_cast<size_t>(oy)];
        for (int ox = 0; ox < wo; ++ox) {
          const Tap& xk = (*tx)[static_cast<size_t>(ox)];
          const T go = gdst[static_cast<std::int64_t>(oy) * wo + ox];
          gsrc[static_cast<std::int64_t>(y.i0) * w + xk.i0] += go * y.w0 * xk.w0;
          gsrc[static_cast<std::int64_t>(y.i0) * w + xk.i1] += go * y.w0 * xk.w1;
          gsrc[static_cast<std::int64_t>(y.i1) * w + xk.i0] += go * y.w1 * xk.w0;
          gsrc[static_cast<std::int64_t>(y.i1) * w + xk.i1] += go * y.w1 * xk.w1;
        }
      }
    }
  }));
}

template <class T>
Var<T> operator+(const Var<T>& a, const Var<T>& b) { return add(a, b); }
template <class T>
Var<T> operator-(const Var<T>& a, const Var<T>& b) { return sub(a, b); }
template <class T>
Var<T> operator*(const Var<T>& a, const Var<T>& b) { return mul(a, b); }

}  // namespace brokercc
