#pragma once

#include <cmath>
#include <random>
#include <string>
#include <vector>

#include "brokercc/graph.hpp"

namespace brokercc {

/// Seeded RNG used for weight init, synthesis and augmentation. All draws go
/// through this wrapper so trajectories are reproducible for a fixed seed.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : eng_(seed) {}

  double uniform(double a, double b) {
    std::uniform_real_distribution<double> d(a, b);
    return d(eng_);
  }
  double normal(double mu, double sd) {
    std::normal_distribution<double> d(mu, sd);
    return d(eng_);
  }
  int uniform_int(int lo, int hi) {  // inclusive
    std::uniform_int_distribution<int> d(lo, hi);
    return d(eng_);
  }
  bool coin() { return uniform_int(0, 1) == 1; }
  std::uint64_t raw() { return eng_(); }
  std::mt19937_64& engine() { return eng_; }

 private:
  std::mt19937_64 eng_;
};

template <class T>
struct NamedParam {
  std::string name;
  Var<T> var;
};

/// Flat registry of learnable tensors; modules append to it at construction.
template <class T>
class ParamRegistry {
 public:
  Var<T> add(const std::string& name, Tensor<T> init) {
    Var<T> v = Var<T>::leaf(std::move(init), true);
    params_.push_back({name, v});
    return v;
  }
  const std::vector<NamedParam<T>>& params() const { return params_; }
  std::vector<NamedParam<T>>& params() { return params_; }

  std::int64_t count() const {
    std::int64_t n = 0;
    for (auto& p : params_) n += p.var.value().size();
    return n;
  }
  void zero_grad() {
    for (auto& p : params_) p.var.zero_grad();
  }

 private:
  std::vector<NamedParam<T>> params_;
};

namespace init {

/// Kaiming-uniform fan-in init (PyTorch conv/linear default).
template <class T>
Tensor<T> kaiming(std::vector<int> dims, int fan_in, Rng& rng) {
  Tensor<T> t(std::move(dims));
  const double bound = std::sqrt(1.0 / static_cast<double>(fan_in));
  for (std::int64_t i = 0; i < t.size(); ++i) t[i] = static_cast<T>(rng.uniform(-bound, bound));
  return t;
}

template <class T>
Tensor<T> zeros(std::vector<int> dims) {
  return Tensor<T>(std::move(dims));
}

}  // namespace init

template <class T>
struct Conv2dLayer {
  int cin = 0, cout = 0, k = 3, stride = 1, pad = 1;
  Var<T> w, b;

  Conv2dLayer() = default;
  Conv2dLayer(ParamRegistry<T>& reg, const std::string& name, int cin_, int cout_, int k_,
              int stride_, int pad_, Rng& rng)
      : cin(cin_), cout(cout_), k(k_), stride(stride_), pad(pad_) {
    const int fan_in = cin * k * k;
    w = reg.add(name + ".w", init::kaiming<T>({cout, cin, k, k}, fan_in, rng));
    b = reg.add(name + ".b", init::kaiming<T>({cout}, fan_in, rng));
  }

  Var<T> operator()(const Var<T>& x) const { return conv2d(x, w, b, stride, pad); }
};

template <class T>
struct LinearLayer {
  int din = 0, dout = 0;
  Var<T> w, b;

  LinearLayer() = default;
  LinearLayer(ParamRegistry<T>& reg, const std::string& name, int din_, int dout_, Rng& rng)
      : din(din_), dout(dout_) {
    w = reg.add(name + ".w", init::kaiming<T>({din, dout}, din, rng));
    b = reg.add(name + ".b", init::kaiming<T>({dout}, din, rng));
  }

  Var<T> operator()(const Var<T>& x) const { return linear(x, w, b); }
};

template <class T>
struct LayerNormLayer {
  int d = 0;
  Var<T> gamma, beta;

  LayerNormLayer() = default;
  LayerNormLayer(ParamRegistry<T>& reg, const std::string& name, int d_) : d(d_) {
    Tensor<T> g({d});
    g.fill(T(1));
    gamma = reg.add(name + ".gamma", std::move(g));
    beta = reg.add(name + ".beta", init::zeros<T>({d}));
  }

  Var<T> operator()(const Var<T>& x) const { return layer_norm(x, gamma, beta); }
};

/// Multi-head attention core: Att(Q,K,V) with per-head scaled dot product
/// (scale 1/sqrt(d_head)) followed by an output projection.
template <class T>
struct MultiHeadAttention {
  int d = 0, heads = 1;
  LinearLayer<T> wq, wk, wv, wo;

  MultiHeadAttention() = default;
  MultiHeadAttention(ParamRegistry<T>& reg, const std::string& name, int d_, int heads_, Rng& rng)
      : d(d_), heads(heads_) {
    if (d % heads != 0) throw std::invalid_argument("attention: d must divide by heads");
    wq = LinearLayer<T>(reg, name + ".wq", d, d, rng);
    wk = LinearLayer<T>(reg, name + ".wk", d, d, rng);
    wv = LinearLayer<T>(reg, name + ".wv", d, d, rng);
    wo = LinearLayer<T>(reg, name + ".wo", d, d, rng);
  }

  /// query_src supplies Q; kv_src supplies K and V. Both are (N,d).
  Var<T> operator()(const Var<T>& query_src, const Var<T>& kv_src) const {
    const Var<T> q = wq(query_src), k = wk(kv_src), v = wv(kv_src);
    const int dh = d / heads;
    const T inv_sqrt = T(1) / std::sqrt(static_cast<T>(dh));
    std::vector<Var<T>> outs;
    outs.reserve(static_cast<size_t>(heads));
    for (int h = 0; h < heads; ++h) {
      Var<T> qh = slice_cols(q, h * dh, (h + 1) * dh);
      Var<T> kh = slice_cols(k, h * dh, (h + 1) * dh);
      Var<T> vh = slice_cols(v, h * dh, (h + 1) * dh);
      Var<T> att = softmax_rows(scale(matmul(qh, transpose(kh)), inv_sqrt));
      outs.push_back(matmul(att, vh));
    }
    return wo(concat_cols(outs));
  }
};

/// Two-layer feedforward block (d -> hidden -> d) with ReLU.
template <class T>
struct FeedForward {
  LinearLayer<T> fc1, fc2;

  FeedForward() = default;
  FeedForward(ParamRegistry<T>& reg, const std::string& name, int d, int hidden, Rng& rng) {
    fc1 = LinearLayer<T>(reg, name + ".fc1", d, hidden, rng);
    fc2 = LinearLayer<T>(reg, name + ".fc2", hidden, d, rng);
  }

  Var<T> operator()(const Var<T>& x) const { return fc2(relu(fc1(x))); }
};

/// Adam with decoupled-from-nothing L2 weight decay added to the gradient
/// (the classic formulation).
template <class T>
class Adam {
 public:
  Adam(std::vector<NamedParam<T>> params, double lr, double weight_decay, double beta1 = 0.9,
       double beta2 = 0.999, double eps = 1e-8)
      : params_(std::move(params)), lr_(lr), wd_(weight_decay), b1_(beta1), b2_(beta2), eps_(eps) {
    for (auto& p : params_) {
      m_.emplace_back(p.var.value().dims());
      v_.emplace_back(p.var.value().dims());
    }
  }

  void step() {
    ++t_;
    const double bc1 = 1.0 - std::pow(b1_, t_);
    const double bc2 = 1.0 - std::pow(b2_, t_);
    for (size_t pi = 0; pi < params_.size(); ++pi) {
      Tensor<T>& w = params_[pi].var.value();
      Tensor<T>& g = params_[pi].var.grad();
      Tensor<T>& m = m_[pi];
      Tensor<T>& v = v_[pi];
      for (std::int64_t i = 0; i < w.size(); ++i) {
        const double gi = static_cast<double>(g[i]) + wd_ * static_cast<double>(w[i]);
        m[i] = static_cast<T>(b1_ * m[i] + (1.0 - b1_) * gi);
        v[i] = static_cast<T>(b2_ * v[i] + (1.0 - b2_) * gi * gi);
        const double mhat = m[i] / bc1;
        const double vhat = v[i] / bc2;
        w[i] = static_cast<T>(w[i] - lr_ * mhat / (std::sqrt(vhat) + eps_));
      }
    }
  }

  void zero_grad() {
    for (auto& p : params_) p.var.zero_grad();
  }

 private:
  std::vector<NamedParam<T>> params_;
  std::vector<Tensor<T>> m_, v_;
  double lr_, wd_, b1_, b2_, eps_;
  long t_ = 0;
};

}  // namespace brokercc
