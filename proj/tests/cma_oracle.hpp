#pragma once

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "brokercc/bmg.hpp"

namespace brokercc::testing {

template <class T>
Var<T> find_param(const BrokerGenerator<T>& gen, const std::string& name) {
  for (const auto& p : gen.params().params())
    if (p.name == name) return p.var;
  throw std::runtime_error("missing parameter " + name);
}

/// Fully independent recomputation of the CMA token path from raw weights:
/// patchify conv, per-head scaled dot-product attention (aux queries, RGB
/// keys/values), aux residual, FFN residual.
inline std::vector<std::vector<double>> brute_force_cma(const BrokerGenerator<double>& gen,
                                                        const Tensor<double>& rgb,
                                                        const Tensor<double>& aux) {
  const BmgConfig& cfg = gen.config();
  const int d = cfg.bottleneck_channels, g = cfg.cma_patch_grid, ps = cfg.cma_patch_size;
  const int n_tok = g * g, heads = cfg.cma_heads, dh = d / heads;

  const Tensor<double>& pw = find_param(gen, "bmg.cma.patch.w").value();  // (d,3,ps,ps)
  const Tensor<double>& pb = find_param(gen, "bmg.cma.patch.b").value();
  auto patchify = [&](const Tensor<double>& img) {
    std::vector<std::vector<double>> tok(n_tok, std::vector<double>(d));
    for (int py = 0; py < g; ++py)
      for (int px = 0; px < g; ++px)
        for (int oc = 0; oc < d; ++oc) {
          double s = pb[oc];
          for (int c = 0; c < 3; ++c)
            for (int ky = 0; ky < ps; ++ky)
              for (int kx = 0; kx < ps; ++kx)
                s += pw[((static_cast<std::int64_t>(oc) * 3 + c) * ps + ky) * ps + kx] *
                     img[(static_cast<std::int64_t>(c) * (g * ps) + py * ps + ky) * (g * ps) + px * ps + kx];
          tok[py * g + px][oc] = s;
        }
    return tok;
  };
  auto apply_linear = [&](const std::vector<std::vector<double>>& x, const std::string& name) {
    const Tensor<double>& w = find_param(gen, name + ".w").value();  // (din,dout)
    const Tensor<double>& b = find_param(gen, name + ".b").value();
    const int din = w.dim(0), dout = w.dim(1);
    std::vector<std::vector<double>> y(x.size(), std::vector<double>(dout));
    for (size_t i = 0; i < x.size(); ++i)
      for (int j = 0; j < dout; ++j) {
        double s = b[j];
        for (int k = 0; k < din; ++k) s += x[i][k] * w[k * dout + j];
        y[i][j] = s;
      }
    return y;
  };

  const auto x_r = patchify(rgb);
  const auto x_t = patchify(aux);
  const auto q = apply_linear(x_t, "bmg.cma.attn.wq");
  const auto k = apply_linear(x_r, "bmg.cma.attn.wk");
  const auto v = apply_linear(x_r, "bmg.cma.attn.wv");

  std::vector<std::vector<double>> heads_out(n_tok, std::vector<double>(d));
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
  for (int h = 0; h < heads; ++h)
    for (int i = 0; i < n_tok; ++i) {
      std::vector<double> logits(n_tok);
      double mx = -1e300;
      for (int j = 0; j < n_tok; ++j) {
        double s = 0.0;
        for (int c = 0; c < dh; ++c) s += q[i][h * dh + c] * k[j][h * dh + c];
        logits[j] = s * inv_sqrt;
        mx = std::max(mx, logits[j]);
      }
      double z = 0.0;
      for (double& l : logits) {
        l = std::exp(l - mx);
        z += l;
      }
      for (int c = 0; c < dh; ++c) {
        double s = 0.0;
        for (int j = 0; j < n_tok; ++j) s += (logits[j] / z) * v[j][h * dh + c];
        heads_out[i][h * dh + c] = s;
      }
    }
  auto hmat = apply_linear(heads_out, "bmg.cma.attn.wo");
  for (int i = 0; i < n_tok; ++i)
    for (int c = 0; c < d; ++c) hmat[i][c] += x_t[i][c];  // aux residual

  auto f1 = apply_linear(hmat, "bmg.cma.ffn.fc1");
  for (auto& row : f1)
    for (double& vv : row) vv = std::max(0.0, vv);
  auto f2 = apply_linear(f1, "bmg.cma.ffn.fc2");
  for (int i = 0; i < n_tok; ++i)
    for (int c = 0; c < d; ++c) f2[i][c] += hmat[i][c];  // FFN residual
  return f2;
}

}  // namespace brokercc::testing
