#pragma once

#include <cmath>
#include <functional>
#include <vector>

#include "brokercc/graph.hpp"
#include "brokercc/image.hpp"
#include "brokercc/nn.hpp"

namespace brokercc::testing {

inline Tensor<double> random_tensor(std::vector<int> dims, Rng& rng, double lo = -1.0,
                                    double hi = 1.0) {
  Tensor<double> t(std::move(dims));
  for (std::int64_t i = 0; i < t.size(); ++i) t[i] = rng.uniform(lo, hi);
  return t;
}

/// Central finite differences against the analytic gradient of `x` for the
/// scalar loss produced by `build` (the graph is eager, so the whole loss is
/// rebuilt per perturbation). Returns the worst relative error over up to
/// `samples` coordinates.
inline double grad_check(const std::function<Var<double>()>& build, Var<double> x, Rng& rng,
                         int samples = 12, double eps = 1e-5) {
  x.zero_grad();
  Var<double> loss = build();
  loss.backward();
  Tensor<double> g = x.grad();  // copy before perturbations

  double worst = 0.0;
  const std::int64_t n = x.value().size();
  for (int s = 0; s < samples; ++s) {
    const std::int64_t i = n <= samples ? s % n : rng.uniform_int(0, static_cast<int>(n - 1));
    const double orig = x.value()[i];
    x.value()[i] = orig + eps;
    const double up = build().value()[0];
    x.value()[i] = orig - eps;
    const double dn = build().value()[0];
    x.value()[i] = orig;
    const double fd = (up - dn) / (2.0 * eps);
    const double denom = std::max({1e-6, std::abs(fd), std::abs(g[i])});
    worst = std::max(worst, std::abs(fd - g[i]) / denom);
  }
  return worst;
}

/// Deterministic test image with smooth structure in [0,1].
inline ModalImage pattern_image(int h, int w, Modality tag, double phase = 0.0) {
  ModalImage im(h, w, tag);
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x)
        im.at(c, y, x) = static_cast<float>(
            0.5 + 0.45 * std::sin(0.31 * x + 0.17 * y + 1.1 * c + phase));
  return im;
}

}  // namespace brokercc::testing
