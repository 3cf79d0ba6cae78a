#pragma once

#include <cmath>
#include <vector>

#include "brokercc/graph.hpp"
#include "brokercc/image.hpp"

namespace brokercc {

/// Per-annotation posterior grids p_i over the density grid; for every pixel
/// the p_i sum to one (when m >= 1). Stored row-major as (m, h, w).
struct PosteriorMap {
  int m = 0, h = 0, w = 0;
  std::vector<double> p;
  double sigma = 0.0;  // input-resolution pixels

  double at(int i, int y, int x) const {
    return p[(static_cast<size_t>(i) * h + y) * w + x];
  }
};

/// Normalized Gaussian posteriors of the annotations on an (h,w) density
/// grid. `scale` is density-grid units per input pixel (1/stride); sigma is
/// given in input pixels. Numerically stabilized by per-pixel max
/// subtraction. m = 0 yields a defined empty map.
PosteriorMap build_posteriors(const PointAnnotationSet& ann, int h, int w, double scale, double sigma);

/// Bayesian counting loss: sum_i |1 - <p_i, D>|; for an empty annotation set
/// the total predicted mass is returned instead.
double bayesian_loss(const DensityMap& density, const PosteriorMap& post);

struct DistillLossValue {
  double raw_sum = 0.0;
  double per_pixel_mean = 0.0;
};

/// Squared-error distillation loss between student and teacher broker images.
DistillLossValue distill_loss(const ModalImage& student, const ModalImage& teacher);

// Graph-building variants used by the training loops. ---------------------

template <class T>
Var<T> bayesian_loss_graph(const Var<T>& density, const PosteriorMap& post) {
  const Tensor<T>& dv = density.value();
  if (dv.rank() != 3 || dv.dim(0) != 1 || dv.dim(1) != post.h || dv.dim(2) != post.w)
    throw std::invalid_argument("bayesian_loss: density/posterior shape mismatch");
  if (post.m == 0) return sum(density);
  const std::int64_t hw = static_cast<std::int64_t>(post.h) * post.w;
  std::vector<T> pdata(post.p.size());
  for (size_t i = 0; i < post.p.size(); ++i) pdata[i] = static_cast<T>(post.p[i]);
  Var<T> P = Var<T>::leaf(Tensor<T>::from({post.m, static_cast<int>(hw)}, std::move(pdata)));
  Var<T> d_col = reshape(density, {static_cast<int>(hw), 1});
  Var<T> expected = matmul(P, d_col);                       // (m,1): <p_i, D>
  return sum(abs(rsub_scalar(T(1), expected)));
}

/// Raw sum of squared pixel differences (teacher held constant).
template <class T>
Var<T> distill_loss_graph(const Var<T>& student, const ModalImage& teacher) {
  Var<T> t = Var<T>::leaf(teacher.template to_tensor<T>());
  if (!student.value().same_shape(t.value()))
    throw std::invalid_argument("distill_loss: shape mismatch");
  Var<T> d = student - t;
  return sum(d * d);
}

}  // namespace brokercc
