#include "brokercc/losses.hpp"

#include "brokercc/error.hpp"

namespace brokercc {

PosteriorMap build_posteriors(const PointAnnotationSet& ann, int h, int w, double scale, double sigma) {
  if (sigma <= 0.0) throw Error(ErrorCode::kBadArgument, "build_posteriors: sigma must be positive");
  if (h <= 0 || w <= 0) throw Error(ErrorCode::kBadArgument, "build_posteriors: empty grid");
  PosteriorMap post;
  post.h = h;
  post.w = w;
  post.m = static_cast<int>(ann.points.size());
  post.sigma = sigma;
  if (post.m == 0) return post;

  // Annotations rescaled to density-grid coordinates; posteriors evaluated
  // at pixel centers. sigma is rescaled with the grid.
  const double sg = sigma * scale;
  const double inv2s2 = 1.0 / (2.0 * sg * sg);
  std::vector<double> zx(static_cast<size_t>(post.m)), zy(static_cast<size_t>(post.m));
  for (int i = 0; i < post.m; ++i) {
    zx[static_cast<size_t>(i)] = static_cast<double>(ann.points[static_cast<size_t>(i)].x) * scale;
    zy[static_cast<size_t>(i)] = static_cast<double>(ann.points[static_cast<size_t>(i)].y) * scale;
  }
  post.p.assign(static_cast<size_t>(post.m) * h * w, 0.0);
  std::vector<double> logits(static_cast<size_t>(post.m));
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const double px = static_cast<double>(x) + 0.5;
      const double py = static_cast<double>(y) + 0.5;
      double mx = -std::numeric_limits<double>::infinity();
      for (int i = 0; i < post.m; ++i) {
        const double dx = px - zx[static_cast<size_t>(i)];
        const double dy = py - zy[static_cast<size_t>(i)];
        logits[static_cast<size_t>(i)] = -(dx * dx + dy * dy) * inv2s2;
        mx = std::max(mx, logits[static_cast<size_t>(i)]);
      }
      double z = 0.0;
      for (int i = 0; i < post.m; ++i) {
        logits[static_cast<size_t>(i)] = std::exp(logits[static_cast<size_t>(i)] - mx);
        z += logits[static_cast<size_t>(i)];
      }
      for (int i = 0; i < post.m; ++i)
        post.p[(static_cast<size_t>(i) * h + y) * w + x] = logits[static_cast<size_t>(i)] / z;
    }
  }
  return post;
}

double bayesian_loss(const DensityMap& density, const PosteriorMap& post) {
  if (density.h != post.h || density.w != post.w)
    throw Error(ErrorCode::kSizeMismatch, "bayesian_loss: density/posterior shape mismatch");
  if (post.m == 0) {
    double s = 0.0;
    for (float v : density.v) s += v;
    return s;
  }
  double loss = 0.0;
  const size_t hw = static_cast<size_t>(post.h) * post.w;
  for (int i = 0; i < post.m; ++i) {
    double e = 0.0;
    const double* pi = post.p.data() + static_cast<size_t>(i) * hw;
    for (size_t j = 0; j < hw; ++j) e += pi[j] * static_cast<double>(density.v[j]);
    loss += std::abs(1.0 - e);
  }
  return loss;
}

DistillLossValue distill_loss(const ModalImage& student, const ModalImage& teacher) {
  if (student.h != teacher.h || student.w != teacher.w)
    throw Error(ErrorCode::kSizeMismatch, "distill_loss: shape mismatch");
  double s = 0.0;
  for (size_t i = 0; i < student.px.size(); ++i) {
    const double d = static_cast<double>(student.px[i]) - static_cast<double>(teacher.px[i]);
    s += d * d;
  }
  DistillLossValue v;
  v.raw_sum = s;
  v.per_pixel_mean = s / static_cast<double>(student.px.size());
  return v;
}

}  // namespace brokercc
