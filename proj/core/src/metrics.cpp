#include "brokercc/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include <nlohmann/json.hpp>

#include "brokercc/error.hpp"

namespace brokercc {

double game(const DensityMap& pred, const PointAnnotationSet& ann, int level) {
  if (level < 0 || level > 3) throw Error(ErrorCode::kBadArgument, "game: level must be in [0,3]");
  const int n = 1 << level;
  const int rh = std::max(1, pred.h / n);
  const int rw = std::max(1, pred.w / n);
  auto region_of = [n](int coord, int cell) {
    return std::min(coord / cell, n - 1);
  };
  std::vector<double> pred_mass(static_cast<size_t>(n) * n, 0.0);
  std::vector<double> gt_count(static_cast<size_t>(n) * n, 0.0);
  for (int y = 0; y < pred.h; ++y)
    for (int x = 0; x < pred.w; ++x)
      pred_mass[static_cast<size_t>(region_of(y, rh)) * n + region_of(x, rw)] +=
          static_cast<double>(pred.at(y, x));
  // Points binned at density resolution, consistent with the prediction.
  for (const auto& p : ann.points) {
    int gx = static_cast<int>(std::floor(p.x * pred.scale));
    int gy = static_cast<int>(std::floor(p.y * pred.scale));
    gx = std::clamp(gx, 0, pred.w - 1);
    gy = std::clamp(gy, 0, pred.h - 1);
    gt_count[static_cast<size_t>(region_of(gy, rh)) * n + region_of(gx, rw)] += 1.0;
  }
  double total = 0.0;
  for (size_t i = 0; i < pred_mass.size(); ++i) total += std::abs(pred_mass[i] - gt_count[i]);
  return total;
}

double rmse(const std::vector<double>& pred_counts, const std::vector<double>& gt_counts) {
  if (pred_counts.empty() || pred_counts.size() != gt_counts.size())
    throw Error(ErrorCode::kBadArgument, "rmse: lists must be nonempty and of equal length");
  double s = 0.0;
  for (size_t i = 0; i < pred_counts.size(); ++i) {
    const double d = pred_counts[i] - gt_counts[i];
    s += d * d;
  }
  return std::sqrt(s / static_cast<double>(pred_counts.size()));
}

double psnr(const ModalImage& a, const ModalImage& b) {
  if (a.h != b.h || a.w != b.w) throw Error(ErrorCode::kSizeMismatch, "psnr: shape mismatch");
  double mse = 0.0;
  for (size_t i = 0; i < a.px.size(); ++i) {
    const double d = static_cast<double>(a.px[i]) - static_cast<double>(b.px[i]);
    mse += d * d;
  }
  mse /= static_cast<double>(a.px.size());
  if (mse == 0.0) return std::numeric_limits<double>::infinity();
  return 10.0 * std::log10(1.0 / mse);
}

namespace {

std::vector<double> to_gray(const ModalImage& im) {
  std::vector<double> g(static_cast<size_t>(im.h) * im.w);
  const size_t plane = g.size();
  for (size_t i = 0; i < plane; ++i)
    g[i] = (static_cast<double>(im.px[i]) + im.px[plane + i] + im.px[2 * plane + i]) / 3.0;
  return g;
}

}  // namespace

double ssim(const ModalImage& a, const ModalImage& b) {
  if (a.h != b.h || a.w != b.w) throw Error(ErrorCode::kSizeMismatch, "ssim: shape mismatch");
  constexpr int kWin = 11;
  constexpr double kSigma = 1.5;
  constexpr double kC1 = 0.01 * 0.01;  // (K1*L)^2, L=1
  constexpr double kC2 = 0.03 * 0.03;
  if (a.h < kWin || a.w < kWin)
    throw Error(ErrorCode::kBadArgument, "ssim: image smaller than the 11x11 window");

  double kernel[kWin];
  double ksum = 0.0;
  for (int i = 0; i < kWin; ++i) {
    const double d = static_cast<double>(i - kWin / 2);
    kernel[i] = std::exp(-d * d / (2.0 * kSigma * kSigma));
    ksum += kernel[i];
  }
  for (int i = 0; i < kWin; ++i) kernel[i] /= ksum;

  const std::vector<double> ga = to_gray(a), gb = to_gray(b);
  const int h = a.h, w = a.w;
  const int oh = h - kWin + 1, ow = w - kWin + 1;

  // Separable weighted moments over valid windows.
  auto blur = [&](const std::vector<double>& src) {
    std::vector<double> tmp(static_cast<size_t>(h) * ow);
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < ow; ++x) {
        double s = 0.0;
        for (int k = 0; k < kWin; ++k) s += kernel[k] * src[static_cast<size_t>(y) * w + x + k];
        tmp[static_cast<size_t>(y) * ow + x] = s;
      }
    std::vector<double> out(static_cast<size_t>(oh) * ow);
    for (int y = 0; y < oh; ++y)
      for (int x = 0; x < ow; ++x) {
        double s = 0.0;
        for (int k = 0; k < kWin; ++k) s += kernel[k] * tmp[static_cast<size_t>(y + k) * ow + x];
        out[static_cast<size_t>(y) * ow + x] = s;
      }
    return out;
  };
  std::vector<double> aa(ga.size()), bb(ga.size()), ab(ga.size());
  for (size_t i = 0; i < ga.size(); ++i) {
    aa[i] = ga[i] * ga[i];
    bb[i] = gb[i] * gb[i];
    ab[i] = ga[i] * gb[i];
  }
  const auto mu_a = blur(ga), mu_b = blur(gb), m_aa = blur(aa), m_bb = blur(bb), m_ab = blur(ab);
  double total = 0.0;
  // Numerator and denominator share one expression shape (2x + c) so that
  // for identical inputs they are bitwise equal regardless of FP contraction,
  // making self-comparison exactly 1.0 per window.
  const auto term = [](double x, double c) { return 2.0 * x + c; };
  for (size_t i = 0; i < mu_a.size(); ++i) {
    const double va = m_aa[i] - mu_a[i] * mu_a[i];
    const double vb = m_bb[i] - mu_b[i] * mu_b[i];
    const double cov = m_ab[i] - mu_a[i] * mu_b[i];
    const double mab = mu_a[i] * mu_b[i];
    const double msq = 0.5 * (mu_a[i] * mu_a[i] + mu_b[i] * mu_b[i]);
    total += (term(mab, kC1) * term(cov, kC2)) / (term(msq, kC1) * term(0.5 * (va + vb), kC2));
  }
  return total / static_cast<double>(mu_a.size());
}

SentinelMean sentinel_mean(const std::vector<double>& values) {
  SentinelMean r;
  double s = 0.0;
  for (double v : values) {
    if (std::isinf(v)) {
      ++r.infinite;
    } else {
      s += v;
      ++r.finite;
    }
  }
  if (r.finite > 0) r.mean = s / r.finite;
  return r;
}

std::string EvalReport::to_json() const {
  nlohmann::json j;
  j["schema_version"] = 1;
  nlohmann::json g;
  for (const auto& [lvl, val] : game_levels) g[std::to_string(lvl)] = val;
  j["game"] = g;
  j["rmse"] = rmse_value;
  j["n_images"] = n_images;
  if (psnr_mean) j["psnr_mean"] = *psnr_mean;
  if (psnr_infinite) j["psnr_infinite_count"] = *psnr_infinite;
  if (ssim_mean) j["ssim_mean"] = *ssim_mean;
  j["bmg_params"] = bmg_params;
  j["bmg_latency_ms"] = bmg_latency_ms;
  return j.dump(2);
}

}  // namespace brokercc
