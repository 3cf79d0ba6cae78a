#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "brokercc/image.hpp"

namespace brokercc {

/// Grid Average Mean absolute Error at one level for one image: the map is
/// split into 2^level x 2^level regions (remainder pixels absorbed by the
/// last row/column), ground-truth points are binned at density resolution,
/// and per-region absolute count errors are summed.
double game(const DensityMap& pred, const PointAnnotationSet& ann, int level);

/// sqrt(mean((pred - gt)^2)); hard error on empty input.
double rmse(const std::vector<double>& pred_counts, const std::vector<double>& gt_counts);

/// 10*log10(1/MSE) with MAX=1; +infinity for identical images.
double psnr(const ModalImage& a, const ModalImage& b);

/// Standard SSIM: 11x11 Gaussian window sigma 1.5, K1=0.01, K2=0.03, L=1,
/// computed on channel-mean grayscale, averaged over valid windows.
double ssim(const ModalImage& a, const ModalImage& b);

/// Sentinel-aware mean: infinite entries are excluded and counted.
struct SentinelMean {
  double mean = 0.0;
  int finite = 0;
  int infinite = 0;
};
SentinelMean sentinel_mean(const std::vector<double>& values);

struct EvalReport {
  std::map<int, double> game_levels;  // levels 0..3
  double rmse_value = 0.0;
  int n_images = 0;
  std::optional<double> psnr_mean;   // dB, infinite entries excluded
  std::optional<int> psnr_infinite;  // how many comparisons were exact
  std::optional<double> ssim_mean;
  std::int64_t bmg_params = 0;
  double bmg_latency_ms = 0.0;

  /// Versioned JSON (schema: schemas/eval_report.schema.json).
  std::string to_json() const;
};

}  // namespace brokercc
