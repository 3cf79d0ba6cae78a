#pragma once

#include <algorithm>
#include <chrono>
#include <vector>

#include "brokercc/bmg.hpp"

namespace brokercc {

struct BmgProfile {
  std::int64_t param_count = 0;
  double latency_ms = 0.0;  // median single-pair forward
};

/// Exact parameter count plus the median wall time of `runs` single-pair
/// forwards after `warmups` warmups.
template <class T>
BmgProfile profile_bmg(const BrokerGenerator<T>& gen, int warmups = 3, int runs = 20) {
  BmgProfile p;
  p.param_count = gen.param_count();
  const int n = gen.config().input_size();
  Tensor<T> img({3, n, n});
  for (std::int64_t i = 0; i < img.size(); ++i)
    img[i] = static_cast<T>((i * 2654435761ULL % 1000) / 1000.0);
  Var<T> rgb = Var<T>::leaf(img);
  Var<T> aux = Var<T>::leaf(std::move(img));
  for (int i = 0; i < warmups; ++i) (void)gen.forward(rgb, aux);
  std::vector<double> times;
  for (int i = 0; i < runs; ++i) {
    const auto t0 = std::chrono::steady_clock::now();
    (void)gen.forward(rgb, aux);
    const auto t1 = std::chrono::steady_clock::now();
    times.push_back(std::chrono::duration<double, std::milli>(t1 - t0).count());
  }
  std::sort(times.begin(), times.end());
  p.latency_ms = times[times.size() / 2];
  return p;
}

}  // namespace brokercc
