#pragma once

#include <cmath>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "brokercc/tensor.hpp"

namespace brokercc {

enum class Modality { kRgb, kThermal, kDepth, kBroker };

std::string to_string(Modality m);
Modality modality_from_string(const std::string& s);

/// 3-channel float image, CHW, values in [0,1].
struct ModalImage {
  int h = 0, w = 0;
  Modality tag = Modality::kRgb;
  std::vector<float> px;  // 3*h*w

  ModalImage() = default;
  ModalImage(int h_, int w_, Modality tag_, float fill = 0.f)
      : h(h_), w(w_), tag(tag_), px(static_cast<size_t>(3) * h_ * w_, fill) {}

  float& at(int c, int y, int x) { return px[(static_cast<size_t>(c) * h + y) * w + x]; }
  float at(int c, int y, int x) const { return px[(static_cast<size_t>(c) * h + y) * w + x]; }

  /// Enforces the type invariants: finite pixels in [0,1], H,W >= 32.
  void validate() const;

  template <class T>
  Tensor<T> to_tensor() const {
    std::vector<T> d(px.size());
    for (size_t i = 0; i < px.size(); ++i) d[i] = static_cast<T>(px[i]);
    return Tensor<T>::from({3, h, w}, std::move(d));
  }

  template <class T>
  static ModalImage from_tensor(const Tensor<T>& t, Modality tag) {
    if (t.rank() != 3 || t.dim(0) != 3) throw std::invalid_argument("from_tensor: expects (3,H,W)");
    ModalImage im(t.dim(1), t.dim(2), tag);
    for (size_t i = 0; i < im.px.size(); ++i) im.px[i] = static_cast<float>(t[static_cast<std::int64_t>(i)]);
    return im;
  }
};

struct Point2f {
  float x = 0.f, y = 0.f;
};

struct PointAnnotationSet {
  std::vector<Point2f> points;
  size_t count() const { return points.size(); }
};

struct Offset2f {
  float dx = 0.f, dy = 0.f;
};

/// Index-registered RGB + auxiliary pair with point annotations.
struct ModalPair {
  ModalImage rgb;
  ModalImage aux;
  PointAnnotationSet annotations;
  std::string id;
  std::optional<Offset2f> misalignment;  // known only for synthetic data

  void validate() const;
};

/// One-channel non-negative density grid; sum of entries estimates count.
struct DensityMap {
  int h = 0, w = 0;
  std::vector<float> v;
  /// Ratio of density resolution to input resolution (1/stride).
  float scale = 1.f;

  DensityMap() = default;
  DensityMap(int h_, int w_, float scale_) : h(h_), w(w_), v(static_cast<size_t>(h_) * w_, 0.f), scale(scale_) {}
  float& at(int y, int x) { return v[static_cast<size_t>(y) * w + x]; }
  float at(int y, int x) const { return v[static_cast<size_t>(y) * w + x]; }
};

/// Sum of all density entries: the estimated crowd count.
double predict_count(const DensityMap& d);

// PNG I/O (8-bit, 3-channel; float pixels scaled by 255 on write, by 1/255
// on read).
void write_png(const std::string& path, const ModalImage& im);
ModalImage read_png(const std::string& path, Modality tag);

/// Quantize to the 8-bit grid used on disk, so in-memory and reloaded
/// pixels match exactly.
void quantize_to_u8_grid(ModalImage& im);

}  // namespace brokercc
