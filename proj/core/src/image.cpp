#include "brokercc/image.hpp"

#include <opencv2/imgcodecs.hpp>

#include "brokercc/error.hpp"

namespace brokercc {

std::string to_string(Modality m) {
  switch (m) {
    case Modality::kRgb: return "rgb";
    case Modality::kThermal: return "thermal";
    case Modality::kDepth: return "depth";
    case Modality::kBroker: return "broker";
  }
  return "rgb";
}

Modality modality_from_string(const std::string& s) {
  if (s == "rgb") return Modality::kRgb;
  if (s == "thermal") return Modality::kThermal;
  if (s == "depth") return Modality::kDepth;
  if (s == "broker") return Modality::kBroker;
  throw Error(ErrorCode::kBadArgument, "unknown modality tag: " + s);
}

void ModalImage::validate() const {
  if (h < 32 || w < 32)
    throw Error(ErrorCode::kBadArgument,
                "image too small: " + std::to_string(h) + "x" + std::to_string(w) + " (min 32x32)");
  if (px.size() != static_cast<size_t>(3) * h * w)
    throw Error(ErrorCode::kBadArgument, "pixel buffer size does not match 3xHxW");
  for (float v : px) {
    if (!std::isfinite(v) || v < 0.f || v > 1.f)
      throw Error(ErrorCode::kBadArgument, "pixel value outside [0,1]");
  }
}

void ModalPair::validate() const {
  if (rgb.h != aux.h || rgb.w != aux.w)
    throw Error(ErrorCode::kSizeMismatch,
                "pair '" + id + "': rgb " + std::to_string(rgb.h) + "x" + std::to_string(rgb.w) +
                    " vs aux " + std::to_string(aux.h) + "x" + std::to_string(aux.w));
  if (aux.tag != Modality::kThermal && aux.tag != Modality::kDepth)
    throw Error(ErrorCode::kBadArgument, "pair '" + id + "': aux modality must be thermal or depth");
  for (const auto& p : annotations.points) {
    if (!(p.x >= 0.f && p.x < static_cast<float>(rgb.w) && p.y >= 0.f && p.y < static_cast<float>(rgb.h)))
      throw Error(ErrorCode::kBadArgument, "pair '" + id + "': annotation point outside image");
  }
}

double predict_count(const DensityMap& d) {
  double s = 0.0;
  for (float x : d.v) s += x;
  return s;
}

void write_png(const std::string& path, const ModalImage& im) {
  cv::Mat mat(im.h, im.w, CV_8UC3);
  for (int y = 0; y < im.h; ++y)
    for (int x = 0; x < im.w; ++x) {
      // OpenCV stores BGR.
      auto& px = mat.at<cv::Vec3b>(y, x);
      for (int c = 0; c < 3; ++c)
        px[2 - c] = static_cast<unsigned char>(std::lround(std::min(1.f, std::max(0.f, im.at(c, y, x))) * 255.f));
    }
  if (!cv::imwrite(path, mat))
    throw Error(ErrorCode::kIo, "cannot write image: " + path);
}

ModalImage read_png(const std::string& path, Modality tag) {
  cv::Mat mat = cv::imread(path, cv::IMREAD_COLOR);
  if (mat.empty()) throw Error(ErrorCode::kIo, "cannot read image: " + path);
  ModalImage im(mat.rows, mat.cols, tag);
  for (int y = 0; y < im.h; ++y)
    for (int x = 0; x < im.w; ++x) {
      const auto& px = mat.at<cv::Vec3b>(y, x);
      for (int c = 0; c < 3; ++c) im.at(c, y, x) = static_cast<float>(px[2 - c]) / 255.f;
    }
  return im;
}

void quantize_to_u8_grid(ModalImage& im) {
  for (float& v : im.px)
    v = static_cast<float>(std::lround(std::min(1.f, std::max(0.f, v)) * 255.f)) / 255.f;
}

}  // namespace brokercc
