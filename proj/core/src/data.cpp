#include "brokercc/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include <nlohmann/json.hpp>

#include "brokercc/error.hpp"

namespace brokercc {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr float kPersonSigma = 4.f;

json read_json_file(const fs::path& p) {
  std::ifstream in(p);
  if (!in) throw Error(ErrorCode::kMissingFile, "missing file: " + p.string());
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw Error(ErrorCode::kMalformed, "malformed JSON in " + p.string() + ": " + e.what());
  }
  return j;
}

PointAnnotationSet read_annotations(const fs::path& p, int h, int w, const std::string& id) {
  json j = read_json_file(p);
  if (!j.is_object() || !j.contains("points") || !j["points"].is_array())
    throw Error(ErrorCode::kMalformed, "annotation for '" + id + "' lacks a \"points\" array");
  PointAnnotationSet ann;
  for (const auto& e : j["points"]) {
    if (!e.is_array() || e.size() != 2 || !e[0].is_number() || !e[1].is_number())
      throw Error(ErrorCode::kMalformed, "annotation for '" + id + "' has a malformed point entry");
    Point2f pt{e[0].get<float>(), e[1].get<float>()};
    if (!(pt.x >= 0.f && pt.x < static_cast<float>(w) && pt.y >= 0.f && pt.y < static_cast<float>(h)))
      throw Error(ErrorCode::kMalformed, "annotation for '" + id + "' has a point outside the image");
    ann.points.push_back(pt);
  }
  return ann;
}

void write_annotations(const fs::path& p, const PointAnnotationSet& ann) {
  json pts = json::array();
  for (const auto& pt : ann.points) pts.push_back({pt.x, pt.y});
  json j{{"points", pts}};
  std::ofstream out(p);
  if (!out) throw Error(ErrorCode::kIo, "cannot write " + p.string());
  out << j.dump(2) << "\n";
}

/// Adds an isotropic Gaussian blob; contributions beyond 4 sigma are skipped.
void splat_blob(ModalImage& im, float cx, float cy, float amp, const float rgb_gain[3]) {
  const float sigma = kPersonSigma;
  const int r = static_cast<int>(std::ceil(4.f * sigma));
  const int x0 = std::max(0, static_cast<int>(std::floor(cx)) - r);
  const int x1 = std::min(im.w - 1, static_cast<int>(std::ceil(cx)) + r);
  const int y0 = std::max(0, static_cast<int>(std::floor(cy)) - r);
  const int y1 = std::min(im.h - 1, static_cast<int>(std::ceil(cy)) + r);
  for (int y = y0; y <= y1; ++y)
    for (int x = x0; x <= x1; ++x) {
      const float dx = (static_cast<float>(x) - cx);
      const float dy = (static_cast<float>(y) - cy);
      const float g = amp * std::exp(-(dx * dx + dy * dy) / (2.f * sigma * sigma));
      for (int c = 0; c < 3; ++c) im.at(c, y, x) += rgb_gain[c] * g;
    }
}

void clamp01(ModalImage& im) {
  for (float& v : im.px) v = std::min(1.f, std::max(0.f, v));
}

/// Smooth low-frequency texture for the RGB background.
ModalImage render_background(int h, int w, Rng& rng) {
  ModalImage bg(h, w, Modality::kRgb);
  struct Wave {
    float fx, fy, phase, amp;
  };
  std::vector<Wave> waves;
  for (int i = 0; i < 4; ++i)
    waves.push_back({static_cast<float>(rng.uniform(0.01, 0.06)), static_cast<float>(rng.uniform(0.01, 0.06)),
                     static_cast<float>(rng.uniform(0.0, 6.28318)), static_cast<float>(rng.uniform(0.02, 0.06))});
  const float base = static_cast<float>(rng.uniform(0.25, 0.45));
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      float v = base;
      for (const auto& wv : waves)
        v += wv.amp * std::sin(wv.fx * static_cast<float>(x) + wv.fy * static_cast<float>(y) + wv.phase);
      for (int c = 0; c < 3; ++c) bg.at(c, y, x) = v * (0.9f + 0.05f * static_cast<float>(c));
    }
  clamp01(bg);
  return bg;
}

}  // namespace

void SynthSpec::validate() const {
  if (n_images <= 0) throw Error(ErrorCode::kBadConfig, "synth: n_images must be positive");
  if (height < 32 || width < 32) throw Error(ErrorCode::kBadConfig, "synth: image size below 32x32");
  if (misalign_px < 0.f) throw Error(ErrorCode::kBadConfig, "synth: misalign_px must be >= 0");
  if (crowd_min > crowd_max || crowd_min < 0)
    throw Error(ErrorCode::kBadConfig, "synth: invalid crowd_range");
  if (illumination < 0.f || illumination > 1.f)
    throw Error(ErrorCode::kBadConfig, "synth: illumination must be in [0,1]");
  if (aux_modality != Modality::kThermal && aux_modality != Modality::kDepth)
    throw Error(ErrorCode::kBadConfig, "synth: aux modality must be thermal or depth");
}

std::vector<ModalPair> load_dataset(const fs::path& root, Split split) {
  json manifest = read_json_file(root / "manifest.json");
  const char* key = split == Split::kTrain ? "train" : "test";
  if (!manifest.contains(key) || !manifest[key].is_array())
    throw Error(ErrorCode::kMalformed, "manifest.json lacks a \"" + std::string(key) + "\" id list");
  std::vector<ModalPair> pairs;
  for (const auto& e : manifest[key]) {
    const std::string id = e.get<std::string>();
    const fs::path rgb_p = root / "rgb" / (id + ".png");
    const fs::path aux_p = root / "aux" / (id + ".png");
    const fs::path ann_p = root / "ann" / (id + ".json");
    for (const fs::path& p : {rgb_p, aux_p, ann_p})
      if (!fs::exists(p)) throw Error(ErrorCode::kMissingFile, "id '" + id + "': missing " + p.string());
    ModalPair pair;
    pair.id = id;
    pair.rgb = read_png(rgb_p.string(), Modality::kRgb);
    Modality aux_tag = Modality::kThermal;
    if (manifest.contains("aux_modality")) aux_tag = modality_from_string(manifest["aux_modality"].get<std::string>());
    pair.aux = read_png(aux_p.string(), aux_tag);
    if (pair.rgb.h != pair.aux.h || pair.rgb.w != pair.aux.w)
      throw Error(ErrorCode::kSizeMismatch,
                  "id '" + id + "': rgb " + std::to_string(pair.rgb.h) + "x" + std::to_string(pair.rgb.w) +
                      " vs aux " + std::to_string(pair.aux.h) + "x" + std::to_string(pair.aux.w));
    pair.annotations = read_annotations(ann_p, pair.rgb.h, pair.rgb.w, id);
    if (manifest.contains("misalignment") && manifest["misalignment"].contains(id)) {
      const auto& m = manifest["misalignment"][id];
      pair.misalignment = Offset2f{m[0].get<float>(), m[1].get<float>()};
    }
    pairs.push_back(std::move(pair));
  }
  return pairs;
}

ModalImage load_fusion_ref(const fs::path& root, const std::string& id) {
  const fs::path p = root / "fusion_ref" / (id + ".png");
  if (!fs::exists(p)) throw Error(ErrorCode::kMissingFile, "id '" + id + "': missing " + p.string());
  return read_png(p.string(), Modality::kBroker);
}

bool has_fusion_ref(const fs::path& root) { return fs::is_directory(root / "fusion_ref"); }

std::vector<ModalPair> synth_generate(const SynthSpec& spec, const fs::path& out_root) {
  spec.validate();
  std::error_code ec;
  for (const char* sub : {"rgb", "aux", "ann", "fusion_ref"}) {
    fs::create_directories(out_root / sub, ec);
    if (ec) throw Error(ErrorCode::kIo, "cannot create " + (out_root / sub).string() + ": " + ec.message());
  }

  Rng rng(spec.seed);
  std::vector<ModalPair> pairs;
  json misalign_map = json::object();
  for (int i = 0; i < spec.n_images; ++i) {
    char buf[16];
    std::snprintf(buf, sizeof(buf), "img%04d", i);
    const std::string id = buf;

    const int k = rng.uniform_int(spec.crowd_min, spec.crowd_max);
    std::vector<Point2f> centers;
    std::vector<float> amps, depths;
    const float margin = 2.f;
    for (int p = 0; p < k; ++p) {
      centers.push_back({static_cast<float>(rng.uniform(margin, spec.width - 1 - margin)),
                         static_cast<float>(rng.uniform(margin, spec.height - 1 - margin))});
      amps.push_back(static_cast<float>(rng.uniform(0.6, 1.0)));
      depths.push_back(static_cast<float>(rng.uniform(1.0, 4.0)));
    }
    float dx = 0.f, dy = 0.f;
    if (spec.misalign_px > 0.f) {
      const double ang = rng.uniform(0.0, 2.0 * 3.14159265358979323846);
      const double mag = rng.uniform(0.0, spec.misalign_px);
      dx = static_cast<float>(mag * std::cos(ang));
      dy = static_cast<float>(mag * std::sin(ang));
    }

    // RGB: persons over a textured background, contrast scaled by illumination.
    ModalImage rgb = render_background(spec.height, spec.width, rng);
    const float rgb_gain[3] = {spec.illumination, spec.illumination * 0.85f, spec.illumination * 0.7f};
    for (int p = 0; p < k; ++p) splat_blob(rgb, centers[p].x, centers[p].y, amps[p], rgb_gain);
    clamp01(rgb);

    // Aux at the annotation positions (used for the ghost-free fusion
    // reference) and at the shifted positions (what the sensor "saw").
    auto render_aux = [&](float off_x, float off_y) {
      ModalImage aux(spec.height, spec.width, spec.aux_modality, 0.05f);
      if (spec.aux_modality == Modality::kDepth) {
        // Inverse-distance shading over a vertical gradient background.
        for (int y = 0; y < spec.height; ++y) {
          const float g = 0.05f + 0.1f * static_cast<float>(y) / static_cast<float>(spec.height);
          for (int x = 0; x < spec.width; ++x)
            for (int c = 0; c < 3; ++c) aux.at(c, y, x) = g;
        }
        for (int p = 0; p < k; ++p) {
          const float amp = std::min(1.f, 1.f / depths[static_cast<size_t>(p)]);
          const float gain[3] = {amp, amp, amp};
          splat_blob(aux, centers[p].x + off_x, centers[p].y + off_y, 1.f, gain);
        }
      } else {
        const float gain[3] = {1.f, 1.f, 1.f};
        for (int p = 0; p < k; ++p)
          splat_blob(aux, centers[p].x + off_x, centers[p].y + off_y, amps[static_cast<size_t>(p)], gain);
      }
      clamp01(aux);
      return aux;
    };
    ModalImage aux_shifted = render_aux(dx, dy);
    ModalImage aux_aligned = render_aux(0.f, 0.f);

    quantize_to_u8_grid(rgb);
    quantize_to_u8_grid(aux_shifted);
    quantize_to_u8_grid(aux_aligned);

    // Ghost-free reference: pixelwise average of RGB and the un-shifted aux,
    // built from the quantized images so an aligned dataset reproduces it
    // exactly from the stored 8-bit files.
    ModalImage fref(spec.height, spec.width, Modality::kBroker);
    for (size_t j = 0; j < fref.px.size(); ++j) fref.px[j] = 0.5f * (rgb.px[j] + aux_aligned.px[j]);
    quantize_to_u8_grid(fref);

    ModalPair pair;
    pair.id = id;
    pair.rgb = std::move(rgb);
    pair.aux = std::move(aux_shifted);
    for (const auto& c : centers) pair.annotations.points.push_back(c);
    pair.misalignment = Offset2f{dx, dy};

    write_png((out_root / "rgb" / (id + ".png")).string(), pair.rgb);
    write_png((out_root / "aux" / (id + ".png")).string(), pair.aux);
    write_png((out_root / "fusion_ref" / (id + ".png")).string(), fref);
    write_annotations(out_root / "ann" / (id + ".json"), pair.annotations);
    misalign_map[id] = {dx, dy};
    pairs.push_back(std::move(pair));
  }

  const int n_train = std::max(1, std::min(spec.n_images,
                                           static_cast<int>(std::lround(spec.train_fraction * spec.n_images))));
  json train_ids = json::array(), test_ids = json::array();
  for (int i = 0; i < spec.n_images; ++i)
    (i < n_train ? train_ids : test_ids).push_back(pairs[static_cast<size_t>(i)].id);
  json manifest{{"train", train_ids},
                {"test", test_ids},
                {"aux_modality", to_string(spec.aux_modality)},
                {"misalignment", misalign_map}};
  std::ofstream out(out_root / "manifest.json");
  if (!out) throw Error(ErrorCode::kIo, "cannot write manifest to " + out_root.string());
  out << manifest.dump(2) << "\n";
  return pairs;
}

ModalPair crop_flip(const ModalPair& pair, int crop_y, int crop_x, int crop_h, int crop_w, bool flip) {
  if (crop_h > pair.rgb.h || crop_w > pair.rgb.w)
    throw Error(ErrorCode::kBadArgument, "crop " + std::to_string(crop_h) + "x" + std::to_string(crop_w) +
                                             " larger than image");
  if (crop_y < 0 || crop_x < 0 || crop_y + crop_h > pair.rgb.h || crop_x + crop_w > pair.rgb.w)
    throw Error(ErrorCode::kBadArgument, "crop window out of bounds");
  auto crop_image = [&](const ModalImage& src) {
    ModalImage dst(crop_h, crop_w, src.tag);
    for (int c = 0; c < 3; ++c)
      for (int y = 0; y < crop_h; ++y)
        for (int x = 0; x < crop_w; ++x) {
          const int sx = flip ? crop_x + crop_w - 1 - x : crop_x + x;
          dst.at(c, y, x) = src.at(c, crop_y + y, sx);
        }
    return dst;
  };
  ModalPair out;
  out.id = pair.id;
  out.misalignment = pair.misalignment;
  out.rgb = crop_image(pair.rgb);
  out.aux = crop_image(pair.aux);
  for (const auto& p : pair.annotations.points) {
    float x = p.x - static_cast<float>(crop_x);
    float y = p.y - static_cast<float>(crop_y);
    if (x < 0.f || x >= static_cast<float>(crop_w) || y < 0.f || y >= static_cast<float>(crop_h)) continue;
    if (flip) x = static_cast<float>(crop_w - 1) - x;
    out.annotations.points.push_back({x, y});
  }
  return out;
}

ModalPair augment(const ModalPair& pair, int crop_h, int crop_w, Rng& rng, AugmentRecord* record) {
  if (crop_h > pair.rgb.h || crop_w > pair.rgb.w)
    throw Error(ErrorCode::kBadArgument, "crop larger than image");
  const int crop_y = pair.rgb.h == crop_h ? 0 : rng.uniform_int(0, pair.rgb.h - crop_h);
  const int crop_x = pair.rgb.w == crop_w ? 0 : rng.uniform_int(0, pair.rgb.w - crop_w);
  const bool flip = rng.coin();
  if (record) *record = {crop_y, crop_x, flip};
  return crop_flip(pair, crop_y, crop_x, crop_h, crop_w, flip);
}

}  // namespace brokercc
