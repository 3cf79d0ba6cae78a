#pragma once

#include <memory>
#include <string>
#include <vector>

#include "brokercc/image.hpp"
#include "brokercc/nn.hpp"

namespace brokercc {

enum class Backbone { kVgg19, kTiny };

/// Weight-shared feature extractor configuration. The default matches the
/// production scale (stride-16 VGG-style stack + 2-layer 6-head encoder over
/// 196 tokens, D=768, 224 inputs); the tiny profile exists for second-scale
/// tests only.
struct ExtractorConfig {
  Backbone backbone = Backbone::kVgg19;
  int embed_dim = 768;     // D
  int encoder_layers = 2;
  int heads = 6;
  int patch_count = 196;   // must be a square
  int input_size = 224;

  static ExtractorConfig tiny() {
    ExtractorConfig c;
    c.backbone = Backbone::kTiny;
    c.embed_dim = 128;
    c.encoder_layers = 1;
    c.heads = 4;
    c.patch_count = 16;
    c.input_size = 64;
    return c;
  }

  int grid() const;  // sqrt(patch_count)
  void validate() const;
  bool operator==(const ExtractorConfig&) const = default;
};

/// Convolutional backbone + transformer encoder, one parameter set applied
/// identically to every modality slot.
template <class T>
class Extractor {
 public:
  Extractor(const ExtractorConfig& cfg, ParamRegistry<T>& reg, Rng& rng);

  /// (3,H,W) -> (D, g, g) with g = sqrt(patch_count).
  Var<T> operator()(const Var<T>& image) const;

  const ExtractorConfig& config() const { return cfg_; }

 private:
  struct EncoderLayer {
    MultiHeadAttention<T> attn;
    FeedForward<T> ffn;
    LayerNormLayer<T> ln1, ln2;
  };

  ExtractorConfig cfg_;
  std::vector<Conv2dLayer<T>> convs_;
  std::vector<int> pool_after_;  // conv indices followed by 2x2 max pool
  Conv2dLayer<T> proj_;          // 1x1 projection to embed_dim
  Var<T> pos_embed_;             // (patch_count, D), learned, zero-init
  std::vector<EncoderLayer> layers_;
};

/// Density-map regression head: bilinear upsample of the summed features to
/// (H/8, W/8), then a 3x3 conv stack D->256->128->1 with a final ReLU.
template <class T>
class RegressionHead {
 public:
  RegressionHead(int embed_dim, ParamRegistry<T>& reg, Rng& rng);
  Var<T> operator()(const Var<T>& summed, int density_h, int density_w) const;

 private:
  Conv2dLayer<T> c1_, c2_, c3_;
};

/// The triple-modal counting network: shared extractor applied to each
/// modality, feature summation, regression head.
template <class T>
class CountingNetwork {
 public:
  CountingNetwork(const ExtractorConfig& cfg, std::uint64_t seed);

  const ExtractorConfig& config() const { return cfg_; }
  ParamRegistry<T>& params() { return reg_; }
  const ParamRegistry<T>& params() const { return reg_; }
  std::int64_t param_count() const { return reg_.count(); }

  /// Density resolution is input/8.
  int density_size() const { return cfg_.input_size / 8; }
  static constexpr int kDensityStride = 8;

  Var<T> extract(const Var<T>& image) const { return (*extractor_)(image); }
  Var<T> extract(const ModalImage& image) const {
    return (*extractor_)(Var<T>::leaf(image.template to_tensor<T>()));
  }

  /// Sums the given per-modality features and regresses the density map.
  Var<T> density_from_features(const std::vector<Var<T>>& features) const;

  /// Full forward: R, broker, T/D through the shared extractor.
  Var<T> density_forward(const Var<T>& rgb, const Var<T>& broker, const Var<T>& aux) const;

  DensityMap to_density_map(const Var<T>& density) const;

 private:
  ExtractorConfig cfg_;
  ParamRegistry<T> reg_;
  std::unique_ptr<Extractor<T>> extractor_;
  std::unique_ptr<RegressionHead<T>> head_;
};

using CountingNetworkF = CountingNetwork<float>;

// ---------------------------------------------------------------------------
// implementation

inline int ExtractorConfig::grid() const {
  int g = static_cast<int>(std::lround(std::sqrt(static_cast<double>(patch_count))));
  return g;
}

inline void ExtractorConfig::validate() const {
  const int g = grid();
  if (g * g != patch_count) throw std::invalid_argument("ExtractorConfig: patch_count must be square");
  if (input_size % 16 != 0 || input_size / 16 != g)
    throw std::invalid_argument("ExtractorConfig: input_size/16 must equal sqrt(patch_count)");
  if (embed_dim % heads != 0) throw std::invalid_argument("ExtractorConfig: D must divide by heads");
  if (encoder_layers < 1) throw std::invalid_argument("ExtractorConfig: encoder_layers >= 1");
}

template <class T>
Extractor<T>::Extractor(const ExtractorConfig& cfg, ParamRegistry<T>& reg, Rng& rng) : cfg_(cfg) {
  cfg_.validate();
  int backbone_out = 0;
  if (cfg_.backbone == Backbone::kVgg19) {
    // VGG-19 convolutional stack through conv5_4 with four pools (stride 16).
    const std::vector<std::vector<int>> blocks = {
        {64, 64}, {128, 128}, {256, 256, 256, 256}, {512, 512, 512, 512}, {512, 512, 512, 512}};
    int cin = 3, idx = 0;
    for (size_t b = 0; b < blocks.size(); ++b) {
      for (int cout : blocks[b]) {
        convs_.emplace_back(reg, "ext.conv" + std::to_string(idx++), cin, cout, 3, 1, 1, rng);
        cin = cout;
      }
      if (b < 4) pool_after_.push_back(static_cast<int>(convs_.size()) - 1);
    }
    backbone_out = 512;
  } else {
    // Four conv blocks, each conv + pool; stride 16 total.
    const std::vector<int> widths = {16, 32, 64, 128};
    int cin = 3;
    for (size_t b = 0; b < widths.size(); ++b) {
      convs_.emplace_back(reg, "ext.conv" + std::to_string(b), cin, widths[b], 3, 1, 1, rng);
      pool_after_.push_back(static_cast<int>(b));
      cin = widths[b];
    }
    backbone_out = widths.back();
  }
  proj_ = Conv2dLayer<T>(reg, "ext.proj", backbone_out, cfg_.embed_dim, 1, 1, 0, rng);
  pos_embed_ = reg.add("ext.pos_embed", init::zeros<T>({cfg_.patch_count, cfg_.embed_dim}));
  for (int l = 0; l < cfg_.encoder_layers; ++l) {
    EncoderLayer layer;
    const std::string base = "ext.enc" + std::to_string(l);
    layer.attn = MultiHeadAttention<T>(reg, base + ".attn", cfg_.embed_dim, cfg_.heads, rng);
    layer.ffn = FeedForward<T>(reg, base + ".ffn", cfg_.embed_dim, 4 * cfg_.embed_dim, rng);
    layer.ln1 = LayerNormLayer<T>(reg, base + ".ln1", cfg_.embed_dim);
    layer.ln2 = LayerNormLayer<T>(reg, base + ".ln2", cfg_.embed_dim);
    layers_.push_back(std::move(layer));
  }
}

template <class T>
Var<T> Extractor<T>::operator()(const Var<T>& image) const {
  const Tensor<T>& v = image.value();
  if (v.rank() != 3 || v.dim(0) != 3 || v.dim(1) != cfg_.input_size || v.dim(2) != cfg_.input_size)
    throw std::invalid_argument("extractor: input must be (3," + std::to_string(cfg_.input_size) + "," +
                                std::to_string(cfg_.input_size) + "), got " + Tensor<T>::shape_str(v.dims()));
  Var<T> x = image;
  size_t pool_i = 0;
  for (size_t i = 0; i < convs_.size(); ++i) {
    x = relu(convs_[i](x));
    if (pool_i < pool_after_.size() && pool_after_[pool_i] == static_cast<int>(i)) {
      x = max_pool2(x);
      ++pool_i;
    }
  }
  x = proj_(x);  // (D, g, g)
  const int g = cfg_.grid(), d = cfg_.embed_dim;
  Var<T> tokens = transpose(reshape(x, {d, g * g}));  // (n, D)
  tokens = tokens + pos_embed_;
  for (const auto& layer : layers_) {
    tokens = layer.ln1(tokens + layer.attn(tokens, tokens));
    tokens = layer.ln2(tokens + layer.ffn(tokens));
  }
  return reshape(transpose(tokens), {d, g, g});
}

template <class T>
RegressionHead<T>::RegressionHead(int embed_dim, ParamRegistry<T>& reg, Rng& rng) {
  c1_ = Conv2dLayer<T>(reg, "head.c1", embed_dim, 256, 3, 1, 1, rng);
  c2_ = Conv2dLayer<T>(reg, "head.c2", 256, 128, 3, 1, 1, rng);
  c3_ = Conv2dLayer<T>(reg, "head.c3", 128, 1, 3, 1, 1, rng);
}

template <class T>
Var<T> RegressionHead<T>::operator()(const Var<T>& summed, int density_h, int density_w) const {
  Var<T> x = upsample_bilinear(summed, density_h, density_w);
  x = relu(c1_(x));
  x = relu(c2_(x));
  return relu(c3_(x));
}

template <class T>
CountingNetwork<T>::CountingNetwork(const ExtractorConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
  Rng rng(seed);
  extractor_ = std::make_unique<Extractor<T>>(cfg_, reg_, rng);
  head_ = std::make_unique<RegressionHead<T>>(cfg_.embed_dim, reg_, rng);
}

template <class T>
Var<T> CountingNetwork<T>::density_from_features(const std::vector<Var<T>>& features) const {
  if (features.empty()) throw std::invalid_argument("density_from_features: no features");
  Var<T> s = features.size() == 1 ? features[0] : add_n_symmetric(features);
  const int ds = density_size();
  return (*head_)(s, ds, ds);
}

template <class T>
Var<T> CountingNetwork<T>::density_forward(const Var<T>& rgb, const Var<T>& broker,
                                           const Var<T>& aux) const {
  return density_from_features({extract(rgb), extract(broker), extract(aux)});
}

template <class T>
DensityMap CountingNetwork<T>::to_density_map(const Var<T>& density) const {
  const Tensor<T>& v = density.value();
  DensityMap d(v.dim(1), v.dim(2), 1.f / static_cast<float>(kDensityStride));
  for (std::int64_t i = 0; i < v.size(); ++i) d.v[static_cast<size_t>(i)] = static_cast<float>(v[i]);
  return d;
}

}  // namespace brokercc
