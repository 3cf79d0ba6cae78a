#pragma once

#include <string>
#include <vector>

#include "brokercc/image.hpp"
#include "brokercc/nn.hpp"

namespace brokercc {

/// Shape parameters of the broker generator. The defaults are the
/// production configuration (224x224 inputs, ~3.7M parameters); tiny() is
/// the test-scale profile for 64x64 inputs.
struct BmgConfig {
  int bottleneck_channels = 256;  // d
  int cma_patch_grid = 8;         // grid*grid patches
  int cma_patch_size = 28;        // patchifier kernel = stride
  int cma_heads = 4;
  int cma_layers = 1;
  int encoder_stages = 3;
  int base_channels = 64;

  int input_size() const { return cma_patch_grid * cma_patch_size; }
  int bottleneck_size() const { return input_size() >> encoder_stages; }

  static BmgConfig tiny() {
    BmgConfig c;
    c.bottleneck_channels = 64;
    c.cma_patch_grid = 4;
    c.cma_patch_size = 16;
    c.cma_heads = 2;
    c.base_channels = 16;
    return c;
  }

  void validate() const;
  bool operator==(const BmgConfig&) const = default;
};

/// Broker Modal Generator: per-modality stem convolutions, a contracting
/// encoder over the channel-concatenated stems, a cross-modal attention
/// branch (aux queries, RGB keys/values, aux residual), and a decoder with
/// additive skip connections back to full resolution. Output pixels are
/// bounded to [0,1] by a sigmoid.
template <class T>
class BrokerGenerator {
 public:
  BrokerGenerator(const BmgConfig& cfg, std::uint64_t seed);

  const BmgConfig& config() const { return cfg_; }
  ParamRegistry<T>& params() { return reg_; }
  const ParamRegistry<T>& params() const { return reg_; }
  std::int64_t param_count() const { return reg_.count(); }

  /// Encoder output F_e (d x h x w) plus the per-stage skip activations.
  struct EncodeResult {
    Var<T> features;
    std::vector<Var<T>> skips;
  };
  EncodeResult cmc_encode(const Var<T>& rgb, const Var<T>& aux) const;

  /// Cross-attention enhancement F_h, resized to the encoder grid (d x h x w).
  Var<T> cma_enhance(const Var<T>& rgb, const Var<T>& aux) const;

  /// Token-level CMA output before the grid reshape: (patches, d).
  Var<T> cma_tokens(const Var<T>& rgb, const Var<T>& aux) const;

  /// Full forward pass to a (3,H,W) broker image in [0,1].
  Var<T> forward(const Var<T>& rgb, const Var<T>& aux) const;
  Var<T> forward(const ModalImage& rgb, const ModalImage& aux) const;

  /// When disabled the enhancement branch contributes F_h = 0 (ablation).
  void set_cma_enabled(bool on) { cma_enabled_ = on; }
  bool cma_enabled() const { return cma_enabled_; }

  long forward_calls() const { return forward_calls_; }

  const MultiHeadAttention<T>& attention() const { return attn_; }

 private:
  void check_input(const Tensor<T>& img) const;
  Var<T> patchify(const Var<T>& img) const;

  BmgConfig cfg_;
  ParamRegistry<T> reg_;
  bool cma_enabled_ = true;
  mutable long forward_calls_ = 0;

  Conv2dLayer<T> stem_rgb_, stem_aux_;             // xi_r, xi_t
  std::vector<Conv2dLayer<T>> enc_;                // f_e
  Conv2dLayer<T> patch_conv_;                      // xi (shared patch embedding)
  MultiHeadAttention<T> attn_;
  FeedForward<T> ffn_;
  std::vector<Conv2dLayer<T>> dec_;                // f_d
};

using BrokerGeneratorF = BrokerGenerator<float>;

// ---------------------------------------------------------------------------
// implementation

inline void BmgConfig::validate() const {
  if (bottleneck_channels <= 0 || cma_heads <= 0 || cma_layers != 1 || encoder_stages != 3 ||
      base_channels <= 0 || cma_patch_grid <= 0 || cma_patch_size <= 0)
    throw std::invalid_argument("BmgConfig: unsupported configuration");
  if (bottleneck_channels % cma_heads != 0)
    throw std::invalid_argument("BmgConfig: d must be divisible by head count");
  if (input_size() % (1 << encoder_stages) != 0)
    throw std::invalid_argument("BmgConfig: input size not divisible by 2^stages");
}

template <class T>
BrokerGenerator<T>::BrokerGenerator(const BmgConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
  cfg_.validate();
  Rng rng(seed);
  const int d = cfg_.bottleneck_channels;
  const int c1 = cfg_.base_channels;       // 64
  const int c2 = cfg_.base_channels * 2;   // 128

  stem_rgb_ = Conv2dLayer<T>(reg_, "bmg.xi_r", 3, 3, 3, 1, 1, rng);
  stem_aux_ = Conv2dLayer<T>(reg_, "bmg.xi_t", 3, 3, 3, 1, 1, rng);

  // Contracting path 6 -> c1 -> c2 -> d over three stride-2 stages; the
  // deepest stage carries two refinement convolutions.
  enc_.emplace_back(reg_, "bmg.enc0.down", 6, c1, 3, 2, 1, rng);
  enc_.emplace_back(reg_, "bmg.enc0.conv", c1, c1, 3, 1, 1, rng);
  enc_.emplace_back(reg_, "bmg.enc1.down", c1, c2, 3, 2, 1, rng);
  enc_.emplace_back(reg_, "bmg.enc1.conv", c2, c2, 3, 1, 1, rng);
  enc_.emplace_back(reg_, "bmg.enc2.down", c2, d, 3, 2, 1, rng);
  enc_.emplace_back(reg_, "bmg.enc2.conv", d, d, 3, 1, 1, rng);
  enc_.emplace_back(reg_, "bmg.enc2.conv2", d, d, 3, 1, 1, rng);

  patch_conv_ = Conv2dLayer<T>(reg_, "bmg.cma.patch", 3, d, cfg_.cma_patch_size, cfg_.cma_patch_size, 0, rng);
  attn_ = MultiHeadAttention<T>(reg_, "bmg.cma.attn", d, cfg_.cma_heads, rng);
  ffn_ = FeedForward<T>(reg_, "bmg.cma.ffn", d, 4 * d, rng);

  // Expanding path with additive skips; channel reduction happens at the
  // coarse resolution, refinement after the skip addition.
  dec_.emplace_back(reg_, "bmg.dec0.reduce", d, c2, 3, 1, 1, rng);
  dec_.emplace_back(reg_, "bmg.dec0.conv", c2, c2, 3, 1, 1, rng);
  dec_.emplace_back(reg_, "bmg.dec1.reduce", c2, c1, 3, 1, 1, rng);
  dec_.emplace_back(reg_, "bmg.dec1.conv", c1, c1, 3, 1, 1, rng);
  dec_.emplace_back(reg_, "bmg.dec2.reduce", c1, c1 / 2, 3, 1, 1, rng);
  dec_.emplace_back(reg_, "bmg.dec2.out", c1 / 2, 3, 3, 1, 1, rng);
}

template <class T>
void BrokerGenerator<T>::check_input(const Tensor<T>& img) const {
  if (img.rank() != 3 || img.dim(0) != 3)
    throw std::invalid_argument("bmg: input must be (3,H,W)");
  const int n = cfg_.input_size();
  if (img.dim(1) != n || img.dim(2) != n)
    throw std::invalid_argument("bmg: input must be " + std::to_string(n) + "x" + std::to_string(n) +
                                " for this configuration, got " + Tensor<T>::shape_str(img.dims()));
}

template <class T>
typename BrokerGenerator<T>::EncodeResult BrokerGenerator<T>::cmc_encode(const Var<T>& rgb,
                                                                         const Var<T>& aux) const {
  check_input(rgb.value());
  check_input(aux.value());
  Var<T> x = concat_channels(stem_rgb_(rgb), stem_aux_(aux));
  EncodeResult r;
  Var<T> s0 = relu(enc_[1](relu(enc_[0](x))));
  Var<T> s1 = relu(enc_[3](relu(enc_[2](s0))));
  Var<T> s2 = relu(enc_[5](relu(enc_[4](s1))));
  r.features = relu(enc_[6](s2));
  r.skips = {s0, s1};
  return r;
}

template <class T>
Var<T> BrokerGenerator<T>::patchify(const Var<T>& img) const {
  Var<T> f = patch_conv_(img);  // (d, grid, grid)
  const int d = cfg_.bottleneck_channels;
  const int n = cfg_.cma_patch_grid * cfg_.cma_patch_grid;
  // (d, g, g) -> tokens (n, d)
  Var<T> flat = reshape(f, {d, n});
  return transpose(flat);
}

template <class T>
Var<T> BrokerGenerator<T>::cma_tokens(const Var<T>& rgb, const Var<T>& aux) const {
  Var<T> x_r = patchify(rgb);
  Var<T> x_t = patchify(aux);
  // Aux tokens query RGB keys/values; the residual comes from the aux side.
  Var<T> h = attn_(x_t, x_r) + x_t;
  return ffn_(h) + h;
}

template <class T>
Var<T> BrokerGenerator<T>::cma_enhance(const Var<T>& rgb, const Var<T>& aux) const {
  check_input(rgb.value());
  check_input(aux.value());
  Var<T> tokens = cma_tokens(rgb, aux);  // (n, d)
  const int g = cfg_.cma_patch_grid;
  const int d = cfg_.bottleneck_channels;
  Var<T> grid = reshape(transpose(tokens), {d, g, g});
  const int hb = cfg_.bottleneck_size();
  return upsample_bilinear(grid, hb, hb);
}

template <class T>
Var<T> BrokerGenerator<T>::forward(const Var<T>& rgb, const Var<T>& aux) const {
  ++forward_calls_;
  EncodeResult enc = cmc_encode(rgb, aux);
  Var<T> y = enc.features;
  if (cma_enabled_) y = y + cma_enhance(rgb, aux);
  const int n = cfg_.input_size();
  y = relu(dec_[0](y));
  y = upsample_bilinear(y, n / 4, n / 4);
  y = relu(dec_[1](y + enc.skips[1]));
  y = relu(dec_[2](y));
  y = upsample_bilinear(y, n / 2, n / 2);
  y = relu(dec_[3](y + enc.skips[0]));
  y = relu(dec_[4](y));
  y = upsample_bilinear(y, n, n);
  return sigmoid(dec_[5](y));
}

template <class T>
Var<T> BrokerGenerator<T>::forward(const ModalImage& rgb, const ModalImage& aux) const {
  return forward(Var<T>::leaf(rgb.template to_tensor<T>()), Var<T>::leaf(aux.template to_tensor<T>()));
}

}  // namespace brokercc
