#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "brokercc/image.hpp"
#include "brokercc/nn.hpp"

namespace brokercc {

enum class Split { kTrain, kTest };

/// Parameters of the synthetic paired-modality generator. Persons are
/// isotropic Gaussian blobs (sigma 4 px, amplitude in [0.6,1.0]); the aux
/// image is translated by one global offset per image of magnitude at most
/// misalign_px, which is what makes ghosting observable.
struct SynthSpec {
  int n_images = 16;
  int height = 64;
  int width = 64;
  int crowd_min = 3;
  int crowd_max = 8;
  float misalign_px = 0.f;
  float illumination = 1.f;  // RGB person contrast, in [0,1]
  Modality aux_modality = Modality::kThermal;
  std::uint64_t seed = 0;
  /// Fraction of ids assigned to the train split (rest are test).
  float train_fraction = 0.75f;

  void validate() const;
};

/// Loads `root/{rgb,aux,ann}/<id>.*` for every id the manifest lists under
/// the given split. Pixels are normalized to [0,1].
std::vector<ModalPair> load_dataset(const std::filesystem::path& root, Split split);

/// Whether `root/fusion_ref/<id>.png` exists for the dataset.
ModalImage load_fusion_ref(const std::filesystem::path& root, const std::string& id);
bool has_fusion_ref(const std::filesystem::path& root);

/// Renders the synthetic dataset to disk in the load_dataset layout (plus
/// fusion_ref/) and returns the same pairs in memory, already quantized to
/// the on-disk 8-bit grid so the round trip is exact.
std::vector<ModalPair> synth_generate(const SynthSpec& spec, const std::filesystem::path& out_root);

/// Identical crop window and flip decision for both modalities; annotation
/// points are translated/reflected and out-of-window points dropped.
struct AugmentRecord {
  int crop_y = 0, crop_x = 0;
  bool flipped = false;
};

ModalPair augment(const ModalPair& pair, int crop_h, int crop_w, Rng& rng,
                  AugmentRecord* record = nullptr);

/// Deterministic variant with an explicit window, used by augment and tests.
ModalPair crop_flip(const ModalPair& pair, int crop_y, int crop_x, int crop_h, int crop_w, bool flip);

}  // namespace brokercc
