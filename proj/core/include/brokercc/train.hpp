#pragma once

#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "brokercc/bmg.hpp"
#include "brokercc/checkpoint.hpp"
#include "brokercc/config.hpp"
#include "brokercc/counter.hpp"
#include "brokercc/data.hpp"
#include "brokercc/losses.hpp"
#include "brokercc/metrics.hpp"

namespace brokercc {

/// Stage-1 fusion oracle: either the built-in deterministic pixelwise
/// average or a directory of precomputed fusion images keyed by pair id.
class Teacher {
 public:
  enum class Kind { kBuiltinAverage, kPrecomputedDir };

  static Teacher builtin_average() { return Teacher(Kind::kBuiltinAverage, {}); }
  static Teacher precomputed(std::filesystem::path dir) {
    return Teacher(Kind::kPrecomputedDir, std::move(dir));
  }
  /// Parses "builtin" or "dir:<path>".
  static Teacher parse(const std::string& spec);

  Kind kind() const { return kind_; }

  /// Fusion image for the pair, same size as the inputs.
  ModalImage fuse(const ModalPair& pair) const;

 private:
  Teacher(Kind k, std::filesystem::path dir) : kind_(k), dir_(std::move(dir)) {}
  Kind kind_;
  std::filesystem::path dir_;
};

/// Crop/flip a standalone image with the window recorded during pair
/// augmentation (used to keep precomputed teacher targets aligned).
ModalImage crop_flip_image(const ModalImage& im, const AugmentRecord& rec, int crop_h, int crop_w);

struct EpochRecord {
  int epoch = 0;
  long steps = 0;
  double train_loss = 0.0;   // stage-dependent meaning
  double test_game0 = 0.0;   // finetune only
  double test_rmse = 0.0;    // finetune only
};

struct DistillResult {
  std::vector<EpochRecord> curve;
  double best_mse = 0.0;  // best per-pixel MSE seen
  int best_epoch = 0;
  long steps_run = 0;
};

struct FinetuneResult {
  std::vector<EpochRecord> trajectory;
  double best_game0 = 0.0;
  int best_epoch = 0;
  long steps_run = 0;
  long bmg_forward_calls = 0;
};

/// The models driven by training and evaluation. bmg is absent under the
/// no_broker ablation.
struct ModelBundle {
  TrainConfig cfg;
  std::unique_ptr<BrokerGenerator<float>> bmg;
  std::unique_ptr<CountingNetwork<float>> counter;

  static ModelBundle create(const TrainConfig& cfg);
  /// Rebuilds the bundle from a full-model checkpoint (config in header).
  static ModelBundle from_checkpoint(const std::string& path);

  void save_full(const std::string& path, const std::string& stage, int epoch,
                 const nlohmann::json& metrics) const;

  /// Density map for one pair (graph-free convenience path).
  DensityMap predict_density(const ModalPair& pair) const;
  ModalImage predict_broker(const ModalPair& pair) const;
};

/// Stage 1: minimize the summed squared error between the BMG output and
/// the teacher fusion with Adam. Saves the best-so-far checkpoint to
/// out_ckpt; appends one JSON line per epoch to log_path when given.
DistillResult run_distill(const TrainConfig& cfg, const Teacher& teacher,
                          const std::vector<ModalPair>& train_pairs, const std::string& out_ckpt,
                          const std::string& log_path = "");

/// Stage 2: joint optimization of BMG + extractor + head under the Bayesian
/// counting loss, with the ablation switches of the config. bmg_ckpt may be
/// empty only when ablations.no_distill or no_broker is set.
FinetuneResult run_finetune(const TrainConfig& cfg, const std::vector<ModalPair>& train_pairs,
                            const std::vector<ModalPair>& test_pairs, const std::string& bmg_ckpt,
                            const std::string& out_ckpt, const std::string& log_path = "");

/// Full evaluation over a test split; PSNR/SSIM of broker vs fusion_ref are
/// included when the dataset ships a fusion_ref directory.
EvalReport evaluate_dataset(const ModelBundle& bundle, const std::vector<ModalPair>& test_pairs,
                            const std::filesystem::path& data_root, bool with_profile = true);

}  // namespace brokercc
