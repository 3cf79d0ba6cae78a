#pragma once

#include <string>

#include <nlohmann/json.hpp>

#include "brokercc/bmg.hpp"
#include "brokercc/counter.hpp"

namespace brokercc {

enum class Stage { kDistill, kFinetune };

struct AblationSwitches {
  bool no_distill = false;  // random-init BMG, skip checkpoint load
  bool freeze_bmg = false;  // BMG excluded from updates
  bool no_cma = false;      // enhancement branch removed (F_h = 0)
  bool no_broker = false;   // BMG never invoked; features are R + aux only
};

/// Every hyperparameter, ablation switch and path. Defaults are the
/// full-scale settings; desk() is the synthetic-data profile used by the
/// second-scale tests and examples.
struct TrainConfig {
  Stage stage = Stage::kDistill;
  double lr = 1e-5;
  double weight_decay = 1e-4;
  int batch_size = 1;
  int max_epochs = 400;
  int max_steps = 0;  // 0 = bounded by epochs only
  int crop = 224;
  double sigma = 8.0;  // Bayesian posterior sigma, input pixels
  std::uint64_t seed = 0;
  AblationSwitches ablations;
  std::string data_dir, ckpt_path, out_dir;
  /// Optional stage-2 fusion regularizer weight (0 disables it).
  double fusion_reg_weight = 0.0;

  BmgConfig bmg;
  ExtractorConfig extractor;

  static TrainConfig desk(Stage stage = Stage::kDistill) {
    TrainConfig c;
    c.stage = stage;
    // Counting loss needs a much gentler step than sigmoid-output distill:
    // around 1e-3 the density head's output ReLU dies and never recovers.
    c.lr = stage == Stage::kDistill ? 1e-3 : 5e-5;
    c.max_epochs = 50;
    c.crop = 64;
    c.bmg = BmgConfig::tiny();
    c.extractor = ExtractorConfig::tiny();
    return c;
  }

  void validate() const;
  nlohmann::json to_json() const;
  static TrainConfig from_json(const nlohmann::json& j);

  /// Reads a config file; `.toml` (a flat key/value + [section] subset) and
  /// JSON are both accepted, decided by content sniffing.
  static TrainConfig load(const std::string& path);

  /// The raw parsed content of a config file (same sniffing as load), for
  /// callers that layer files over their own defaults.
  static nlohmann::json read_file(const std::string& path);
};

/// Parses the supported TOML subset into a JSON object with dotted section
/// prefixes flattened into nested objects.
nlohmann::json parse_toml_subset(const std::string& text);

}  // namespace brokercc
