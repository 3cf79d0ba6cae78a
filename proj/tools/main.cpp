#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <sstream>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "brokercc/data.hpp"
#include "brokercc/error.hpp"
#include "brokercc/metrics.hpp"
#include "brokercc/profile.hpp"
#include "brokercc/train.hpp"

namespace fs = std::filesystem;
using namespace brokercc;
using nlohmann::json;

namespace {

// Per-command knobs shared by the config-driven commands. Precedence:
// explicit flag > config file (BROKERCC_CONFIG env var wins over --config
// for the file choice) > built-in desk defaults.
struct ConfigOpts {
  std::string config_path;
  std::uint64_t seed = 0;
  bool seed_set = false;
  int epochs = 0;
  long steps = -1;
  double lr = 0.0;

  void attach(CLI::App* cmd) {
    cmd->add_option("--config", config_path, "Config file (JSON or TOML)");
    cmd->add_option("--seed", seed, "RNG seed")->each([this](const std::string&) { seed_set = true; });
    cmd->add_option("--epochs", epochs, "Override max epochs")->check(CLI::PositiveNumber);
    cmd->add_option("--steps", steps, "Override max optimizer steps (0 = epoch-bounded)");
    cmd->add_option("--lr", lr, "Override learning rate")->check(CLI::PositiveNumber);
  }

  TrainConfig resolve(Stage stage) const {
    TrainConfig cfg = TrainConfig::desk(stage);
    std::string path = config_path;
    if (const char* env = std::getenv("BROKERCC_CONFIG")) path = env;
    if (!path.empty()) {
      json merged = cfg.to_json();
      merged.merge_patch(TrainConfig::read_file(path));
      cfg = TrainConfig::from_json(merged);
    }
    cfg.stage = stage;
    if (seed_set) cfg.seed = seed;
    if (epochs > 0) cfg.max_epochs = epochs;
    if (steps >= 0) cfg.max_steps = static_cast<int>(steps);
    if (lr > 0.0) cfg.lr = lr;
    return cfg;
  }
};

ModalPair load_pair_files(const std::string& rgb_path, const std::string& aux_path) {
  ModalPair pair;
  pair.rgb = read_png(rgb_path, Modality::kRgb);
  pair.aux = read_png(aux_path, Modality::kThermal);
  pair.id = fs::path(rgb_path).stem().string();
  if (pair.rgb.h != pair.aux.h || pair.rgb.w != pair.aux.w)
    throw Error(ErrorCode::kSizeMismatch, "rgb and aux images differ in size");
  return pair;
}

void write_text(const std::string& path, const std::string& content) {
  std::ofstream out(path);
  if (!out) throw Error(ErrorCode::kIo, "cannot write " + path);
  out << content;
}

// ---------------------------------------------------------------------------

int cmd_synth(const std::string& out_dir, SynthSpec spec) {
  spec.validate();
  const auto pairs = synth_generate(spec, out_dir);
  std::cout << "wrote " << pairs.size() << " pairs to " << out_dir << "\n";
  return 0;
}

int cmd_distill(const std::string& data_dir, const std::string& teacher_spec,
                const ConfigOpts& opts, const std::string& out_ckpt, const std::string& log_path) {
  TrainConfig cfg = opts.resolve(Stage::kDistill);
  cfg.data_dir = data_dir;
  const Teacher teacher = Teacher::parse(teacher_spec);
  const auto train_pairs = load_dataset(data_dir, Split::kTrain);
  const DistillResult r = run_distill(cfg, teacher, train_pairs, out_ckpt, log_path);
  std::cout << "distill: " << r.steps_run << " steps, best per-pixel MSE " << r.best_mse
            << " at epoch " << r.best_epoch << ", checkpoint " << out_ckpt << "\n";
  return 0;
}

int cmd_finetune(const std::string& data_dir, const std::string& bmg_ckpt, const ConfigOpts& opts,
                 const std::string& out_ckpt, const std::string& log_path,
                 const AblationSwitches& ab) {
  TrainConfig cfg = opts.resolve(Stage::kFinetune);
  cfg.data_dir = data_dir;
  cfg.ablations.no_distill = cfg.ablations.no_distill || ab.no_distill;
  cfg.ablations.freeze_bmg = cfg.ablations.freeze_bmg || ab.freeze_bmg;
  cfg.ablations.no_cma = cfg.ablations.no_cma || ab.no_cma;
  cfg.ablations.no_broker = cfg.ablations.no_broker || ab.no_broker;
  const auto train_pairs = load_dataset(data_dir, Split::kTrain);
  const auto test_pairs = load_dataset(data_dir, Split::kTest);
  const FinetuneResult r = run_finetune(cfg, train_pairs, test_pairs, bmg_ckpt, out_ckpt, log_path);
  std::cout << "finetune: " << r.steps_run << " steps, best GAME(0) " << r.best_game0
            << " at epoch " << r.best_epoch << ", checkpoint " << out_ckpt << "\n";
  return 0;
}

EvalReport oracle_report(const std::vector<ModalPair>& test_pairs) {
  EvalReport report;
  report.n_images = static_cast<int>(test_pairs.size());
  std::vector<double> preds, gts;
  for (const auto& pair : test_pairs) {
    DensityMap d(pair.rgb.h / 8, pair.rgb.w / 8, 1.f / 8.f);
    for (const auto& p : pair.annotations.points) {
      const int gx = std::clamp(static_cast<int>(std::floor(p.x * d.scale)), 0, d.w - 1);
      const int gy = std::clamp(static_cast<int>(std::floor(p.y * d.scale)), 0, d.h - 1);
      d.at(gy, gx) += 1.f;
    }
    for (int lvl = 0; lvl <= 3; ++lvl) report.game_levels[lvl] += game(d, pair.annotations, lvl);
    preds.push_back(predict_count(d));
    gts.push_back(static_cast<double>(pair.annotations.count()));
  }
  for (auto& [lvl, v] : report.game_levels) v /= static_cast<double>(test_pairs.size());
  report.rmse_value = rmse(preds, gts);
  return report;
}

int cmd_eval(const std::string& data_dir, const std::string& ckpt, const std::string& out_path,
             bool oracle) {
  const auto test_pairs = load_dataset(data_dir, Split::kTest);
  if (test_pairs.empty()) throw Error(ErrorCode::kBadArgument, "eval: dataset has no test split");
  EvalReport report;
  if (oracle) {
    report = oracle_report(test_pairs);
  } else {
    if (ckpt.empty()) throw Error(ErrorCode::kBadArgument, "eval: --ckpt is required without --oracle-density");
    const ModelBundle bundle = ModelBundle::from_checkpoint(ckpt);
    report = evaluate_dataset(bundle, test_pairs, data_dir);
  }
  write_text(out_path, report.to_json() + "\n");
  std::cout << report.to_json() << "\n";
  return 0;
}

int cmd_fuse(const std::string& rgb, const std::string& aux, const std::string& ckpt,
             const std::string& out_path) {
  const ModelBundle bundle = ModelBundle::from_checkpoint(ckpt);
  const ModalPair pair = load_pair_files(rgb, aux);
  write_png(out_path, bundle.predict_broker(pair));
  return 0;
}

int cmd_count(const std::string& rgb, const std::string& aux, const std::string& ckpt) {
  const ModelBundle bundle = ModelBundle::from_checkpoint(ckpt);
  const ModalPair pair = load_pair_files(rgb, aux);
  std::cout << predict_count(bundle.predict_density(pair)) << "\n";
  return 0;
}

double image_mean(const ModalImage& im) {
  double s = 0.0;
  for (float v : im.px) s += v;
  return s / static_cast<double>(im.px.size());
}

// Simple bar-chart rendering so histogram PNGs need no plotting library:
// one panel per modality, bars normalized to the tallest bin.
ModalImage render_hist_png(const std::vector<std::vector<int>>& counts, int bins) {
  const int panel_h = 64, panel_w = bins * 8, gap = 4;
  ModalImage im(panel_h, static_cast<int>(counts.size()) * (panel_w + gap), Modality::kRgb, 1.f);
  for (size_t m = 0; m < counts.size(); ++m) {
    int peak = 1;
    for (int c : counts[m]) peak = std::max(peak, c);
    for (int b = 0; b < bins; ++b) {
      const int bar = counts[m][b] * (panel_h - 2) / peak;
      for (int y = panel_h - 1 - bar; y < panel_h; ++y)
        for (int x = 0; x < 8; ++x)
          for (int c = 0; c < 3; ++c)
            im.at(c, y, static_cast<int>(m) * (panel_w + gap) + b * 8 + x) = c == static_cast<int>(m) ? 0.8f : 0.1f;
    }
  }
  return im;
}

int cmd_hist(const std::string& data_dir, const std::string& ckpt, const std::string& out_base,
             int bins, bool png) {
  const ModelBundle bundle = ModelBundle::from_checkpoint(ckpt);
  const auto train_pairs = load_dataset(data_dir, Split::kTrain);
  if (train_pairs.empty()) throw Error(ErrorCode::kBadArgument, "hist: dataset has no train split");
  const std::vector<std::string> names = {"visible", "broker", "thermal"};
  std::vector<std::vector<int>> counts(3, std::vector<int>(bins, 0));
  auto bin_of = [bins](double v) { return std::min(static_cast<int>(v * bins), bins - 1); };
  for (const auto& pair : train_pairs) {
    counts[0][bin_of(image_mean(pair.rgb))] += 1;
    counts[1][bin_of(image_mean(bundle.predict_broker(pair)))] += 1;
    counts[2][bin_of(image_mean(pair.aux))] += 1;
  }
  std::ostringstream csv;
  csv << "modality,bin_lo,bin_hi,count\n";
  for (size_t m = 0; m < names.size(); ++m)
    for (int b = 0; b < bins; ++b)
      csv << names[m] << "," << static_cast<double>(b) / bins << ","
          << static_cast<double>(b + 1) / bins << "," << counts[m][b] << "\n";
  write_text(out_base + ".csv", csv.str());
  if (png) write_png(out_base + ".png", render_hist_png(counts, bins));
  std::cout << "wrote " << out_base << ".csv" << (png ? " and .png" : "") << "\n";
  return 0;
}

json psnr_field(const SentinelMean& m) {
  if (m.finite == 0 && m.infinite > 0) return "inf";
  return m.mean;
}

int cmd_compare_ghost(const std::string& data_dir, const std::string& ckpt,
                      const std::string& out_dir) {
  if (!has_fusion_ref(data_dir))
    throw Error(ErrorCode::kMissingFile,
                "compare-ghost needs a fusion_ref/ directory; regenerate the dataset with the synth command");
  const ModelBundle bundle = ModelBundle::from_checkpoint(ckpt);
  const Teacher teacher = Teacher::builtin_average();
  const auto test_pairs = load_dataset(data_dir, Split::kTest);
  if (test_pairs.empty()) throw Error(ErrorCode::kBadArgument, "compare-ghost: dataset has no test split");
  fs::create_directories(out_dir);

  const int crop = bundle.cfg.crop;
  std::vector<double> t_psnr, b_psnr, t_ssim, b_ssim;
  for (const auto& pair : test_pairs) {
    const int cy = (pair.rgb.h - crop) / 2, cx = (pair.rgb.w - crop) / 2;
    const AugmentRecord rec{cy, cx, false};
    ModalImage teach = crop_flip_image(teacher.fuse(pair), rec, crop, crop);
    ModalImage broker = bundle.predict_broker(pair);
    ModalImage ref = crop_flip_image(load_fusion_ref(data_dir, pair.id), rec, crop, crop);
    // Metrics on the 8-bit grid so the table is recomputable from the
    // emitted triptychs.
    quantize_to_u8_grid(teach);
    quantize_to_u8_grid(broker);
    quantize_to_u8_grid(ref);
    t_psnr.push_back(psnr(teach, ref));
    b_psnr.push_back(psnr(broker, ref));
    t_ssim.push_back(ssim(teach, ref));
    b_ssim.push_back(ssim(broker, ref));

    ModalImage trip(crop, 3 * crop, Modality::kRgb);
    for (int c = 0; c < 3; ++c)
      for (int y = 0; y < crop; ++y)
        for (int x = 0; x < crop; ++x) {
          trip.at(c, y, x) = teach.at(c, y, x);
          trip.at(c, y, crop + x) = broker.at(c, y, x);
          trip.at(c, y, 2 * crop + x) = ref.at(c, y, x);
        }
    write_png((fs::path(out_dir) / (pair.id + ".png")).string(), trip);
  }
  const SentinelMean tp = sentinel_mean(t_psnr), bp = sentinel_mean(b_psnr);
  json table = {{"teacher_psnr", psnr_field(tp)},
                {"broker_psnr", psnr_field(bp)},
                {"teacher_ssim", sentinel_mean(t_ssim).mean},
                {"broker_ssim", sentinel_mean(b_ssim).mean},
                {"teacher_psnr_infinite_count", tp.infinite},
                {"broker_psnr_infinite_count", bp.infinite},
                {"n_images", static_cast<int>(test_pairs.size())}};
  write_text((fs::path(out_dir) / "ghost_table.json").string(), table.dump(2) + "\n");
  std::cout << table.dump(2) << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Broker-modality crowd counting toolkit"};
  app.require_subcommand(1);

  // synth ------------------------------------------------------------------
  auto* synth = app.add_subcommand("synth", "Generate a synthetic paired dataset");
  std::string synth_out;
  SynthSpec spec;
  std::string aux_name = "thermal";
  ConfigOpts synth_opts;
  synth->add_option("--out", synth_out, "Output dataset directory")->required();
  synth->add_option("--n", spec.n_images, "Number of image pairs");
  synth->add_option("--size", spec.height, "Image side length (square)");
  synth->add_option("--misalign", spec.misalign_px, "Max aux translation, pixels");
  synth->add_option("--illum", spec.illumination, "RGB person contrast in [0,1]");
  synth->add_option("--crowd-min", spec.crowd_min, "Minimum persons per image");
  synth->add_option("--crowd-max", spec.crowd_max, "Maximum persons per image");
  synth->add_option("--aux", aux_name, "Aux modality: thermal|depth");
  synth_opts.attach(synth);

  // distill ----------------------------------------------------------------
  auto* distill = app.add_subcommand("distill", "Stage 1: train the BMG against a fusion teacher");
  std::string d_data, d_teacher = "builtin", d_out, d_log;
  ConfigOpts d_opts;
  distill->add_option("--data", d_data, "Dataset directory")->required();
  distill->add_option("--teacher", d_teacher, "builtin or dir:PATH");
  distill->add_option("--out", d_out, "Output checkpoint")->required();
  distill->add_option("--log", d_log, "JSONL training log");
  d_opts.attach(distill);

  // finetune ---------------------------------------------------------------
  auto* finetune = app.add_subcommand("finetune", "Stage 2: joint counting training");
  std::string f_data, f_bmg, f_out, f_log;
  AblationSwitches f_ab;
  ConfigOpts f_opts;
  finetune->add_option("--data", f_data, "Dataset directory")->required();
  finetune->add_option("--bmg", f_bmg, "Stage-1 BMG checkpoint");
  finetune->add_option("--out", f_out, "Output checkpoint")->required();
  finetune->add_option("--log", f_log, "JSONL training log");
  finetune->add_flag("--no-distill", f_ab.no_distill, "Random-init BMG (skip stage 1)");
  finetune->add_flag("--freeze-bmg", f_ab.freeze_bmg, "Keep BMG weights fixed");
  finetune->add_flag("--no-cma", f_ab.no_cma, "Disable the attention enhancement branch");
  finetune->add_flag("--no-broker", f_ab.no_broker, "Train on RGB + aux only");
  f_opts.attach(finetune);

  // eval -------------------------------------------------------------------
  auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint on the test split");
  std::string e_data, e_ckpt, e_out = "report.json";
  bool e_oracle = false;
  ConfigOpts e_opts;
  eval->add_option("--data", e_data, "Dataset directory")->required();
  eval->add_option("--ckpt", e_ckpt, "Model checkpoint");
  eval->add_option("--out", e_out, "Report JSON path");
  eval->add_flag("--oracle-density", e_oracle, "Score ground-truth densities (metric self-test)");
  e_opts.attach(eval);

  // fuse -------------------------------------------------------------------
  auto* fuse = app.add_subcommand("fuse", "Fuse one RGB/aux pair into a broker image");
  std::string fu_rgb, fu_aux, fu_ckpt, fu_out;
  ConfigOpts fu_opts;
  fuse->add_option("--rgb", fu_rgb, "RGB image")->required();
  fuse->add_option("--aux", fu_aux, "Aux image")->required();
  fuse->add_option("--ckpt", fu_ckpt, "Model checkpoint")->required();
  fuse->add_option("--out", fu_out, "Output broker image")->required();
  fu_opts.attach(fuse);

  // count ------------------------------------------------------------------
  auto* count = app.add_subcommand("count", "Print the estimated count for one pair");
  std::string c_rgb, c_aux, c_ckpt;
  ConfigOpts c_opts;
  count->add_option("--rgb", c_rgb, "RGB image")->required();
  count->add_option("--aux", c_aux, "Aux image")->required();
  count->add_option("--ckpt", c_ckpt, "Model checkpoint")->required();
  c_opts.attach(count);

  // hist -------------------------------------------------------------------
  auto* hist = app.add_subcommand("hist", "Per-modality mean-intensity histograms (train split)");
  std::string h_data, h_ckpt, h_out;
  int h_bins = 16;
  bool h_png = false;
  ConfigOpts h_opts;
  hist->add_option("--data", h_data, "Dataset directory")->required();
  hist->add_option("--ckpt", h_ckpt, "Model checkpoint")->required();
  hist->add_option("--out", h_out, "Output base path (writes .csv, optionally .png)")->required();
  hist->add_option("--bins", h_bins, "Histogram bins")->check(CLI::PositiveNumber);
  hist->add_flag("--png", h_png, "Also render a PNG bar chart");
  h_opts.attach(hist);

  // compare-ghost ----------------------------------------------------------
  auto* ghost = app.add_subcommand("compare-ghost", "Teacher vs broker vs fusion reference");
  std::string g_data, g_ckpt, g_out;
  ConfigOpts g_opts;
  ghost->add_option("--data", g_data, "Synthetic dataset with fusion_ref/")->required();
  ghost->add_option("--ckpt", g_ckpt, "Model checkpoint")->required();
  ghost->add_option("--out", g_out, "Output directory")->required();
  g_opts.attach(ghost);

  try {
    app.parse(argc, argv);
    if (synth->parsed()) {
      spec.width = spec.height;
      spec.aux_modality = modality_from_string(aux_name);
      if (synth_opts.seed_set) spec.seed = synth_opts.seed;
      return cmd_synth(synth_out, spec);
    }
    if (distill->parsed()) return cmd_distill(d_data, d_teacher, d_opts, d_out, d_log);
    if (finetune->parsed()) return cmd_finetune(f_data, f_bmg, f_opts, f_out, f_log, f_ab);
    if (eval->parsed()) return cmd_eval(e_data, e_ckpt, e_out, e_oracle);
    if (fuse->parsed()) return cmd_fuse(fu_rgb, fu_aux, fu_ckpt, fu_out);
    if (count->parsed()) return cmd_count(c_rgb, c_aux, c_ckpt);
    if (hist->parsed()) return cmd_hist(h_data, h_ckpt, h_out, h_bins, h_png);
    if (ghost->parsed()) return cmd_compare_ghost(g_data, g_ckpt, g_out);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);  // --help
    std::cerr << "error[E_BAD_ARGUMENT]: " << e.what() << "\n";
    return 2;
  } catch (const Error& e) {
    std::cerr << "error[" << to_code_string(e.code()) << "]: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error[E_UNKNOWN]: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
