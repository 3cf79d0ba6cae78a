#include "brokercc/train.hpp"

#include <algorithm>
#include <fstream>
#include <numeric>

#include "brokercc/error.hpp"
#include "brokercc/profile.hpp"

namespace brokercc {

namespace fs = std::filesystem;
using nlohmann::json;

Teacher Teacher::parse(const std::string& spec) {
  if (spec == "builtin") return builtin_average();
  if (spec.rfind("dir:", 0) == 0) return precomputed(spec.substr(4));
  throw Error(ErrorCode::kBadArgument, "teacher spec must be 'builtin' or 'dir:PATH', got '" + spec + "'");
}

ModalImage Teacher::fuse(const ModalPair& pair) const {
  if (pair.rgb.h != pair.aux.h || pair.rgb.w != pair.aux.w)
    throw Error(ErrorCode::kSizeMismatch, "teacher: pair '" + pair.id + "' has mismatched sizes");
  if (kind_ == Kind::kBuiltinAverage) {
    ModalImage out(pair.rgb.h, pair.rgb.w, Modality::kBroker);
    for (size_t i = 0; i < out.px.size(); ++i)
      out.px[i] = std::min(1.f, std::max(0.f, 0.5f * (pair.rgb.px[i] + pair.aux.px[i])));
    return out;
  }
  const fs::path p = dir_ / (pair.id + ".png");
  if (!fs::exists(p))
    throw Error(ErrorCode::kMissingFile, "teacher image missing for id '" + pair.id + "': " + p.string());
  ModalImage im = read_png(p.string(), Modality::kBroker);
  if (im.h != pair.rgb.h || im.w != pair.rgb.w)
    throw Error(ErrorCode::kSizeMismatch, "teacher image for '" + pair.id + "' does not match pair size");
  return im;
}

ModalImage crop_flip_image(const ModalImage& im, const AugmentRecord& rec, int crop_h, int crop_w) {
  ModalImage out(crop_h, crop_w, im.tag);
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < crop_h; ++y)
      for (int x = 0; x < crop_w; ++x) {
        const int sx = rec.flipped ? rec.crop_x + crop_w - 1 - x : rec.crop_x + x;
        out.at(c, y, x) = im.at(c, rec.crop_y + y, sx);
      }
  return out;
}

namespace {

ModalPair center_crop(const ModalPair& pair, int size) {
  if (pair.rgb.h == size && pair.rgb.w == size) return pair;
  if (pair.rgb.h < size || pair.rgb.w < size)
    throw Error(ErrorCode::kBadArgument, "pair '" + pair.id + "' smaller than the evaluation crop");
  return crop_flip(pair, (pair.rgb.h - size) / 2, (pair.rgb.w - size) / 2, size, size, false);
}

void append_log(const std::string& path, const json& record) {
  if (path.empty()) return;
  std::ofstream out(path, std::ios::app);
  if (out) out << record.dump() << "\n";
}

std::vector<size_t> shuffled_indices(size_t n, Rng& rng) {
  std::vector<size_t> idx(n);
  std::iota(idx.begin(), idx.end(), size_t{0});
  std::shuffle(idx.begin(), idx.end(), rng.engine());
  return idx;
}

std::vector<NamedParam<float>> collect_trainable(const ModelBundle& bundle) {
  std::vector<NamedParam<float>> params;
  if (bundle.bmg && !bundle.cfg.ablations.freeze_bmg)
    for (const auto& p : bundle.bmg->params().params()) params.push_back(p);
  for (const auto& p : bundle.counter->params().params()) params.push_back(p);
  return params;
}

}  // namespace

ModelBundle ModelBundle::create(const TrainConfig& cfg) {
  cfg.validate();
  ModelBundle b;
  b.cfg = cfg;
  if (!cfg.ablations.no_broker) {
    b.bmg = std::make_unique<BrokerGenerator<float>>(cfg.bmg, cfg.seed ^ 0x9e3779b97f4a7c15ULL);
    b.bmg->set_cma_enabled(!cfg.ablations.no_cma);
  }
  b.counter = std::make_unique<CountingNetwork<float>>(cfg.extractor, cfg.seed ^ 0xbf58476d1ce4e5b9ULL);
  return b;
}

ModelBundle ModelBundle::from_checkpoint(const std::string& path) {
  json header = read_checkpoint_header(path);
  TrainConfig cfg = TrainConfig::from_json(header.value("config", json::object()));
  ModelBundle b = create(cfg);
  std::vector<ParamRegistry<float>*> regs;
  if (b.bmg) regs.push_back(&b.bmg->params());
  regs.push_back(&b.counter->params());
  load_checkpoint<float>(path, regs);
  return b;
}

void ModelBundle::save_full(const std::string& path, const std::string& stage, int epoch,
                            const json& metrics) const {
  CheckpointMeta meta;
  meta.config = cfg.to_json();
  meta.stage = stage;
  meta.epoch = epoch;
  meta.metrics = metrics;
  std::vector<const ParamRegistry<float>*> regs;
  if (bmg) regs.push_back(&bmg->params());
  regs.push_back(&counter->params());
  save_checkpoint<float>(path, meta, regs);
}

DensityMap ModelBundle::predict_density(const ModalPair& pair) const {
  const ModalPair p = center_crop(pair, cfg.crop);
  Var<float> rgb = Var<float>::leaf(p.rgb.to_tensor<float>());
  Var<float> aux = Var<float>::leaf(p.aux.to_tensor<float>());
  Var<float> density;
  if (bmg) {
    Var<float> broker = bmg->forward(rgb, aux);
    density = counter->density_forward(rgb, broker, aux);
  } else {
    density = counter->density_from_features({counter->extract(rgb), counter->extract(aux)});
  }
  return counter->to_density_map(density);
}

ModalImage ModelBundle::predict_broker(const ModalPair& pair) const {
  if (!bmg) throw Error(ErrorCode::kBadArgument, "no broker generator in this model (no_broker)");
  const ModalPair p = center_crop(pair, cfg.crop);
  Var<float> broker = bmg->forward(p.rgb, p.aux);
  return ModalImage::from_tensor(broker.value(), Modality::kBroker);
}

DistillResult run_distill(const TrainConfig& cfg, const Teacher& teacher,
                          const std::vector<ModalPair>& train_pairs, const std::string& out_ckpt,
                          const std::string& log_path) {
  cfg.validate();
  if (train_pairs.empty()) throw Error(ErrorCode::kBadArgument, "distill: empty training set");
  BrokerGenerator<float> gen(cfg.bmg, cfg.seed ^ 0x9e3779b97f4a7c15ULL);
  gen.set_cma_enabled(!cfg.ablations.no_cma);
  Adam<float> opt(gen.params().params(), cfg.lr, cfg.weight_decay);
  Rng rng(cfg.seed ^ 0x94d049bb133111ebULL);

  DistillResult result;
  result.best_mse = std::numeric_limits<double>::infinity();
  long steps = 0;
  const double px_per_image = 3.0 * cfg.crop * cfg.crop;
  for (int epoch = 0; epoch < cfg.max_epochs; ++epoch) {
    double epoch_mse_sum = 0.0;
    long epoch_samples = 0;
    for (size_t idx : shuffled_indices(train_pairs.size(), rng)) {
      if (cfg.max_steps > 0 && steps >= cfg.max_steps) break;
      AugmentRecord rec;
      const ModalPair sample = augment(train_pairs[idx], cfg.crop, cfg.crop, rng, &rec);
      ModalImage target = teacher.fuse(train_pairs[idx]);
      target = crop_flip_image(target, rec, cfg.crop, cfg.crop);

      Var<float> broker = gen.forward(sample.rgb, sample.aux);
      Var<float> loss = distill_loss_graph(broker, target);
      opt.zero_grad();
      loss.backward();
      opt.step();
      epoch_mse_sum += static_cast<double>(loss.value()[0]) / px_per_image;
      ++epoch_samples;
      ++steps;
    }
    if (epoch_samples == 0) break;
    const double mean_mse = epoch_mse_sum / epoch_samples;
    EpochRecord rec{epoch, steps, mean_mse, 0.0, 0.0};
    result.curve.push_back(rec);
    append_log(log_path, json{{"stage", "distill"}, {"epoch", epoch}, {"steps", steps},
                              {"per_pixel_mse", mean_mse}});
    if (mean_mse < result.best_mse) {
      result.best_mse = mean_mse;
      result.best_epoch = epoch;
      if (!out_ckpt.empty()) {
        CheckpointMeta meta;
        meta.config = cfg.to_json();
        meta.stage = "distill";
        meta.epoch = epoch;
        meta.metrics = {{"per_pixel_mse", mean_mse}};
        save_checkpoint<float>(out_ckpt, meta, {&gen.params()});
      }
    }
    if (cfg.max_steps > 0 && steps >= cfg.max_steps) break;
  }
  result.steps_run = steps;
  return result;
}

FinetuneResult run_finetune(const TrainConfig& cfg, const std::vector<ModalPair>& train_pairs,
                            const std::vector<ModalPair>& test_pairs, const std::string& bmg_ckpt,
                            const std::string& out_ckpt, const std::string& log_path) {
  cfg.validate();
  if (train_pairs.empty()) throw Error(ErrorCode::kBadArgument, "finetune: empty training set");
  if (bmg_ckpt.empty() && !cfg.ablations.no_distill && !cfg.ablations.no_broker)
    throw Error(ErrorCode::kBadArgument, "finetune: BMG checkpoint required unless no_distill is set");

  ModelBundle bundle = ModelBundle::create(cfg);
  if (bundle.bmg && !bmg_ckpt.empty() && !cfg.ablations.no_distill) {
    std::vector<ParamRegistry<float>*> regs{&bundle.bmg->params()};
    load_checkpoint<float>(bmg_ckpt, regs);
  }
  Adam<float> opt(collect_trainable(bundle), cfg.lr, cfg.weight_decay);
  Rng rng(cfg.seed ^ 0x2545f4914f6cdd1dULL);
  Teacher reg_teacher = Teacher::builtin_average();

  FinetuneResult result;
  result.best_game0 = std::numeric_limits<double>::infinity();
  long steps = 0;
  const float density_scale = 1.f / CountingNetwork<float>::kDensityStride;
  const int dsize = bundle.counter->density_size();

  auto eval_test = [&](double* game0, double* rmse_out) {
    std::vector<double> preds, gts;
    double game_sum = 0.0;
    for (const auto& pair : test_pairs) {
      DensityMap d = bundle.predict_density(pair);
      const ModalPair cp = center_crop(pair, cfg.crop);
      game_sum += game(d, cp.annotations, 0);
      preds.push_back(predict_count(d));
      gts.push_back(static_cast<double>(cp.annotations.count()));
    }
    *game0 = test_pairs.empty() ? 0.0 : game_sum / static_cast<double>(test_pairs.size());
    *rmse_out = test_pairs.empty() ? 0.0 : rmse(preds, gts);
  };

  for (int epoch = 0; epoch < cfg.max_epochs; ++epoch) {
    double epoch_loss = 0.0;
    long epoch_samples = 0;
    for (size_t idx : shuffled_indices(train_pairs.size(), rng)) {
      if (cfg.max_steps > 0 && steps >= cfg.max_steps) break;
      AugmentRecord arec;
      const ModalPair sample = augment(train_pairs[idx], cfg.crop, cfg.crop, rng, &arec);
      Var<float> rgb = Var<float>::leaf(sample.rgb.to_tensor<float>());
      Var<float> aux = Var<float>::leaf(sample.aux.to_tensor<float>());
      Var<float> density;
      Var<float> broker;
      if (bundle.bmg) {
        broker = bundle.bmg->forward(rgb, aux);
        density = bundle.counter->density_forward(rgb, broker, aux);
      } else {
        density = bundle.counter->density_from_features(
            {bundle.counter->extract(rgb), bundle.counter->extract(aux)});
      }
      const PosteriorMap post = build_posteriors(sample.annotations, dsize, dsize,
                                                 density_scale, cfg.sigma);
      Var<float> loss = bayesian_loss_graph(density, post);
      if (cfg.fusion_reg_weight > 0.0 && bundle.bmg) {
        ModalImage target = crop_flip_image(reg_teacher.fuse(train_pairs[idx]), arec, cfg.crop, cfg.crop);
        loss = loss + scale(distill_loss_graph(broker, target),
                            static_cast<float>(cfg.fusion_reg_weight));
      }
      opt.zero_grad();
      if (bundle.bmg && cfg.ablations.freeze_bmg) bundle.bmg->params().zero_grad();
      loss.backward();
      opt.step();
      epoch_loss += static_cast<double>(loss.value()[0]);
      ++epoch_samples;
      ++steps;
    }
    if (epoch_samples == 0) break;
    double game0 = 0.0, rm = 0.0;
    eval_test(&game0, &rm);
    EpochRecord rec{epoch, steps, epoch_loss / epoch_samples, game0, rm};
    result.trajectory.push_back(rec);
    append_log(log_path, json{{"stage", "finetune"}, {"epoch", epoch}, {"steps", steps},
                              {"train_loss", rec.train_loss}, {"test_game0", game0},
                              {"test_rmse", rm}});
    if (game0 < result.best_game0) {
      result.best_game0 = game0;
      result.best_epoch = epoch;
      if (!out_ckpt.empty())
        bundle.save_full(out_ckpt, "finetune", epoch, {{"game0", game0}, {"rmse", rm}});
    }
    if (cfg.max_steps > 0 && steps >= cfg.max_steps) break;
  }
  result.steps_run = steps;
  result.bmg_forward_calls = bundle.bmg ? bundle.bmg->forward_calls() : 0;
  return result;
}

EvalReport evaluate_dataset(const ModelBundle& bundle, const std::vector<ModalPair>& test_pairs,
                            const fs::path& data_root, bool with_profile) {
  if (test_pairs.empty()) throw Error(ErrorCode::kBadArgument, "eval: empty test split");
  EvalReport report;
  report.n_images = static_cast<int>(test_pairs.size());
  std::vector<double> preds, gts, psnrs, ssims;
  std::map<int, double> game_sums;
  for (int lvl = 0; lvl <= 3; ++lvl) game_sums[lvl] = 0.0;
  const bool fref = bundle.bmg && has_fusion_ref(data_root);
  for (const auto& pair : test_pairs) {
    DensityMap d = bundle.predict_density(pair);
    const ModalPair cp = center_crop(pair, bundle.cfg.crop);
    for (int lvl = 0; lvl <= 3; ++lvl) game_sums[lvl] += game(d, cp.annotations, lvl);
    preds.push_back(predict_count(d));
    gts.push_back(static_cast<double>(cp.annotations.count()));
    if (fref) {
      ModalImage broker = bundle.predict_broker(pair);
      ModalImage ref = load_fusion_ref(data_root, pair.id);
      // Match the evaluation crop of the pair.
      if (ref.h != broker.h || ref.w != broker.w) {
        AugmentRecord rec{(ref.h - broker.h) / 2, (ref.w - broker.w) / 2, false};
        ref = crop_flip_image(ref, rec, broker.h, broker.w);
      }
      psnrs.push_back(psnr(broker, ref));
      ssims.push_back(ssim(broker, ref));
    }
  }
  for (int lvl = 0; lvl <= 3; ++lvl)
    report.game_levels[lvl] = game_sums[lvl] / static_cast<double>(test_pairs.size());
  report.rmse_value = rmse(preds, gts);
  if (fref) {
    const SentinelMean pm = sentinel_mean(psnrs);
    report.psnr_mean = pm.mean;
    report.psnr_infinite = pm.infinite;
    const SentinelMean sm = sentinel_mean(ssims);
    report.ssim_mean = sm.mean;
  }
  if (bundle.bmg) {
    if (with_profile) {
      const BmgProfile prof = profile_bmg(*bundle.bmg);
      report.bmg_params = prof.param_count;
      report.bmg_latency_ms = prof.latency_ms;
    } else {
      report.bmg_params = bundle.bmg->param_count();
    }
  }
  return report;
}

}  // namespace brokercc
