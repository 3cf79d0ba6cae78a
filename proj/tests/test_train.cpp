#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "brokercc/data.hpp"
#include "brokercc/error.hpp"
#include "brokercc/train.hpp"
#include "helpers.hpp"

using namespace brokercc;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const std::string& tag) {
  fs::path p = fs::temp_directory_path() / ("brokercc_train_" + tag);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

/// A small desk-scale dataset shared by the training tests.
const fs::path& dataset_root() {
  static const fs::path root = [] {
    SynthSpec spec;
    spec.n_images = 8;
    spec.height = spec.width = 64;
    spec.seed = 71;
    spec.misalign_px = 2.f;
    const fs::path r = temp_dir("dataset");
    synth_generate(spec, r);
    return r;
  }();
  return root;
}

TrainConfig quick_cfg(std::uint64_t seed, int epochs, int max_steps) {
  TrainConfig cfg = TrainConfig::desk();
  cfg.seed = seed;
  cfg.max_epochs = epochs;
  cfg.max_steps = max_steps;
  return cfg;
}

bool same_params(const ParamRegistry<float>& a, const ParamRegistry<float>& b) {
  if (a.params().size() != b.params().size()) return false;
  for (size_t i = 0; i < a.params().size(); ++i) {
    const auto& va = a.params()[i].var.value();
    const auto& vb = b.params()[i].var.value();
    if (a.params()[i].name != b.params()[i].name || va.dims() != vb.dims()) return false;
    for (std::int64_t k = 0; k < va.size(); ++k)
      if (va[k] != vb[k]) return false;
  }
  return true;
}

}  // namespace

TEST_CASE("teacher spec parsing") {
  CHECK(Teacher::parse("builtin").kind() == Teacher::Kind::kBuiltinAverage);
  CHECK(Teacher::parse("dir:/some/path").kind() == Teacher::Kind::kPrecomputedDir);
  CHECK_THROWS_AS(Teacher::parse("diffusion"), Error);
  CHECK_THROWS_AS(Teacher::parse(""), Error);
}

TEST_CASE("builtin teacher is the clipped pixel average") {
  ModalPair pair;
  pair.id = "p0";
  pair.rgb = ModalImage(4, 4, Modality::kRgb, 0.2f);
  pair.aux = ModalImage(4, 4, Modality::kThermal, 0.6f);
  pair.rgb.at(0, 0, 0) = 1.9f;  // out-of-range input must clip
  const ModalImage f = Teacher::builtin_average().fuse(pair);
  CHECK(f.h == 4);
  CHECK(f.w == 4);
  CHECK(f.at(1, 2, 2) == doctest::Approx(0.4f));
  CHECK(f.at(0, 0, 0) == doctest::Approx(1.0f));

  pair.aux = ModalImage(4, 8, Modality::kThermal, 0.6f);
  CHECK_THROWS_AS(Teacher::builtin_average().fuse(pair), Error);
}

TEST_CASE("precomputed teacher reads per-id images and validates them") {
  const fs::path dir = temp_dir("teacher");
  ModalPair pair;
  pair.id = "img0007";
  pair.rgb = ModalImage(16, 16, Modality::kRgb, 0.3f);
  pair.aux = ModalImage(16, 16, Modality::kThermal, 0.5f);

  const Teacher t = Teacher::parse("dir:" + dir.string());
  try {
    t.fuse(pair);
    FAIL("expected an error");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::kMissingFile);
    CHECK(std::string(e.what()).find("img0007") != std::string::npos);
  }

  ModalImage target(16, 16, Modality::kBroker, 0.25f);
  write_png((dir / "img0007.png").string(), target);
  const ModalImage got = t.fuse(pair);
  CHECK(got.at(0, 3, 3) == doctest::Approx(0.25f).epsilon(1e-2));

  write_png((dir / "img0007.png").string(), ModalImage(16, 8, Modality::kBroker, 0.25f));
  CHECK_THROWS_AS(t.fuse(pair), Error);
}

TEST_CASE("crop_flip_image matches the window applied to a pair") {
  Rng rng(72);
  ModalPair pair;
  pair.rgb = ModalImage(96, 96, Modality::kRgb);
  pair.aux = ModalImage(96, 96, Modality::kThermal);
  for (auto& v : pair.rgb.px) v = static_cast<float>(rng.uniform(0.0, 1.0));
  for (auto& v : pair.aux.px) v = static_cast<float>(rng.uniform(0.0, 1.0));
  for (int trial = 0; trial < 8; ++trial) {
    AugmentRecord rec;
    const ModalPair out = augment(pair, 64, 64, rng, &rec);
    const ModalImage via_record = crop_flip_image(pair.rgb, rec, 64, 64);
    CHECK(via_record.px == out.rgb.px);
  }
}

TEST_CASE("model bundle creation honors the ablation switches") {
  TrainConfig cfg = quick_cfg(1, 1, 1);
  ModelBundle full = ModelBundle::create(cfg);
  REQUIRE(full.bmg);
  REQUIRE(full.counter);

  cfg.ablations.no_broker = true;
  ModelBundle nb = ModelBundle::create(cfg);
  CHECK(nb.bmg == nullptr);
  const auto pairs = load_dataset(dataset_root(), Split::kTest);
  REQUIRE(!pairs.empty());
  const DensityMap d = nb.predict_density(pairs[0]);
  CHECK(d.h == 8);
  CHECK_THROWS_AS(nb.predict_broker(pairs[0]), Error);

  // Same seed, same weights.
  ModelBundle again = ModelBundle::create(quick_cfg(1, 1, 1));
  CHECK(same_params(full.bmg->params(), again.bmg->params()));
  CHECK(same_params(full.counter->params(), again.counter->params()));
}

TEST_CASE("distill runs, logs and improves on its first epoch") {
  const auto train_pairs = load_dataset(dataset_root(), Split::kTrain);
  const fs::path out = temp_dir("distill");
  TrainConfig cfg = quick_cfg(73, 3, 0);
  const std::string ckpt = (out / "bmg.ckpt").string();
  const std::string log = (out / "log.jsonl").string();
  const DistillResult r = run_distill(cfg, Teacher::builtin_average(), train_pairs, ckpt, log);

  REQUIRE(r.curve.size() == 3);
  CHECK(r.steps_run == 3 * static_cast<long>(train_pairs.size()));
  CHECK(r.best_mse <= r.curve.front().train_loss);
  CHECK(r.best_mse > 0.0);
  CHECK(fs::exists(ckpt));

  std::ifstream in(log);
  std::string line;
  int lines = 0;
  while (std::getline(in, line)) {
    const auto j = nlohmann::json::parse(line);
    CHECK(j["stage"] == "distill");
    CHECK(j["epoch"] == lines);
    CHECK(j["per_pixel_mse"].is_number());
    ++lines;
  }
  CHECK(lines == 3);

  SUBCASE("max_steps caps the run") {
    const DistillResult capped =
        run_distill(quick_cfg(73, 50, 4), Teacher::builtin_average(), train_pairs,
                    (out / "capped.ckpt").string());
    CHECK(capped.steps_run == 4);
  }
  SUBCASE("empty training set is rejected") {
    CHECK_THROWS_AS(run_distill(cfg, Teacher::builtin_average(), {}, ckpt), Error);
  }
}

TEST_CASE("distill trajectories are deterministic for a fixed seed") {
  const auto train_pairs = load_dataset(dataset_root(), Split::kTrain);
  const fs::path out = temp_dir("distill_det");
  const DistillResult a = run_distill(quick_cfg(74, 2, 0), Teacher::builtin_average(), train_pairs,
                                      (out / "a.ckpt").string());
  const DistillResult b = run_distill(quick_cfg(74, 2, 0), Teacher::builtin_average(), train_pairs,
                                      (out / "b.ckpt").string());
  REQUIRE(a.curve.size() == b.curve.size());
  for (size_t i = 0; i < a.curve.size(); ++i)
    CHECK(a.curve[i].train_loss == b.curve[i].train_loss);

  std::ifstream f1((out / "a.ckpt").string(), std::ios::binary);
  std::ifstream f2((out / "b.ckpt").string(), std::ios::binary);
  std::ostringstream s1, s2;
  s1 << f1.rdbuf();
  s2 << f2.rdbuf();
  CHECK(s1.str() == s2.str());
}

TEST_CASE("finetune requires a BMG checkpoint unless ablated away") {
  const auto train_pairs = load_dataset(dataset_root(), Split::kTrain);
  const auto test_pairs = load_dataset(dataset_root(), Split::kTest);
  TrainConfig cfg = quick_cfg(75, 1, 2);
  CHECK_THROWS_AS(run_finetune(cfg, train_pairs, test_pairs, "", (temp_dir("ft0") / "m.ckpt").string()),
                  Error);
}

TEST_CASE("finetune end to end, with freeze_bmg keeping BMG weights bit-exact") {
  const auto train_pairs = load_dataset(dataset_root(), Split::kTrain);
  const auto test_pairs = load_dataset(dataset_root(), Split::kTest);
  const fs::path out = temp_dir("finetune");

  TrainConfig cfg = quick_cfg(76, 2, 0);
  const std::string bmg_ckpt = (out / "bmg.ckpt").string();
  run_distill(quick_cfg(76, 1, 0), Teacher::builtin_average(), train_pairs, bmg_ckpt);

  cfg.ablations.freeze_bmg = true;
  const std::string full_ckpt = (out / "full.ckpt").string();
  const std::string log = (out / "ft.jsonl").string();
  const FinetuneResult r = run_finetune(cfg, train_pairs, test_pairs, bmg_ckpt, full_ckpt, log);
  REQUIRE(r.trajectory.size() == 2);
  CHECK(r.steps_run == 2 * static_cast<long>(train_pairs.size()));
  CHECK(r.bmg_forward_calls > 0);
  CHECK(std::isfinite(r.best_game0));
  CHECK(fs::exists(full_ckpt));

  // Frozen BMG: weights in the full checkpoint equal the distilled ones.
  ModelBundle tuned = ModelBundle::from_checkpoint(full_ckpt);
  REQUIRE(tuned.bmg);
  BrokerGenerator<float> reference(cfg.bmg, 0);
  auto* reg = &reference.params();
  load_checkpoint<float>(bmg_ckpt, {reg});
  CHECK(same_params(tuned.bmg->params(), reference.params()));

  std::ifstream in(log);
  std::string line;
  int lines = 0;
  while (std::getline(in, line)) {
    const auto j = nlohmann::json::parse(line);
    CHECK(j["stage"] == "finetune");
    ++lines;
  }
  CHECK(lines == 2);
}

TEST_CASE("no_broker finetune never touches a BMG") {
  const auto train_pairs = load_dataset(dataset_root(), Split::kTrain);
  const auto test_pairs = load_dataset(dataset_root(), Split::kTest);
  TrainConfig cfg = quick_cfg(77, 1, 3);
  cfg.ablations.no_broker = true;
  const FinetuneResult r = run_finetune(cfg, train_pairs, test_pairs, "",
                                        (temp_dir("ftnb") / "m.ckpt").string());
  CHECK(r.bmg_forward_calls == 0);
  CHECK(r.steps_run == 3);
}

TEST_CASE("full checkpoint round trip is bit-exact and preserves the forward pass") {
  const auto pairs = load_dataset(dataset_root(), Split::kTest);
  TrainConfig cfg = quick_cfg(78, 1, 1);
  cfg.stage = Stage::kFinetune;
  cfg.ablations.no_cma = true;  // exercise switch persistence too
  ModelBundle a = ModelBundle::create(cfg);
  const DensityMap before = a.predict_density(pairs[0]);

  const fs::path out = temp_dir("ckpt");
  const std::string path = (out / "full.ckpt").string();
  a.save_full(path, "finetune", 5, {{"game0", 1.5}});

  ModelBundle b = ModelBundle::from_checkpoint(path);
  CHECK(b.cfg.seed == cfg.seed);
  CHECK(b.cfg.ablations.no_cma);
  CHECK(b.cfg.crop == cfg.crop);
  REQUIRE(b.bmg);
  CHECK(same_params(a.bmg->params(), b.bmg->params()));
  CHECK(same_params(a.counter->params(), b.counter->params()));
  const DensityMap after = b.predict_density(pairs[0]);
  CHECK(before.v == after.v);

  const auto header = read_checkpoint_header(path);
  CHECK(header["stage"] == "finetune");
  CHECK(header["epoch"] == 5);
  CHECK(header["metrics"]["game0"] == 1.5);
}

TEST_CASE("checkpoint loader rejects garbage and missing files") {
  CHECK_THROWS_AS(read_checkpoint_header("/nonexistent/x.ckpt"), Error);
  const fs::path out = temp_dir("badckpt");
  std::ofstream((out / "junk.ckpt").string(), std::ios::binary) << "not a checkpoint at all";
  try {
    read_checkpoint_header((out / "junk.ckpt").string());
    FAIL("expected an error");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::kMalformed);
  }
  CHECK_THROWS_AS(ModelBundle::from_checkpoint((out / "junk.ckpt").string()), Error);
}

TEST_CASE("evaluate_dataset fills the report") {
  const auto test_pairs = load_dataset(dataset_root(), Split::kTest);
  ModelBundle bundle = ModelBundle::create(quick_cfg(79, 1, 1));
  const EvalReport r = evaluate_dataset(bundle, test_pairs, dataset_root(), true);
  CHECK(r.n_images == static_cast<int>(test_pairs.size()));
  for (int lvl = 0; lvl <= 3; ++lvl) {
    REQUIRE(r.game_levels.count(lvl) == 1);
    CHECK(r.game_levels.at(lvl) >= 0.0);
  }
  CHECK(r.rmse_value >= 0.0);
  REQUIRE(r.psnr_mean.has_value());  // synth datasets ship fusion_ref
  REQUIRE(r.ssim_mean.has_value());
  CHECK(*r.ssim_mean <= 1.0);
  CHECK(r.bmg_params > 0);
  CHECK(r.bmg_latency_ms > 0.0);
  CHECK_THROWS_AS(evaluate_dataset(bundle, {}, dataset_root()), Error);
}
