#include <benchmark/benchmark.h>

#include "brokercc/bmg.hpp"
#include "brokercc/counter.hpp"
#include "brokercc/losses.hpp"
#include "brokercc/metrics.hpp"
#include "brokercc/train.hpp"

using namespace brokercc;

namespace {

Var<float> test_image(int n, std::uint64_t salt) {
  Tensor<float> t({3, n, n});
  for (std::int64_t i = 0; i < t.size(); ++i)
    t[i] = static_cast<float>(((static_cast<std::uint64_t>(i) + salt) * 2654435761ULL % 1000) / 1000.0);
  return Var<float>::leaf(std::move(t));
}

ModalImage test_modal(int n, Modality tag, std::uint64_t salt) {
  ModalImage im(n, n, tag);
  for (size_t i = 0; i < im.px.size(); ++i) im.px[i] = static_cast<float>((i + salt) % 255) / 255.f;
  return im;
}

void BM_BmgForwardTiny(benchmark::State& state) {
  BrokerGenerator<float> gen(BmgConfig::tiny(), 1);
  const Var<float> rgb = test_image(gen.config().input_size(), 0);
  const Var<float> aux = test_image(gen.config().input_size(), 7);
  for (auto _ : state) benchmark::DoNotOptimize(gen.forward(rgb, aux));
}
BENCHMARK(BM_BmgForwardTiny)->Unit(benchmark::kMillisecond);

void BM_BmgForwardDefault(benchmark::State& state) {
  BrokerGenerator<float> gen(BmgConfig{}, 1);
  const Var<float> rgb = test_image(gen.config().input_size(), 0);
  const Var<float> aux = test_image(gen.config().input_size(), 7);
  for (auto _ : state) benchmark::DoNotOptimize(gen.forward(rgb, aux));
}
BENCHMARK(BM_BmgForwardDefault)->Unit(benchmark::kMillisecond);

void BM_TeacherFuse(benchmark::State& state) {
  const int n = static_cast<int>(state.range(0));
  ModalPair pair;
  pair.id = "bench";
  pair.rgb = test_modal(n, Modality::kRgb, 0);
  pair.aux = test_modal(n, Modality::kThermal, 9);
  const Teacher t = Teacher::builtin_average();
  for (auto _ : state) benchmark::DoNotOptimize(t.fuse(pair));
}
BENCHMARK(BM_TeacherFuse)->Arg(64)->Arg(224)->Unit(benchmark::kMicrosecond);

void BM_Ssim(benchmark::State& state) {
  const int n = static_cast<int>(state.range(0));
  const ModalImage a = test_modal(n, Modality::kRgb, 0);
  const ModalImage b = test_modal(n, Modality::kRgb, 3);
  for (auto _ : state) benchmark::DoNotOptimize(ssim(a, b));
}
BENCHMARK(BM_Ssim)->Arg(64)->Arg(224)->Unit(benchmark::kMillisecond);

void BM_BuildPosteriors(benchmark::State& state) {
  PointAnnotationSet ann;
  for (int i = 0; i < 64; ++i)
    ann.points.push_back({static_cast<float>((i * 37) % 224), static_cast<float>((i * 53) % 224)});
  for (auto _ : state) benchmark::DoNotOptimize(build_posteriors(ann, 28, 28, 1.0 / 8.0, 8.0));
}
BENCHMARK(BM_BuildPosteriors)->Unit(benchmark::kMicrosecond);

void BM_DensityForwardTiny(benchmark::State& state) {
  CountingNetwork<float> net(ExtractorConfig::tiny(), 2);
  const Var<float> img = test_image(64, 0);
  for (auto _ : state) benchmark::DoNotOptimize(net.density_forward(img, img, img));
}
BENCHMARK(BM_DensityForwardTiny)->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
