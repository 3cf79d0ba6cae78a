#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <vector>

#include "brokercc/error.hpp"
#include "brokercc/losses.hpp"
#include "helpers.hpp"

using namespace brokercc;
using brokercc::testing::random_tensor;

namespace {

PointAnnotationSet points(std::initializer_list<Point2f> pts) {
  PointAnnotationSet a;
  a.points = pts;
  return a;
}

/// Direct unnormalized-Gaussian-then-normalize recomputation, no
/// max-subtraction.
double oracle_posterior(const PointAnnotationSet& ann, int i, int y, int x, double scale,
                        double sigma) {
  const double sg = sigma * scale;
  const double px = x + 0.5, py = y + 0.5;
  double num = 0.0, den = 0.0;
  for (size_t n = 0; n < ann.points.size(); ++n) {
    const double dx = px - ann.points[n].x * scale;
    const double dy = py - ann.points[n].y * scale;
    const double g = std::exp(-(dx * dx + dy * dy) / (2.0 * sg * sg));
    if (static_cast<int>(n) == i) num = g;
    den += g;
  }
  return num / den;
}

}  // namespace

TEST_CASE("single annotation: posterior is identically one") {
  const auto post = build_posteriors(points({{3.7f, 2.1f}}), 8, 8, 1.0, 2.0);
  REQUIRE(post.m == 1);
  for (int y = 0; y < 8; ++y)
    for (int x = 0; x < 8; ++x) CHECK(post.at(0, y, x) == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("symmetric annotations split a central pixel evenly") {
  // Pixel (4,4) has center (4.5,4.5); the two points are mirror images.
  const auto post = build_posteriors(points({{2.5f, 4.5f}, {6.5f, 4.5f}}), 9, 9, 1.0, 2.0);
  CHECK(post.at(0, 4, 4) == doctest::Approx(0.5).epsilon(1e-12));
  CHECK(post.at(1, 4, 4) == doctest::Approx(0.5).epsilon(1e-12));
}

TEST_CASE("posteriors match the brute-force oracle") {
  Rng rng(31);
  for (int trial = 0; trial < 10; ++trial) {
    PointAnnotationSet ann;
    for (int i = 0; i < 3; ++i)
      ann.points.push_back({static_cast<float>(rng.uniform(0.0, 8.0)),
                            static_cast<float>(rng.uniform(0.0, 8.0))});
    const double scale = trial % 2 == 0 ? 1.0 : 0.5;
    const double sigma = rng.uniform(1.0, 4.0);
    const auto post = build_posteriors(ann, 8, 8, scale, sigma);
    for (int i = 0; i < 3; ++i)
      for (int y = 0; y < 8; ++y)
        for (int x = 0; x < 8; ++x)
          CHECK(post.at(i, y, x) ==
                doctest::Approx(oracle_posterior(ann, i, y, x, scale, sigma)).epsilon(1e-9));
  }
}

TEST_CASE("partition of unity on 100 random annotation sets") {
  Rng rng(32);
  for (int trial = 0; trial < 100; ++trial) {
    PointAnnotationSet ann;
    const int m = rng.uniform_int(1, 12);
    for (int i = 0; i < m; ++i)
      ann.points.push_back({static_cast<float>(rng.uniform(0.0, 64.0)),
                            static_cast<float>(rng.uniform(0.0, 64.0))});
    const auto post = build_posteriors(ann, 8, 8, 1.0 / 8.0, rng.uniform(2.0, 16.0));
    double worst = 0.0;
    for (int y = 0; y < 8; ++y)
      for (int x = 0; x < 8; ++x) {
        double s = 0.0;
        for (int i = 0; i < m; ++i) {
          const double p = post.at(i, y, x);
          CHECK(p >= 0.0);
          CHECK(p <= 1.0);
          s += p;
        }
        worst = std::max(worst, std::abs(s - 1.0));
      }
    CHECK(worst < 1e-6);
  }
}

TEST_CASE("sigma and grid validation") {
  CHECK_THROWS_AS(build_posteriors(points({{1.f, 1.f}}), 8, 8, 1.0, 0.0), Error);
  CHECK_THROWS_AS(build_posteriors(points({{1.f, 1.f}}), 8, 8, 1.0, -2.0), Error);
  CHECK(build_posteriors(points({}), 8, 8, 1.0, 2.0).m == 0);
}

TEST_CASE("bayesian loss fixed points") {
  DensityMap d(4, 4, 1.f);
  SUBCASE("M=1 with unit total mass gives zero loss") {
    d.at(1, 2) = 0.25f;
    d.at(3, 3) = 0.75f;
    const auto post = build_posteriors(points({{2.f, 2.f}}), 4, 4, 1.0, 2.0);
    CHECK(bayesian_loss(d, post) == doctest::Approx(0.0).epsilon(1e-9));
  }
  SUBCASE("M=0 returns total predicted mass") {
    const auto post = build_posteriors(points({}), 4, 4, 1.0, 2.0);
    CHECK(bayesian_loss(d, post) == 0.0);
    d.at(0, 0) = 1.5f;
    d.at(2, 1) = 0.5f;
    CHECK(bayesian_loss(d, post) == doctest::Approx(2.0).epsilon(1e-9));
  }
}

TEST_CASE("bayesian loss matches the scalar script for M=2") {
  PointAnnotationSet ann = points({{1.2f, 0.7f}, {2.9f, 3.1f}});
  const auto post = build_posteriors(ann, 4, 4, 1.0, 1.5);
  DensityMap d(4, 4, 1.f);
  for (auto& v : d.v) v = 2.f / 16.f;  // uniform mass 2
  double e1 = 0.0, e2 = 0.0;
  for (int y = 0; y < 4; ++y)
    for (int x = 0; x < 4; ++x) {
      e1 += post.at(0, y, x) * d.at(y, x);
      e2 += post.at(1, y, x) * d.at(y, x);
    }
  CHECK(bayesian_loss(d, post) ==
        doctest::Approx(std::abs(1.0 - e1) + std::abs(1.0 - e2)).epsilon(1e-12));
}

TEST_CASE("graph loss equals the numeric loss and differentiates") {
  Rng rng(33);
  PointAnnotationSet ann;
  for (int i = 0; i < 4; ++i)
    ann.points.push_back({static_cast<float>(rng.uniform(0.0, 8.0)),
                          static_cast<float>(rng.uniform(0.0, 8.0))});
  const auto post = build_posteriors(ann, 8, 8, 1.0, 2.0);

  Tensor<double> dt({1, 8, 8});
  for (std::int64_t i = 0; i < dt.size(); ++i) dt[i] = rng.uniform(0.0, 0.2);
  Var<double> density = Var<double>::leaf(dt, true);

  DensityMap dm(8, 8, 1.f);
  for (std::int64_t i = 0; i < dt.size(); ++i) dm.v[static_cast<size_t>(i)] = static_cast<float>(dt[i]);
  Var<double> loss = bayesian_loss_graph(density, post);
  CHECK(loss.value()[0] == doctest::Approx(bayesian_loss(dm, post)).epsilon(1e-6));

  // FD on density entries; |.| arguments here are far from the kink.
  const double err = brokercc::testing::grad_check(
      [&] { return bayesian_loss_graph(density, post); }, density, rng, 16, 1e-5);
  CHECK(err < 1e-4);
}

TEST_CASE("translation invariance away from the boundary") {
  const double sigma = 1.0;
  DensityMap base(16, 16, 1.f);
  PointAnnotationSet ann = points({{6.3f, 6.8f}, {8.1f, 7.4f}});
  // Density mass concentrated near the annotations, >= 6 sigma from edges.
  for (int y = 5; y < 10; ++y)
    for (int x = 5; x < 10; ++x) base.at(y, x) = 0.08f;
  const double l0 = bayesian_loss(base, build_posteriors(ann, 16, 16, 1.0, sigma));

  const int tx = 3, ty = 2;
  DensityMap moved(16, 16, 1.f);
  for (int y = 5; y < 10; ++y)
    for (int x = 5; x < 10; ++x) moved.at(y + ty, x + tx) = 0.08f;
  PointAnnotationSet ann2;
  for (const auto& p : ann.points) ann2.points.push_back({p.x + tx, p.y + ty});
  const double l1 = bayesian_loss(moved, build_posteriors(ann2, 16, 16, 1.0, sigma));
  CHECK(std::abs(l0 - l1) < 1e-6);
}

TEST_CASE("sigma to zero approaches the nearest-annotation partition") {
  PointAnnotationSet ann = points({{2.f, 2.f}, {6.f, 5.f}, {1.f, 7.f}});
  const auto post = build_posteriors(ann, 8, 8, 1.0, 0.1);
  for (int y = 0; y < 8; ++y)
    for (int x = 0; x < 8; ++x) {
      // Nearest annotation to the pixel center.
      int nearest = 0;
      double best = 1e300, second = 1e300;
      for (size_t i = 0; i < ann.points.size(); ++i) {
        const double dx = x + 0.5 - ann.points[i].x, dy = y + 0.5 - ann.points[i].y;
        const double d2 = dx * dx + dy * dy;
        if (d2 < best) {
          second = best;
          best = d2;
          nearest = static_cast<int>(i);
        } else {
          second = std::min(second, d2);
        }
      }
      if (second - best < 0.5) continue;  // equidistant pixels split mass
      CHECK(post.at(nearest, y, x) == doctest::Approx(1.0).epsilon(1e-6));
    }
}

TEST_CASE("distill loss values") {
  ModalImage a(1, 1, Modality::kBroker), b(1, 1, Modality::kBroker);
  a.px = {0.5f, 0.f, 0.f};
  b.px = {0.f, 0.f, 0.f};
  CHECK(distill_loss(a, a).raw_sum == 0.0);
  CHECK(distill_loss(a, b).raw_sum == doctest::Approx(0.25).epsilon(1e-12));
  CHECK(distill_loss(a, b).per_pixel_mean == doctest::Approx(0.25 / 3.0).epsilon(1e-12));

  Rng rng(34);
  ModalImage r1(32, 32, Modality::kBroker), r2(32, 32, Modality::kBroker);
  for (auto& v : r1.px) v = static_cast<float>(rng.uniform(0.0, 1.0));
  for (auto& v : r2.px) v = static_cast<float>(rng.uniform(0.0, 1.0));
  double s = 0.0;
  for (size_t i = 0; i < r1.px.size(); ++i) {
    const double d = static_cast<double>(r1.px[i]) - static_cast<double>(r2.px[i]);
    s += d * d;
  }
  CHECK(distill_loss(r1, r2).raw_sum == doctest::Approx(s).epsilon(1e-9));

  ModalImage wrong(32, 16, Modality::kBroker);
  CHECK_THROWS_AS(distill_loss(r1, wrong), Error);
}

TEST_CASE("distill graph loss equals the numeric raw sum and differentiates") {
  Rng rng(35);
  ModalImage teacher(32, 32, Modality::kBroker);
  for (auto& v : teacher.px) v = static_cast<float>(rng.uniform(0.0, 1.0));
  Var<double> student = Var<double>::leaf(random_tensor({3, 32, 32}, rng, 0.0, 1.0), true);
  Var<double> loss = distill_loss_graph(student, teacher);
  ModalImage si = ModalImage::from_tensor(student.value(), Modality::kBroker);
  CHECK(loss.value()[0] == doctest::Approx(distill_loss(si, teacher).raw_sum).epsilon(1e-4));
  const double err = brokercc::testing::grad_check(
      [&] { return distill_loss_graph(student, teacher); }, student, rng, 12, 1e-6);
  CHECK(err < 1e-6);
}

TEST_CASE("graph loss shape mismatch is rejected") {
  Var<double> density = Var<double>::leaf(Tensor<double>({1, 4, 4}), true);
  const auto post = build_posteriors(points({{1.f, 1.f}}), 8, 8, 1.0, 2.0);
  CHECK_THROWS(bayesian_loss_graph(density, post));
  DensityMap d(4, 4, 1.f);
  CHECK_THROWS_AS(bayesian_loss(d, post), Error);
}
