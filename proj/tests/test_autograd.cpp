#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "brokercc/graph.hpp"
#include "brokercc/nn.hpp"
#include "helpers.hpp"

using namespace brokercc;
using brokercc::testing::grad_check;
using brokercc::testing::random_tensor;

namespace {

constexpr double kTol = 1e-6;

Var<double> leafp(Tensor<double> t) { return Var<double>::leaf(std::move(t), true); }

}  // namespace

TEST_CASE("elementwise ops match finite differences") {
  Rng rng(11);
  Var<double> a = leafp(random_tensor({3, 4, 5}, rng));
  Var<double> b = leafp(random_tensor({3, 4, 5}, rng));

  CHECK(grad_check([&] { return sum(a + b); }, a, rng) < kTol);
  CHECK(grad_check([&] { return sum(a - b); }, b, rng) < kTol);
  CHECK(grad_check([&] { return sum(a * b); }, a, rng) < kTol);
  CHECK(grad_check([&] { return sum(scale(a, 2.5)); }, a, rng) < kTol);
  CHECK(grad_check([&] { return sum(add_scalar(a, -0.3)); }, a, rng) < kTol);
  CHECK(grad_check([&] { return sum(rsub_scalar(1.0, a)); }, a, rng) < kTol);
  CHECK(grad_check([&] { return mean(a * a); }, a, rng) < kTol);
  CHECK(grad_check([&] { return sum(sigmoid(a)); }, a, rng) < kTol);
}

TEST_CASE("relu and abs away from their kinks") {
  Rng rng(12);
  // Keep magnitudes above the FD step so the kink is never crossed.
  Tensor<double> t = random_tensor({40}, rng);
  for (std::int64_t i = 0; i < t.size(); ++i) t[i] += t[i] >= 0 ? 0.2 : -0.2;
  Var<double> x = leafp(std::move(t));
  CHECK(grad_check([&] { return sum(relu(x)); }, x, rng, 20) < kTol);
  CHECK(grad_check([&] { return sum(abs(x)); }, x, rng, 20) < kTol);
}

TEST_CASE("matmul value agrees with a naive triple loop") {
  Rng rng(13);
  Var<double> a = leafp(random_tensor({4, 6}, rng));
  Var<double> b = leafp(random_tensor({6, 3}, rng));
  Var<double> c = matmul(a, b);
  for (int i = 0; i < 4; ++i)
    for (int j = 0; j < 3; ++j) {
      double s = 0.0;
      for (int k = 0; k < 6; ++k) s += a.value()[i * 6 + k] * b.value()[k * 3 + j];
      CHECK(c.value()[i * 3 + j] == doctest::Approx(s).epsilon(1e-12));
    }
}

TEST_CASE("matmul/linear gradients") {
  Rng rng(14);
  Var<double> a = leafp(random_tensor({4, 6}, rng));
  Var<double> b = leafp(random_tensor({6, 3}, rng));
  Var<double> w = leafp(random_tensor({6, 3}, rng));
  Var<double> bias = leafp(random_tensor({3}, rng));
  CHECK(grad_check([&] { return sum(matmul(a, b) * matmul(a, b)); }, a, rng) < kTol);
  CHECK(grad_check([&] { return sum(matmul(a, b) * matmul(a, b)); }, b, rng) < kTol);
  CHECK(grad_check([&] { return sum(linear(a, w, bias)); }, w, rng) < kTol);
  CHECK(grad_check([&] { return sum(linear(a, w, bias)); }, bias, rng) < kTol);
  CHECK(grad_check([&] { return mean(linear(a, w, bias) * linear(a, w, bias)); }, a, rng) < kTol);
}

TEST_CASE("softmax rows sum to one and differentiate") {
  Rng rng(15);
  Var<double> x = leafp(random_tensor({5, 7}, rng, -3.0, 3.0));
  Var<double> s = softmax_rows(x);
  for (int r = 0; r < 5; ++r) {
    double rs = 0.0;
    for (int c = 0; c < 7; ++c) rs += s.value()[r * 7 + c];
    CHECK(rs == doctest::Approx(1.0).epsilon(1e-12));
  }
  Var<double> w = Var<double>::leaf(random_tensor({5, 7}, rng));
  CHECK(grad_check([&] { return sum(softmax_rows(x) * w); }, x, rng, 16) < kTol);
}

TEST_CASE("layer_norm gradients for input and affine parameters") {
  Rng rng(16);
  Var<double> x = leafp(random_tensor({4, 8}, rng));
  Var<double> g = leafp(random_tensor({8}, rng, 0.5, 1.5));
  Var<double> b = leafp(random_tensor({8}, rng));
  Var<double> w = Var<double>::leaf(random_tensor({4, 8}, rng));
  auto build = [&] { return sum(layer_norm(x, g, b) * w); };
  CHECK(grad_check(build, x, rng, 16) < 1e-5);
  CHECK(grad_check(build, g, rng, 8) < kTol);
  CHECK(grad_check(build, b, rng, 8) < kTol);
}

TEST_CASE("conv2d gradients across stride and padding") {
  Rng rng(17);
  for (auto [stride, pad] : {std::pair{1, 1}, std::pair{2, 1}, std::pair{1, 0}}) {
    Var<double> x = leafp(random_tensor({2, 8, 8}, rng));
    Var<double> w = leafp(random_tensor({3, 2, 3, 3}, rng));
    Var<double> b = leafp(random_tensor({3}, rng));
    auto build = [&, stride = stride, pad = pad] {
      Var<double> y = conv2d(x, w, b, stride, pad);
      return sum(y * y);
    };
    CHECK(grad_check(build, x, rng, 10) < kTol);
    CHECK(grad_check(build, w, rng, 10) < kTol);
    CHECK(grad_check(build, b, rng, 3) < kTol);
  }
}

TEST_CASE("conv2d value matches direct correlation") {
  Rng rng(18);
  Var<double> x = leafp(random_tensor({2, 5, 5}, rng));
  Var<double> w = leafp(random_tensor({1, 2, 3, 3}, rng));
  Var<double> b = leafp(random_tensor({1}, rng));
  Var<double> y = conv2d(x, w, b, 1, 1);
  REQUIRE(y.value().dim(1) == 5);
  for (int oy = 0; oy < 5; ++oy)
    for (int ox = 0; ox < 5; ++ox) {
      double s = b.value()[0];
      for (int c = 0; c < 2; ++c)
        for (int ky = 0; ky < 3; ++ky)
          for (int kx = 0; kx < 3; ++kx) {
            const int iy = oy + ky - 1, ix = ox + kx - 1;
            if (iy < 0 || iy >= 5 || ix < 0 || ix >= 5) continue;
            s += x.value()[(c * 5 + iy) * 5 + ix] * w.value()[(c * 3 + ky) * 3 + kx];
          }
      CHECK(y.value()[oy * 5 + ox] == doctest::Approx(s).epsilon(1e-12));
    }
}

TEST_CASE("max_pool2 and bilinear upsampling gradients") {
  Rng rng(19);
  // Spread values so pooling never ties within the FD step.
  Tensor<double> t({2, 6, 6});
  for (std::int64_t i = 0; i < t.size(); ++i) t[i] = 0.01 * static_cast<double>((i * 37) % 101);
  Var<double> x = leafp(std::move(t));
  CHECK(grad_check([&] { return sum(max_pool2(x) * max_pool2(x)); }, x, rng, 12) < kTol);

  Var<double> y = leafp(random_tensor({2, 4, 4}, rng));
  Var<double> w = Var<double>::leaf(random_tensor({2, 7, 9}, rng));
  CHECK(grad_check([&] { return sum(upsample_bilinear(y, 7, 9) * w); }, y, rng, 12) < kTol);
}

TEST_CASE("upsample_bilinear is the identity at equal size") {
  Rng rng(20);
  Var<double> x = Var<double>::leaf(random_tensor({3, 5, 5}, rng));
  Var<double> y = upsample_bilinear(x, 5, 5);
  for (std::int64_t i = 0; i < x.value().size(); ++i)
    CHECK(y.value()[i] == doctest::Approx(x.value()[i]).epsilon(1e-12));
}

TEST_CASE("shape ops route gradients faithfully") {
  Rng rng(21);
  Var<double> x = leafp(random_tensor({3, 4, 4}, rng));
  Var<double> m = leafp(random_tensor({6, 8}, rng));
  CHECK(grad_check([&] { return sum(reshape(x, {4, 12}) * reshape(x, {4, 12})); }, x, rng) < kTol);
  CHECK(grad_check([&] { return sum(transpose(m) * transpose(m)); }, m, rng) < kTol);
  CHECK(grad_check([&] { return sum(slice_cols(m, 2, 6) * slice_cols(m, 2, 6)); }, m, rng) < kTol);
  Var<double> m2 = leafp(random_tensor({6, 3}, rng));
  auto cc = [&] {
    Var<double> c = concat_cols(std::vector<Var<double>>{m, m2});
    return sum(c * c);
  };
  CHECK(grad_check(cc, m, rng) < kTol);
  CHECK(grad_check(cc, m2, rng) < kTol);
  Var<double> i1 = leafp(random_tensor({2, 4, 4}, rng));
  Var<double> i2 = leafp(random_tensor({3, 4, 4}, rng));
  auto ch = [&] {
    Var<double> c = concat_channels(i1, i2);
    return sum(c * c);
  };
  CHECK(grad_check(ch, i1, rng) < kTol);
  CHECK(grad_check(ch, i2, rng) < kTol);
}

TEST_CASE("add_n_symmetric is exactly permutation invariant") {
  Rng rng(22);
  // Values chosen so naive left-to-right float addition would differ by
  // rounding across orders; the sorted accumulation must not.
  Tensor<float> a({64}), b({64}), c({64});
  for (int i = 0; i < 64; ++i) {
    a[i] = static_cast<float>(rng.uniform(-1, 1)) * 1e-4f;
    b[i] = static_cast<float>(rng.uniform(-1, 1)) * 1e4f;
    c[i] = static_cast<float>(rng.uniform(-1, 1));
  }
  Var<float> va = Var<float>::leaf(a), vb = Var<float>::leaf(b), vc = Var<float>::leaf(c);
  std::vector<std::vector<Var<float>>> orders = {
      {va, vb, vc}, {vc, va, vb}, {vb, vc, va}, {vc, vb, va}};
  Var<float> first = add_n_symmetric(orders[0]);
  for (size_t o = 1; o < orders.size(); ++o) {
    Var<float> other = add_n_symmetric(orders[o]);
    for (int i = 0; i < 64; ++i) CHECK(first.value()[i] == other.value()[i]);
  }
}

TEST_CASE("add_n_symmetric gradients pass through") {
  Rng rng(23);
  Var<double> a = leafp(random_tensor({10}, rng));
  Var<double> b = leafp(random_tensor({10}, rng));
  Var<double> c = leafp(random_tensor({10}, rng));
  auto build = [&] {
    Var<double> s = add_n_symmetric(std::vector<Var<double>>{a, b, c});
    return sum(s * s);
  };
  CHECK(grad_check(build, a, rng) < kTol);
  CHECK(grad_check(build, c, rng) < kTol);
}

TEST_CASE("gradient accumulation over shared subexpressions") {
  Rng rng(24);
  Var<double> x = leafp(random_tensor({6}, rng));
  // x appears three times; accumulation must add all paths.
  CHECK(grad_check([&] { return sum(x * x) + sum(x * x) + mean(x); }, x, rng) < kTol);
}

TEST_CASE("backward requires a scalar") {
  Var<double> x = leafp(Tensor<double>({2, 2}));
  Var<double> y = x + x;
  CHECK_THROWS_AS(y.backward(), std::logic_error);
}
