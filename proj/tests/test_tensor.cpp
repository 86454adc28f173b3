#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <random>

#include "oracles.hpp"
#include "segnetr/ops.hpp"
#include "segnetr/optim.hpp"

using namespace segnetr;
using oracle::random;

namespace {

template <typename T>
Tensor<T> leaf(Shape s, std::vector<T> v) {
  Tensor<T> t(std::move(s), std::move(v));
  t.set_requires_grad(true);
  return t;
}

double max_abs_diff(std::span<const double> a, std::span<const double> b) {
  REQUIRE(a.size() == b.size());
  double m = 0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

}  // namespace

TEST_CASE("tensor construction and aliasing") {
  Tensor<float> a(Shape{2, 3}, 1.5f);
  CHECK(a.numel() == 6);
  CHECK(a.dim(1) == 3);
  CHECK_THROWS_AS(a.dim(2), ShapeError);
  CHECK_THROWS_AS(Tensor<float>(Shape{2, 2}, std::vector<float>{1, 2, 3}), ShapeError);
  CHECK_THROWS_AS(a.item(), ShapeError);
  Tensor<float> b = a;
  b.data()[0] = 7;
  CHECK(a.data()[0] == 7);
  CHECK(b.same_storage(a));
  auto c = a.clone();
  c.data()[0] = 0;
  CHECK(a.data()[0] == 7);
  CHECK_FALSE(c.same_storage(a));
  CHECK(Tensor<double>::scalar(2.5).item() == 2.5);
}

TEST_CASE("conv2d matches a direct loop oracle") {
  std::mt19937_64 rng(11);
  struct Case {
    std::size_t N, C, H, W, O, K, stride, pad, groups;
  };
  for (const Case& c : {Case{2, 4, 7, 6, 6, 3, 1, 1, 1}, Case{1, 3, 9, 9, 4, 3, 2, 1, 1}, Case{2, 4, 5, 5, 8, 3, 1, 1, 2},
                       Case{1, 6, 6, 6, 6, 3, 1, 1, 6}, Case{1, 5, 4, 4, 3, 1, 1, 0, 1}, Case{1, 2, 8, 8, 2, 5, 1, 2, 2}}) {
    auto x = random<double>(rng, {c.N, c.C, c.H, c.W});
    auto w = random<double>(rng, {c.O, c.C / c.groups, c.K, c.K});
    auto b = random<double>(rng, {c.O});
    std::vector<double> bv(b.data().begin(), b.data().end());
    auto y = conv2d(x, w, std::optional<Tensor<double>>(b), {c.stride, c.pad, c.groups});
    const auto ref = oracle::conv2d(x, w, &bv, c.stride, c.pad, c.groups);
    CHECK(max_abs_diff(y.data(), ref) < 1e-12);
  }
}

TEST_CASE("conv2d hand examples") {
  // 1x1 identity weight returns the input.
  std::mt19937_64 rng(3);
  auto x = random<double>(rng, {1, 3, 4, 4});
  Tensor<double> eye(Shape{3, 3, 1, 1});
  for (std::size_t i = 0; i < 3; ++i) eye.data()[i * 3 + i] = 1;
  auto y = conv2d(x, eye, std::optional<Tensor<double>>());
  CHECK(max_abs_diff(y.data(), x.data()) == 0);

  // Depthwise 3x3 box filter on ones with zero padding: 9 inside, 4 at corners, 6 on edges.
  Tensor<double> ones(Shape{1, 2, 5, 5}, 1.0);
  Tensor<double> box(Shape{2, 1, 3, 3}, 1.0);
  auto s = conv2d(ones, box, std::optional<Tensor<double>>(), {1, 1, 2});
  CHECK(s.data()[0] == 4);
  CHECK(s.data()[2] == 6);
  CHECK(s.data()[12] == 9);
  CHECK(s.data()[25 + 24] == 4);

  CHECK_THROWS_AS(conv2d(ones, Tensor<double>(Shape{2, 2, 3, 3}), std::optional<Tensor<double>>(), {1, 1, 2}),
                  ShapeError);
}

TEST_CASE("linear matches hand example and triple loop") {
  auto x = Tensor<double>(Shape{1, 2}, {1, 2});
  auto w = Tensor<double>(Shape{2, 2}, {1, 1, 1, -1});
  auto b = Tensor<double>(Shape{2}, {0, 0});
  auto y = linear(x, w, std::optional<Tensor<double>>(b));
  CHECK(y.data()[0] == 3);
  CHECK(y.data()[1] == -1);

  std::mt19937_64 rng(5);
  auto X = random<double>(rng, {3, 4, 7});
  auto Wt = random<double>(rng, {5, 7});
  auto Y = linear(X, Wt, std::optional<Tensor<double>>());
  CHECK(Y.shape() == Shape{3, 4, 5});
  double worst = 0;
  for (std::size_t r = 0; r < 12; ++r)
    for (std::size_t o = 0; o < 5; ++o) {
      double s = 0;
      for (std::size_t i = 0; i < 7; ++i) s += X.data()[r * 7 + i] * Wt.data()[o * 7 + i];
      worst = std::max(worst, std::abs(s - Y.data()[r * 5 + o]));
    }
  CHECK(worst < 1e-12);
  CHECK_THROWS_AS(linear(X, Tensor<double>(Shape{5, 6}), std::optional<Tensor<double>>()), ShapeError);
}

TEST_CASE("softmax") {
  auto u = softmax(Tensor<double>(Shape{4}, {2, 2, 2, 2}), 0);
  for (double v : u.data()) CHECK(v == doctest::Approx(0.25));
  auto big = softmax(Tensor<float>(Shape{2}, {1000.f, 1000.f}), 0);
  CHECK(big.data()[0] == doctest::Approx(0.5));
  CHECK(std::isfinite(big.data()[1]));
  auto r = softmax(Tensor<double>(Shape{2}, {0.0, std::log(3.0)}), 0);
  CHECK(r.data()[0] == doctest::Approx(0.25).epsilon(1e-12));
  CHECK(r.data()[1] == doctest::Approx(0.75).epsilon(1e-12));

  std::mt19937_64 rng(9);
  auto x = random<double>(rng, {3, 5, 4}, -5, 5);
  auto s = softmax(x, 1);
  for (std::size_t a = 0; a < 3; ++a)
    for (std::size_t c = 0; c < 4; ++c) {
      double tot = 0;
      for (std::size_t k = 0; k < 5; ++k) tot += s.data()[(a * 5 + k) * 4 + c];
      CHECK(tot == doctest::Approx(1.0).epsilon(1e-12));
    }
}

TEST_CASE("mean, batch_norm and layer_norm statistics") {
  auto m = mean(Tensor<double>(Shape{2, 3}, {1, 2, 3, 4, 5, 6}), 1, false);
  CHECK(m.shape() == Shape{2});
  CHECK(m.data()[0] == 2);
  CHECK(m.data()[1] == 5);

  std::mt19937_64 rng(21);
  auto x = random<double>(rng, {3, 2, 4, 5}, -2, 3);
  Tensor<double> gamma(Shape{2}, 1.0), beta(Shape{2}, 0.0), rm(Shape{2}, 0.0), rv(Shape{2}, 1.0);
  auto y = batch_norm(x, gamma, beta, rm, rv, true);
  for (std::size_t c = 0; c < 2; ++c) {
    // two-pass oracle
    std::vector<double> vals;
    for (std::size_t n = 0; n < 3; ++n)
      for (std::size_t i = 0; i < 20; ++i) vals.push_back(x.data()[(n * 2 + c) * 20 + i]);
    double mu = 0;
    for (double v : vals) mu += v;
    mu /= vals.size();
    double ss = 0;
    for (double v : vals) ss += (v - mu) * (v - mu);
    const double var_b = ss / vals.size(), var_u = ss / (vals.size() - 1);
    CHECK(rm.data()[c] == doctest::Approx(0.1 * mu).epsilon(1e-12));
    CHECK(rv.data()[c] == doctest::Approx(0.9 + 0.1 * var_u).epsilon(1e-12));
    double ym = 0, yv = 0;
    for (std::size_t n = 0; n < 3; ++n)
      for (std::size_t i = 0; i < 20; ++i) {
        const double v = y.data()[(n * 2 + c) * 20 + i];
        const double want = (x.data()[(n * 2 + c) * 20 + i] - mu) / std::sqrt(var_b + 1e-5);
        CHECK(v == doctest::Approx(want).epsilon(1e-10));
        ym += v;
        yv += v * v;
      }
    CHECK(std::abs(ym / 60) < 1e-12);
    CHECK(yv / 60 == doctest::Approx(var_b / (var_b + 1e-5)).epsilon(1e-10));
  }
  // eval mode uses the running buffers
  auto e = batch_norm(x, gamma, beta, rm, rv, false);
  CHECK(e.data()[0] == doctest::Approx((x.data()[0] - rm.data()[0]) / std::sqrt(rv.data()[0] + 1e-5)));
  Tensor<double> one(Shape{1, 2, 1, 1}, 1.0);
  CHECK_THROWS_AS(batch_norm(one, gamma, beta, rm, rv, true), NumericError);
  CHECK_NOTHROW(batch_norm(one, gamma, beta, rm, rv, false));

  auto z = random<double>(rng, {4, 6});
  Tensor<double> g6(Shape{6}, 1.0), b6(Shape{6}, 0.0);
  auto ln = layer_norm(z, g6, b6);
  for (std::size_t r = 0; r < 4; ++r) {
    double mu = 0, ss = 0;
    for (std::size_t i = 0; i < 6; ++i) mu += z.data()[r * 6 + i];
    mu /= 6;
    for (std::size_t i = 0; i < 6; ++i) ss += (z.data()[r * 6 + i] - mu) * (z.data()[r * 6 + i] - mu);
    for (std::size_t i = 0; i < 6; ++i)
      CHECK(ln.data()[r * 6 + i] == doctest::Approx((z.data()[r * 6 + i] - mu) / std::sqrt(ss / 6 + 1e-5)));
  }
}

TEST_CASE("activations") {
  Tensor<double> x(Shape{3}, {0.0, -3.0, 1.0});
  CHECK(activation(x, Activation::sigmoid).data()[0] == 0.5);
  CHECK(activation(x, Activation::relu).data()[1] == 0);
  CHECK(activation(x, Activation::relu).data()[2] == 1);
  CHECK(activation(x, Activation::silu).data()[0] == 0);
  CHECK(activation(x, Activation::silu).data()[2] == doctest::Approx(1.0 / (1.0 + std::exp(-1.0))));
  auto g = activation(x, Activation::gelu);
  for (std::size_t i = 0; i < 3; ++i) CHECK(std::abs(g.data()[i] - oracle::gelu_tanh(x.data()[i])) < 1e-12);
  CHECK(g.data()[2] == doctest::Approx(0.8411919906));
}

TEST_CASE("bilinear upsampling") {
  Tensor<double> row(Shape{1, 1, 1, 2}, {0.0, 1.0});
  auto u = upsample_bilinear2x(row);
  CHECK(u.shape() == Shape{1, 1, 2, 4});
  const double want[4] = {0, 0.25, 0.75, 1};
  for (std::size_t i = 0; i < 4; ++i) {
    CHECK(u.data()[i] == doctest::Approx(want[i]));
    CHECK(u.data()[4 + i] == doctest::Approx(want[i]));
  }
  // a ramp in both axes against the half-pixel formula
  Tensor<double> r(Shape{1, 1, 3, 4});
  for (std::size_t y = 0; y < 3; ++y)
    for (std::size_t x = 0; x < 4; ++x) r.data()[y * 4 + x] = 10.0 * y + x;
  auto v = upsample_bilinear2x(r);
  auto src = [](std::size_t o, std::size_t n) { return std::clamp((o + 0.5) / 2 - 0.5, 0.0, double(n - 1)); };
  for (std::size_t y = 0; y < 6; ++y)
    for (std::size_t x = 0; x < 8; ++x)
      CHECK(v.data()[y * 8 + x] == doctest::Approx(10.0 * src(y, 3) + src(x, 4)).epsilon(1e-12));
}

TEST_CASE("cross entropy") {
  Tensor<double> even(Shape{1, 2, 1, 1}, {0.3, 0.3});
  std::vector<int> t0{0};
  CHECK(cross_entropy(even, t0).item() == doctest::Approx(std::log(2.0)).epsilon(1e-12));
  Tensor<double> margin(Shape{1, 2, 1, 1}, {5.0, 0.0});
  CHECK(cross_entropy(margin, t0).item() == doctest::Approx(std::log1p(std::exp(-5.0))).epsilon(1e-12));

  std::mt19937_64 rng(4);
  auto logits = random<double>(rng, {2, 3, 2, 2}, -3, 3);
  std::vector<int> t{0, 1, 2, 1, 2, 2, 0, 0};
  double ref = 0;
  for (std::size_t n = 0; n < 2; ++n)
    for (std::size_t p = 0; p < 4; ++p) {
      double z = 0;
      for (std::size_t k = 0; k < 3; ++k) z += std::exp(logits.data()[(n * 3 + k) * 4 + p]);
      ref += std::log(z) - logits.data()[(n * 3 + t[n * 4 + p]) * 4 + p];
    }
  CHECK(cross_entropy(logits, t).item() == doctest::Approx(ref / 8).epsilon(1e-12));
  std::vector<int> bad{0, 1, 3, 1, 2, 2, 0, 0};
  CHECK_THROWS_AS(cross_entropy(logits, bad), ValidationError);
  std::vector<int> neg{0, 1, -1, 1, 2, 2, 0, 0};
  CHECK_THROWS_AS(cross_entropy(logits, neg), ValidationError);
  CHECK_THROWS_AS(cross_entropy(logits, std::span<const int>(t.data(), 7)), ShapeError);
}

TEST_CASE("backward basics") {
  clear_record<double>();
  auto a = leaf<double>({3}, {1, 2, 3});
  backward(sum(a));
  for (double g : a.grad()) CHECK(g == 1);
  CHECK(ComputationRecord<double>::current().size() == 0);

  a.zero_grad();
  auto b = leaf<double>({2}, {1, 2});
  backward(sum(mul(b, b)));
  CHECK(b.grad()[0] == 2);
  CHECK(b.grad()[1] == 4);

  // fan-out accumulates
  auto c = leaf<double>({2}, {5, -1});
  backward(sum(add(c, c)));
  CHECK(c.grad()[0] == 2);
  CHECK(c.grad()[1] == 2);

  // a constant operand never gets a gradient
  auto d = leaf<double>({2}, {1, 1});
  Tensor<double> k(Shape{2}, {3, 4});
  backward(sum(mul(d, k)));
  CHECK(d.grad()[1] == 4);
  CHECK_FALSE(k.has_grad());

  auto e = leaf<double>({2}, {1, 1});
  auto nonscalar = scale(e, 2.0);
  CHECK_THROWS_AS(backward(nonscalar), ContractError);
  // a rejected call leaves the record alone
  CHECK(ComputationRecord<double>::current().size() == 1);
  clear_record<double>();
  CHECK_THROWS_AS(backward(Tensor<double>::scalar(1.0)), ContractError);

  {
    NoGradGuard g;
    auto f = sum(mul(e, e));
    CHECK(ComputationRecord<double>::current().size() == 0);
    CHECK_THROWS_AS(backward(f), ContractError);
  }
  CHECK(grad_enabled());
}

TEST_CASE("adam") {
  Tensor<double> p(Shape{3}, {1, -2, 0.5});
  p.set_requires_grad(true);
  Adam<double> opt({p}, {.lr = 0.01});
  opt.step();  // no gradient at all
  CHECK(p.data()[0] == 1);
  CHECK(p.data()[1] == -2);

  // x^2 for three steps against an inline simulation
  Tensor<double> x(Shape{1}, {1.0});
  x.set_requires_grad(true);
  Adam<double> ax({x}, {.lr = 0.1});
  double xs = 1, m = 0, v = 0;
  for (int t = 1; t <= 3; ++t) {
    clear_record<double>();
    x.zero_grad();
    backward(sum(mul(x, x)));
    const double before = x.data()[0];
    ax.step();
    const double g = 2 * xs;
    m = 0.9 * m + 0.1 * g;
    v = 0.999 * v + 0.001 * g * g;
    xs -= 0.1 * (m / (1 - std::pow(0.9, t))) / (std::sqrt(v / (1 - std::pow(0.999, t))) + 1e-8);
    CHECK(x.data()[0] == doctest::Approx(xs).epsilon(1e-12));
    CHECK(std::abs(x.data()[0] - before) <= 0.1 * (1 + 1e-9));
  }
  CHECK(ax.steps() == 3);
}

TEST_CASE("grad_check on primitives") {
  std::mt19937_64 rng(8);
  auto w = random<double>(rng, {4, 3});
  auto x = random<double>(rng, {2, 3});
  auto r = random<double>(rng, {2, 4});
  auto lin = grad_check<double>(
      [&](const std::vector<Tensor<double>>& in) {
        return sum(mul(linear(in[0], in[1], std::optional<Tensor<double>>()), r));
      },
      {x, w});
  CHECK(lin.max_rel_error < 1e-9);

  auto s = random<double>(rng, {3, 5});
  auto rs = random<double>(rng, {3, 5});
  auto sm = grad_check<double>([&](const std::vector<Tensor<double>>& in) { return sum(mul(softmax(in[0], 1), rs)); },
                               {s});
  CHECK(sm.max_rel_error < 1e-6);

  auto ci = random<double>(rng, {1, 2, 5, 5});
  auto cw = random<double>(rng, {3, 2, 3, 3});
  auto cr = random<double>(rng, {1, 3, 3, 3});
  auto cv = grad_check<double>(
      [&](const std::vector<Tensor<double>>& in) {
        return sum(mul(conv2d(in[0], in[1], std::optional<Tensor<double>>(), {2, 1, 1}), cr));
      },
      {ci, cw});
  CHECK(cv.max_rel_error < 1e-6);
  CHECK(cv.coordinates == ci.numel() + cw.numel());
}

TEST_CASE("forward and backward are deterministic") {
  auto run = [] {
    std::mt19937_64 rng(77);
    auto x = random<float>(rng, {2, 4, 6, 6});
    auto w = random<float>(rng, {4, 1, 3, 3});
    w.set_requires_grad(true);
    clear_record<float>();
    auto y = activation(conv2d(x, w, std::optional<Tensor<float>>(), {1, 1, 4}), Activation::gelu);
    backward(sum(y));
    return std::vector<float>(w.grad().begin(), w.grad().end());
  };
  CHECK(run() == run());
}
