#include <doctest.h>

#include <cmath>
#include <random>

#include "oracles.hpp"
#include "segnetr/nn.hpp"

using namespace segnetr;
using namespace segnetr::nn;
using oracle::random;

namespace {

double max_abs_diff(const Tensor<double>& a, const Tensor<double>& b) {
  REQUIRE(a.shape() == b.shape());
  double m = 0;
  for (std::size_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a.data()[i] - b.data()[i]));
  return m;
}

std::size_t count_with_prefix(const Registry<double>& reg, const std::string& prefix) {
  std::size_t n = 0;
  for (const auto& t : reg.tensors())
    if (t.kind == TensorKind::parameter && t.name.rfind(prefix, 0) == 0) n += t.tensor.numel();
  return n;
}

}  // namespace

TEST_CASE("registry order, kinds and init") {
  Registry<double> reg(1);
  auto w = reg.parameter("a.weight", {64, 8}, Init::kaiming(8));
  reg.buffer("a.running_mean", {3}, 0.0);
  reg.parameter("a.bias", {5}, Init::constant(0.25));
  CHECK(reg.tensors().size() == 3);
  CHECK(reg.tensors()[1].kind == TensorKind::buffer);
  CHECK(reg.parameter_count() == 64 * 8 + 5);
  CHECK(reg.parameters().size() == 2);
  CHECK(reg.parameters()[0].requires_grad());
  const double bound = std::sqrt(6.0 / 8);
  double lo = 0, hi = 0;
  for (double v : w.data()) {
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  CHECK(lo >= -bound);
  CHECK(hi <= bound);
  CHECK(hi - lo > bound);  // actually spread out
  CHECK(reg.tensors()[2].tensor.data()[4] == 0.25);

  Registry<double> again(1);
  auto w2 = again.parameter("a.weight", {64, 8}, Init::kaiming(8));
  CHECK(max_abs_diff(w, w2) == 0);
  CHECK(join_name("enc0", "block1") == "enc0.block1");
  CHECK(join_name("", "head") == "head");
}

TEST_CASE("mbconv keeps the shape and has the expected parameter count") {
  Registry<double> reg(2);
  MBConv<double> mb(reg, "mb", 8);
  CHECK(reg.parameter_count() == 16 * 64 + 59 * 8);
  std::mt19937_64 rng(3);
  auto x = random<double>(rng, {2, 8, 6, 6});
  auto y = mb.forward(x, true);
  CHECK(y.shape() == x.shape());
  CHECK_THROWS_AS(mb.forward(random<double>(rng, {2, 4, 6, 6}), true), ShapeError);

  // with a zero projection gain the block is the identity
  std::fill(mb.bn_project.gamma.data().begin(), mb.bn_project.gamma.data().end(), 0.0);
  CHECK(max_abs_diff(mb.forward(x, true), x) < 1e-12);
}

TEST_CASE("window branch with uniform attention is the identity") {
  std::mt19937_64 rng(4);
  for (auto kind : {BranchKind::local, BranchKind::global}) {
    Registry<double> reg(5);
    WindowBranch<double> br(reg, "b", kind, 2);
    const std::size_t a = br.area();
    CHECK(a == (kind == BranchKind::local ? 4u : 16u));
    CHECK(reg.parameter_count() == 4 * a * a + 5 * a);
    auto x = random<double>(rng, {2, 3, 8, 8});
    auto y = br.forward(x);
    CHECK(y.shape() == x.shape());
    // attention rows are distributions over the window
    const auto& att = br.last_attention();
    CHECK(att.shape() == Shape{2 * 64 / a, a});
    for (std::size_t r = 0; r < att.dim(0); ++r) {
      double s = 0;
      for (std::size_t i = 0; i < a; ++i) s += att.data()[r * a + i];
      CHECK(s == doctest::Approx(1.0).epsilon(1e-12));
    }
    std::fill(br.fc2.weight.data().begin(), br.fc2.weight.data().end(), 0.0);
    CHECK(max_abs_diff(br.forward(x), x) < 1e-12);
  }
}

TEST_CASE("window branch padding and divisibility") {
  std::mt19937_64 rng(6);
  auto x = random<double>(rng, {1, 2, 6, 6});
  Registry<double> reg(0);
  WindowBranch<double> strict(reg, "g", BranchKind::global, 2);
  CHECK_THROWS_AS(strict.forward(x), LayoutError);
  WindowBranch<double> padded(reg, "p", BranchKind::global, 2, {.allow_padding = true});
  CHECK(padded.forward(x).shape() == x.shape());
  CHECK_THROWS_AS(WindowBranch<double>(reg, "z", BranchKind::local, 0), ConfigError);
}

TEST_CASE("segnetr block modes") {
  std::mt19937_64 rng(7);
  auto x = random<double>(rng, {2, 4, 8, 8});
  std::size_t counts[5];
  int i = 0;
  for (auto mode : {InteractionMode::without, InteractionMode::local, InteractionMode::global, InteractionMode::series,
                    InteractionMode::parallel}) {
    Registry<double> reg(9);
    SegnetrBlock<double> blk(reg, "blk", 4, 2, mode);
    counts[i++] = reg.parameter_count();
    CHECK(blk.local.has_value() == uses_local(mode));
    CHECK(blk.global.has_value() == uses_global(mode));
    CHECK(count_with_prefix(reg, "blk.mbconv") == 16 * 16 + 59 * 4);
    if (blk.alpha_local) CHECK(blk.alpha_local->item() == 0.5);
    if (blk.alpha_global) CHECK(blk.alpha_global->item() == 0.5);
    auto y = blk.forward(x, true);
    CHECK(y.shape() == x.shape());

    // zero fusion weights reduce every mode to the MBConv path
    if (blk.alpha_local) blk.alpha_local->data()[0] = 0;
    if (blk.alpha_global) blk.alpha_global->data()[0] = 0;
    auto m = blk.mbconv.forward(x, false);
    CHECK(max_abs_diff(blk.forward(x, false), m) < 1e-12);
  }
  CHECK(counts[0] < counts[1]);
  CHECK(counts[1] < counts[2]);
  CHECK(counts[3] == counts[4]);
  CHECK(counts[4] == counts[1] + counts[2] - counts[0]);

  CHECK(parse_interaction_mode("series") == InteractionMode::series);
  CHECK(to_string(InteractionMode::parallel) == "parallel");
  CHECK_THROWS_AS(parse_interaction_mode("both"), ConfigError);
}

TEST_CASE("irsc skip restores the encoder resolution") {
  std::mt19937_64 rng(8);
  auto pm = random<double>(rng, {2, 4, 4, 16});
  auto pr = irsc_skip(pm);
  CHECK(pr.shape() == Shape{2, 8, 8, 2});
  auto up = random<double>(rng, {2, 8, 8, 5});
  auto fused = irsc_fuse(pm, up);
  CHECK(fused.shape() == Shape{2, 8, 8, 7});
  // decoder channels first, then the restored encoder channels
  CHECK(fused.data()[0] == up.data()[0]);
  CHECK(fused.data()[5] == pr.data()[0]);
  CHECK(fused.data()[6] == pr.data()[1]);
  CHECK_THROWS_AS(irsc_fuse(pm, random<double>(rng, {2, 6, 8, 5})), ShapeError);

  auto x = random<double>(rng, {2, 3, 4, 5});
  auto cl = to_channels_last(x);
  CHECK(cl.shape() == Shape{2, 4, 5, 3});
  CHECK(cl.data()[1] == x.data()[20]);
  CHECK(max_abs_diff(to_channels_first(cl), x) == 0);
}
