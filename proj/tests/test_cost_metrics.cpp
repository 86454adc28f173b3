#include <doctest.h>

#include <cmath>
#include <random>

#include "oracles.hpp"
#include "segnetr/cost_report.hpp"
#include "segnetr/layout.hpp"
#include "segnetr/metrics.hpp"
#include "segnetr/trace.hpp"

using namespace segnetr;
using namespace segnetr::cost;
using segnetr::model::ModelConfig;

namespace {

// Closed-form parameter and MAC counts for the SegNetr layout (parallel
// mode, irsc skips), written out independently of the model code.
struct Analytic {
  std::uint64_t params = 0, macs = 0;
};

Analytic segnetr_analytic(const ModelConfig& c, std::uint64_t H) {
  Analytic a;
  const std::uint64_t C = c.base_channels, K = c.num_classes;
  auto ch = [&](std::size_t s) { return C << s; };
  auto side = [&](std::size_t s) { return H >> (s + 1); };
  auto block = [&](std::uint64_t cc, std::uint64_t p, std::uint64_t hw) {
    a.params += 16 * cc * cc + 59 * cc;
    a.macs += hw * (8 * cc * cc + 36 * cc) + 8 * cc * cc;
    for (std::uint64_t area : {p * p, 4 * p * p}) {
      a.params += 4 * area * area + 5 * area + 1;
      a.macs += 4 * area * hw;  // (hw / area) windows of area x 2area + 2area x area
    }
  };
  a.params += 27 * C + 2 * C;
  a.macs += side(0) * side(0) * 27 * C;
  for (std::size_t s = 0; s < 4; ++s) {
    const std::uint64_t hw = side(s) * side(s);
    for (std::size_t b = 0; b < c.depths[s]; ++b) block(ch(s), c.patch_schedule[s], hw);
    if (s < 3) {
      a.params += 4 * ch(s) * ch(s + 1) + 2 * ch(s + 1);
      a.macs += (hw / 4) * 4 * ch(s) * ch(s + 1);
    }
  }
  for (std::size_t d = 0; d < 3; ++d) {
    const std::uint64_t hw = side(d) * side(d), cd = ch(d);
    a.params += ch(d + 1) * cd + 2 * cd + (cd + cd / 2) * cd + 2 * cd;
    a.macs += hw * (ch(d + 1) * cd + (cd + cd / 2) * cd);
    for (std::size_t b = 0; b < c.depths[d]; ++b) block(cd, c.patch_schedule[d], hw);
  }
  a.params += C * K + K;
  a.macs += side(0) * side(0) * C * K;
  return a;
}

}  // namespace

TEST_CASE("tracer scopes and dry run") {
  {
    nn::Registry<float> reg(0);
    nn::Linear<float> lin(reg, "fc", 10, 5);
    CHECK(reg.parameter_count() == 55);
    nn::Conv2d<float> conv(reg, "conv", 16, 32, 3, {1, 1, 1}, true);
    CHECK(reg.parameter_count() - 55 == 4640);

    Tracer t(true);
    {
      Scope s("block");
      auto y = conv.forward(Tensor<float>(Shape{1, 16, 56, 56}));
      CHECK(y.shape() == Shape{1, 32, 56, 56});
      auto z = lin.forward(Tensor<float>(Shape{3, 10}));
      CHECK(z.shape() == Shape{3, 5});
    }
    REQUIRE(t.rows().size() == 2);
    CHECK(t.rows()[0].name == "block.conv");
    CHECK(t.rows()[0].macs == 14450688u);
    CHECK(t.rows()[1].name == "block.fc");
    CHECK(t.rows()[1].macs == 150u);
    CHECK(t.total_macs() == 14450688u + 150u);
  }
  {
    // layout ops register a row with zero cost
    Tracer t(true);
    {
      Scope s("pm");
      auto y = layout::patch_merge(Tensor<float>(Shape{1, 8, 8, 4}));
      CHECK(y.shape() == Shape{1, 4, 4, 16});
    }
    REQUIRE(t.rows().size() == 1);
    CHECK(t.rows()[0].macs == 0);
    CHECK(t.rows()[0].elementwise == 0);
  }
  {
    Tracer outer(false);
    Tensor<double> a(Shape{4}, 2.0);
    {
      Tracer inner(true);
      CHECK(dry_run());
      auto y = activation(a, Activation::relu);
      CHECK(inner.total_elementwise() == 4);
      CHECK(y.data()[0] == 0);  // arithmetic skipped
    }
    CHECK(Tracer::active() == &outer);
    CHECK_FALSE(dry_run());
    auto y = activation(a, Activation::relu);
    CHECK(y.data()[0] == 2);
    CHECK(outer.total_elementwise() == 4);
  }
  CHECK(Tracer::active() == nullptr);
  add_macs(10);  // no tracer: nothing happens
}

TEST_CASE("model costs match the closed form") {
  for (std::size_t C : {16, 64}) {
    ModelConfig c;
    c.base_channels = C;
    const auto rep = summarize(c);
    const auto ref = segnetr_analytic(c, 224);
    CHECK(rep.total_params == ref.params);
    CHECK(rep.total_macs == ref.macs);
    auto net = model::build_model<float>(c);
    CHECK(count_params(*net) == ref.params);
    std::uint64_t row_params = 0, row_macs = 0;
    for (const auto& r : rep.rows) {
      row_params += r.params;
      row_macs += r.macs;
    }
    CHECK(row_params == rep.total_params);
    CHECK(row_macs == rep.total_macs);
  }
}

TEST_CASE("report conventions and formats") {
  ModelConfig c;
  c.base_channels = 16;
  c.resolution = 64;
  c.patch_schedule = {4, 2, 1, 1};
  const auto rep = summarize(c, Convention::two_flop);
  CHECK(rep.input_shape == Shape{1, 3, 64, 64});
  CHECK(rep.flops(Convention::two_flop) == 2.0 * rep.total_macs + rep.total_elementwise);
  CHECK(rep.flops(Convention::mac) == 1.0 * rep.total_macs + rep.total_elementwise);
  CHECK(rep.gflops() == doctest::Approx(rep.flops(Convention::two_flop) / 1e9));
  CHECK(count_flops(c, {1, 3, 64, 64}, Convention::mac) == static_cast<std::uint64_t>(rep.flops(Convention::mac)));
  CHECK(parse_convention("2flop") == Convention::two_flop);
  CHECK_THROWS_AS(parse_convention("flop"), ConfigError);

  const auto csv = rep.to_csv();
  CHECK(csv.rfind("layer,params,macs\n", 0) == 0);
  std::size_t lines = 0;
  for (char ch : csv) lines += ch == '\n';
  CHECK(lines == rep.rows.size() + 1);
  const auto txt = rep.to_text();
  CHECK(txt.find("stem.conv") != std::string::npos);
  CHECK(txt.find("2flop") != std::string::npos);

  // attention rows exist and cost something; a model without branches has none
  CHECK(attention_ops(rep) > 0);
  c.interaction_mode = nn::InteractionMode::without;
  CHECK(attention_ops(summarize(c)) == 0);
}

TEST_CASE("dry run does not touch weights or buffers") {
  ModelConfig c;
  c.base_channels = 8;
  c.resolution = 32;
  c.patch_schedule = {2, 2, 1, 1};
  auto net = model::build_model<float>(c);
  std::vector<std::vector<float>> before;
  for (const auto& t : net->registry().tensors()) before.emplace_back(t.tensor.data().begin(), t.tensor.data().end());
  cost_report(*net, {2, 3, 32, 32});
  for (std::size_t i = 0; i < before.size(); ++i) {
    const auto d = net->registry().tensors()[i].tensor.data();
    CHECK(std::equal(d.begin(), d.end(), before[i].begin()));
  }
}

TEST_CASE("confusion counts and scores") {
  // pred / gt over 8 pixels, 3 classes
  std::vector<int> pred{0, 1, 1, 2, 2, 0, 1, 0};
  std::vector<int> gt{0, 1, 2, 2, 1, 0, 1, 1};
  const auto cc = metrics::confusion(pred, gt, 3);
  CHECK(cc.tp == std::vector<std::uint64_t>{2, 2, 1});
  CHECK(cc.fp == std::vector<std::uint64_t>{1, 1, 1});
  CHECK(cc.fn == std::vector<std::uint64_t>{0, 2, 1});
  const auto s = metrics::iou_dice(cc);
  CHECK(s.iou[0] == doctest::Approx(2.0 / 3));
  CHECK(s.iou[1] == doctest::Approx(2.0 / 5));
  CHECK(s.dice[2] == doctest::Approx(2.0 / 4));
  for (std::size_t k = 0; k < 3; ++k) CHECK(s.dice[k] == doctest::Approx(2 * s.iou[k] / (1 + s.iou[k])));
  CHECK(s.mean_iou == doctest::Approx((2.0 / 3 + 2.0 / 5 + 1.0 / 3) / 3));
  const auto fg = metrics::iou_dice(cc, 1);
  CHECK(fg.mean_dice == doctest::Approx((4.0 / 7 + 0.5) / 2));

  // an absent class scores 1 and is not averaged
  std::vector<int> p2{0, 0, 1, 1}, g2{0, 0, 1, 0};
  const auto s2 = metrics::iou_dice(metrics::confusion(p2, g2, 3), 1);
  CHECK_FALSE(s2.counted[2]);
  CHECK(s2.iou[2] == 1);
  CHECK(s2.mean_iou == doctest::Approx(0.5));
  std::vector<int> zeros{0, 0};
  CHECK(metrics::iou_dice(metrics::confusion(zeros, zeros, 2), 1).mean_dice == 1);

  auto pooled = metrics::confusion(pred, gt, 3);
  pooled += metrics::confusion(p2, g2, 3);
  CHECK(pooled.tp[0] == 4);
  CHECK_THROWS_AS(metrics::confusion(pred, g2, 3), ShapeError);
  std::vector<int> oob{0, 3};
  CHECK_THROWS_AS(metrics::confusion(oob, zeros, 3), ValidationError);
}

TEST_CASE("a perfect prediction scores 1") {
  // ground truth fed back as one-hot logits
  std::vector<int> gt{0, 2, 1, 1, 0, 2};
  Tensor<float> onehot(Shape{1, 3, 2, 3});
  for (std::size_t i = 0; i < gt.size(); ++i) onehot.data()[static_cast<std::size_t>(gt[i]) * 6 + i] = 1;
  const auto s = metrics::iou_dice(metrics::confusion(metrics::argmax_classes(onehot), gt, 3), 1);
  CHECK(s.mean_iou == 1);
  CHECK(s.mean_dice == 1);
}

TEST_CASE("argmax over classes") {
  Tensor<float> logits(Shape{1, 3, 1, 3}, {0, 5, 1, 0, 5, 2, 1, 1, 2});
  CHECK(metrics::argmax_classes(logits) == std::vector<int>{2, 0, 1});
}
