#include <doctest.h>

#include <cstdlib>
#include <random>
#include <set>

#include "oracles.hpp"
#include "segnetr/model.hpp"

using namespace segnetr;
using namespace segnetr::model;
using oracle::random;

namespace {

ModelConfig small(std::size_t res = 32) {
  ModelConfig c;
  c.base_channels = 8;
  c.resolution = res;
  c.patch_schedule = {2, 2, 1, 1};
  return c;
}

bool has_param(const Network<double>& net, const std::string& name) {
  for (const auto& t : net.registry().tensors())
    if (t.name == name) return true;
  return false;
}

}  // namespace

TEST_CASE("config defaults and JSON") {
  ModelConfig d;
  CHECK(d.base_channels == 64);
  CHECK(d.patch_schedule == std::array<std::size_t, 4>{8, 4, 2, 1});
  CHECK(d.global_schedule() == std::array<std::size_t, 4>{16, 8, 4, 2});
  CHECK(d.interaction_mode == nn::InteractionMode::parallel);
  CHECK(d.skip_mode == SkipMode::irsc);
  CHECK(d.resolution == 224);
  CHECK(d.stage_channels(3) == 512);
  CHECK_NOTHROW(validate(d));

  auto c = config_from_json(R"({"base_channels": 16, "interaction_mode": "series", "skip_mode": "concat",
                                "patch_schedule": [4, 2, 2, 1], "seed": 7, "allow_padding": true})");
  CHECK(c.base_channels == 16);
  CHECK(c.interaction_mode == nn::InteractionMode::series);
  CHECK(c.skip_mode == SkipMode::concat);
  CHECK(c.patch_schedule[0] == 4);
  CHECK(c.seed == 7);
  CHECK(c.allow_padding);
  auto back = config_from_json(config_to_json(c));
  CHECK(config_to_json(back) == config_to_json(c));

  CHECK_THROWS_AS(config_from_json(R"({"base_channel": 16})"), ConfigError);
  CHECK_THROWS_AS(config_from_json(R"({"interaction_mode": "both"})"), ConfigError);
  CHECK_THROWS_AS(config_from_json(R"({"patch_schedule": [8, 4, 2]})"), ConfigError);
  CHECK_THROWS_AS(config_from_json(R"({"base_channels": "wide"})"), ConfigError);
  CHECK_THROWS_AS(config_from_json("[1, 2]"), ConfigError);
  CHECK_THROWS_AS(config_from_json("{"), ConfigError);
  CHECK_THROWS_AS(load_config("/nonexistent/segnetr.json"), ConfigError);
}

TEST_CASE("seed override from the environment") {
  ModelConfig c;
  ::setenv("SEGNETR_SEED", "42", 1);
  apply_env_overrides(c);
  CHECK(c.seed == 42);
  ::setenv("SEGNETR_SEED", "4x", 1);
  CHECK_THROWS_AS(apply_env_overrides(c), ConfigError);
  ::unsetenv("SEGNETR_SEED");
  apply_env_overrides(c);
  CHECK(c.seed == 42);
}

TEST_CASE("stage geometry and validation") {
  ModelConfig d;
  const auto g = stage_geometry(d, 224, 224);
  REQUIRE(g.size() == 4);
  CHECK(g[0].height == 112);
  CHECK(g[3].height == 14);
  CHECK(g[3].channels == 512);
  CHECK(g[1].patch == 4);
  for (const auto& st : g) CHECK(st.height / st.patch == 14);

  auto bad = d;
  bad.resolution = 200;
  CHECK_THROWS_AS(validate(bad), ConfigError);
  bad = d;
  bad.base_channels = 7;
  CHECK_THROWS_AS(validate(bad), ConfigError);
  bad.skip_mode = SkipMode::concat;
  CHECK_NOTHROW(validate(bad));
  bad = d;
  bad.num_classes = 1;
  CHECK_THROWS_AS(validate(bad), ConfigError);
  bad = d;
  bad.patch_schedule = {0, 4, 2, 1};
  CHECK_THROWS_AS(validate(bad), ConfigError);

  // 2P = 4 does not divide the 14x14 bottleneck
  auto p2 = d;
  p2.patch_schedule = {2, 2, 2, 2};
  CHECK_THROWS_AS(validate(p2), ConfigError);
  p2.allow_padding = true;
  CHECK_NOTHROW(validate(p2));
  // global branch unused: only P must divide
  p2.allow_padding = false;
  p2.interaction_mode = nn::InteractionMode::local;
  CHECK_NOTHROW(validate(p2));
  // P never pads for the displacement
  auto p3 = d;
  p3.patch_schedule = {8, 4, 2, 3};
  p3.allow_padding = true;
  CHECK_THROWS_AS(validate(p3), ConfigError);

  auto u = d;
  u.variant = Variant::mini_unet;
  u.resolution = 40;
  CHECK_NOTHROW(validate(u));
  u.resolution = 36;
  CHECK_THROWS_AS(validate(u), ConfigError);
  CHECK(parse_variant("mini_unet") == Variant::mini_unet);
  CHECK_THROWS_AS(parse_skip_mode("add"), ConfigError);
}

TEST_CASE("skip cache contract") {
  SkipCache<double> sc;
  sc.put(0, Tensor<double>(Shape{1}));
  CHECK_THROWS_AS(sc.put(0, Tensor<double>(Shape{1})), ContractError);
  CHECK_THROWS_AS(sc.finish(), ContractError);
  CHECK_NOTHROW(sc.take(0));
  CHECK_THROWS_AS(sc.take(0), ContractError);
  CHECK_THROWS_AS(sc.take(2), ContractError);
  CHECK_NOTHROW(sc.finish());
}

TEST_CASE("segnetr forward shapes and names") {
  auto cfg = small();
  auto net = build_model<double>(cfg);
  std::mt19937_64 rng(1);
  auto x = random<double>(rng, {2, 3, 32, 32}, 0, 1);
  auto y = net->forward(x, true);
  CHECK(y.shape() == Shape{2, 2, 32, 32});
  CHECK(net->forward_any(random<double>(rng, {1, 3, 64, 32}, 0, 1)).shape() == Shape{1, 2, 64, 32});
  CHECK_THROWS_AS(net->forward(random<double>(rng, {1, 3, 64, 64})), ShapeError);
  CHECK_THROWS_AS(net->forward(random<double>(rng, {1, 1, 32, 32})), ShapeError);
  CHECK_THROWS_AS(net->forward_any(random<double>(rng, {1, 3, 40, 40})), ShapeError);

  CHECK(net->blocks().size() == 5 + 3);
  for (const char* n : {"stem.conv.weight", "stem.bn.running_var", "enc0.block0.mbconv.expand.weight",
                        "enc3.block1.alpha_global", "enc2.merge.conv.weight", "dec0.up.conv.weight",
                        "dec1.fuse.bn.bias", "dec2.block0.local.fc1.weight", "head.conv.bias"})
    CHECK_MESSAGE(has_param(*net, n), n);
  CHECK_FALSE(has_param(*net, "enc3.merge.conv.weight"));
  std::set<std::string> names;
  for (const auto& t : net->registry().tensors()) names.insert(t.name);
  CHECK(names.size() == net->registry().tensors().size());
}

TEST_CASE("same seed, same weights") {
  auto a = build_model<double>(small());
  auto b = build_model<double>(small());
  auto c2 = small();
  c2.seed = 1;
  auto c = build_model<double>(c2);
  const auto pa = a->parameters(), pb = b->parameters(), pc = c->parameters();
  bool same = true, differ = false;
  for (std::size_t i = 0; i < pa.size(); ++i)
    for (std::size_t j = 0; j < pa[i].numel(); ++j) {
      same &= pa[i].data()[j] == pb[i].data()[j];
      differ |= pa[i].data()[j] != pc[i].data()[j];
    }
  CHECK(same);
  CHECK(differ);
}

// A local window of area 1 (P = 1) has a constant softmax, so its FFN is
// exactly gradient-free; everything else must train.
TEST_CASE("every parameter receives a gradient") {
  auto net = build_model<double>(small());
  std::mt19937_64 rng(2);
  auto x = random<double>(rng, {2, 3, 32, 32}, 0, 1);
  std::vector<int> t(2 * 32 * 32);
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = (i / 32 + i % 32) % 5 == 0;
  clear_record<double>();
  backward(cross_entropy(net->forward(x, true), t));
  for (const auto& nt : net->registry().tensors()) {
    if (nt.kind != nn::TensorKind::parameter) continue;
    bool nonzero = false;
    if (nt.tensor.has_grad())
      for (double g : nt.tensor.grad()) nonzero |= g != 0;
    const bool unit_window = nt.name.find(".local.") != std::string::npos &&
                             (nt.name.rfind("enc2", 0) == 0 || nt.name.rfind("enc3", 0) == 0 ||
                              nt.name.rfind("dec2", 0) == 0);
    CHECK_MESSAGE(nonzero != unit_window, nt.name);
  }
}

TEST_CASE("variants and skip modes") {
  auto cfg = small();
  const auto irsc = build_model<float>(cfg)->parameter_count();
  cfg.skip_mode = SkipMode::concat;
  const auto concat = build_model<float>(cfg)->parameter_count();
  CHECK(concat > irsc);

  std::size_t prev = 0;
  for (auto mode : {nn::InteractionMode::without, nn::InteractionMode::local, nn::InteractionMode::parallel}) {
    auto c = small();
    c.interaction_mode = mode;
    const auto n = build_model<float>(c)->parameter_count();
    CHECK(n > prev);
    prev = n;
  }

  auto u = small();
  u.variant = Variant::mini_unet;
  auto unet = build_model<double>(u);
  CHECK(unet->blocks().empty());
  std::mt19937_64 rng(3);
  CHECK(unet->forward(random<double>(rng, {2, 3, 32, 32}, 0, 1), true).shape() == Shape{2, 2, 32, 32});
  auto ui = build_mini_unet<float>(u, SkipMode::irsc);
  auto uc = build_mini_unet<float>(u, SkipMode::concat);
  CHECK(uc->parameter_count() > ui->parameter_count());
  CHECK(ui->config().skip_mode == SkipMode::irsc);
}

TEST_CASE("attention rows are distributions at every stage") {
  auto net = build_model<double>(small());
  std::mt19937_64 rng(4);
  net->forward(random<double>(rng, {2, 3, 32, 32}, 0, 1), true);
  for (auto* blk : net->blocks())
    for (auto* br : {blk->local ? &*blk->local : nullptr, blk->global ? &*blk->global : nullptr}) {
      REQUIRE(br);
      const auto& a = br->last_attention();
      const std::size_t area = br->area();
      REQUIRE(a.dim(1) == area);
      double worst = 0;
      for (std::size_t r = 0; r < a.dim(0); ++r) {
        double s = 0;
        for (std::size_t i = 0; i < area; ++i) s += a.data()[r * area + i];
        worst = std::max(worst, std::abs(s - 1));
      }
      CHECK(worst < 1e-6);
    }
}

TEST_CASE("interaction mode never changes the output shape") {
  std::mt19937_64 rng(5);
  auto x = random<float>(rng, {1, 3, 32, 32}, 0, 1);
  for (auto mode : {nn::InteractionMode::without, nn::InteractionMode::local, nn::InteractionMode::global,
                    nn::InteractionMode::series, nn::InteractionMode::parallel}) {
    auto c = small();
    c.interaction_mode = mode;
    CHECK(build_model<float>(c)->forward(x).shape() == Shape{1, 2, 32, 32});
  }
}
