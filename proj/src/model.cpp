#include "segnetr/model.hpp"

#include <cstdlib>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "segnetr/layout.hpp"
#include "segnetr/trace.hpp"

namespace segnetr::model {

using nlohmann::json;
using segnetr::to_string;

Variant parse_variant(std::string_view s) {
  if (s == "segnetr") return Variant::segnetr;
  if (s == "mini_unet") return Variant::mini_unet;
  throw ConfigError("unknown variant '" + std::string(s) + "' (expected segnetr|mini_unet)");
}

std::string_view to_string(Variant v) { return v == Variant::segnetr ? "segnetr" : "mini_unet"; }

SkipMode parse_skip_mode(std::string_view s) {
  if (s == "irsc") return SkipMode::irsc;
  if (s == "concat") return SkipMode::concat;
  throw ConfigError("unknown skip_mode '" + std::string(s) + "' (expected irsc|concat)");
}

std::string_view to_string(SkipMode m) { return m == SkipMode::irsc ? "irsc" : "concat"; }

std::array<std::size_t, kStages> ModelConfig::global_schedule() const {
  std::array<std::size_t, kStages> g{};
  for (std::size_t s = 0; s < kStages; ++s) g[s] = 2 * patch_schedule[s];
  return g;
}

// -------------------- JSON --------------------

namespace {

template <typename V>
V get_as(const json& j, const char* key) {
  try {
    return j.at(key).get<V>();
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config key '") + key + "': " + e.what());
  }
}

std::array<std::size_t, kStages> get_stages(const json& j, const char* key) {
  auto v = get_as<std::vector<std::size_t>>(j, key);
  if (v.size() != kStages)
    throw ConfigError(std::string("config key '") + key + "' needs " + std::to_string(kStages) + " entries, got " +
                      std::to_string(v.size()));
  std::array<std::size_t, kStages> out{};
  std::copy(v.begin(), v.end(), out.begin());
  return out;
}

}  // namespace

ModelConfig config_from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  if (!j.is_object()) throw ConfigError("config must be a JSON object");
  static const char* known[] = {"variant",    "base_channels", "patch_schedule", "interaction_mode",
                                "skip_mode",  "num_classes",   "resolution",     "depths",
                                "seed",       "allow_padding"};
  for (const auto& [key, _] : j.items())
    if (std::find_if(std::begin(known), std::end(known), [&](const char* k) { return key == k; }) == std::end(known))
      throw ConfigError("unknown config key '" + key + "'");

  ModelConfig c;
  if (j.contains("variant")) c.variant = parse_variant(get_as<std::string>(j, "variant"));
  if (j.contains("base_channels")) c.base_channels = get_as<std::size_t>(j, "base_channels");
  if (j.contains("patch_schedule")) c.patch_schedule = get_stages(j, "patch_schedule");
  if (j.contains("interaction_mode"))
    c.interaction_mode = nn::parse_interaction_mode(get_as<std::string>(j, "interaction_mode"));
  if (j.contains("skip_mode")) c.skip_mode = parse_skip_mode(get_as<std::string>(j, "skip_mode"));
  if (j.contains("num_classes")) c.num_classes = get_as<std::size_t>(j, "num_classes");
  if (j.contains("resolution")) c.resolution = get_as<std::size_t>(j, "resolution");
  if (j.contains("depths")) c.depths = get_stages(j, "depths");
  if (j.contains("seed")) c.seed = get_as<std::uint64_t>(j, "seed");
  if (j.contains("allow_padding")) c.allow_padding = get_as<bool>(j, "allow_padding");
  return c;
}

ModelConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return config_from_json(ss.str());
}

std::string config_to_json(const ModelConfig& c) {
  json j;
  j["variant"] = std::string(to_string(c.variant));
  j["base_channels"] = c.base_channels;
  j["patch_schedule"] = std::vector<std::size_t>(c.patch_schedule.begin(), c.patch_schedule.end());
  j["interaction_mode"] = std::string(nn::to_string(c.interaction_mode));
  j["skip_mode"] = std::string(to_string(c.skip_mode));
  j["num_classes"] = c.num_classes;
  j["resolution"] = c.resolution;
  j["depths"] = std::vector<std::size_t>(c.depths.begin(), c.depths.end());
  j["seed"] = c.seed;
  j["allow_padding"] = c.allow_padding;
  return j.dump(2);
}

void apply_env_overrides(ModelConfig& cfg) {
  const char* s = std::getenv("SEGNETR_SEED");
  if (!s || !*s) return;
  char* end = nullptr;
  const auto v = std::strtoull(s, &end, 10);
  if (*end != '\0') throw ConfigError(std::string("SEGNETR_SEED is not an unsigned integer: ") + s);
  cfg.seed = v;
}

// -------------------- validation --------------------

std::vector<StageGeometry> stage_geometry(const ModelConfig& cfg, std::size_t height, std::size_t width) {
  auto fail = [](const std::string& what) { throw ConfigError(what); };
  if (cfg.base_channels == 0) fail("base_channels must be positive");
  if (cfg.skip_mode == SkipMode::irsc && cfg.base_channels % 2)
    fail("base_channels=" + std::to_string(cfg.base_channels) + " must be even for skip_mode irsc (C/2 restored channels)");
  if (cfg.num_classes < 2) fail("num_classes must be at least 2");

  const bool segnetr = cfg.variant == Variant::segnetr;
  // SegNetr: stem halves, then three merges. Baseline: three merges from full resolution.
  const std::size_t stride = segnetr ? 16 : 8;
  if (height == 0 || width == 0 || height % stride || width % stride)
    fail("input " + std::to_string(height) + "x" + std::to_string(width) + " must be a positive multiple of " +
         std::to_string(stride) + " for variant " + std::string(to_string(cfg.variant)));

  std::vector<StageGeometry> geo;
  for (std::size_t s = 0; s < kStages; ++s) {
    const std::size_t shift = segnetr ? s + 1 : s;
    StageGeometry g{height >> shift, width >> shift, cfg.stage_channels(s), segnetr ? cfg.patch_schedule[s] : 0};
    if (segnetr) {
      const auto mode = cfg.interaction_mode;
      const std::size_t p = g.patch;
      const std::string where = "patch_schedule[" + std::to_string(s) + "]=" + std::to_string(p) + " at stage " +
                                std::to_string(s) + " (" + std::to_string(g.height) + "x" + std::to_string(g.width) + ")";
      if (p == 0) fail(where + ": patch size must be positive");
      if (nn::uses_local(mode) && !cfg.allow_padding && (g.height % p || g.width % p))
        fail(where + ": local window P does not divide the stage extent");
      if (nn::uses_global(mode)) {
        if (g.height % p || g.width % p) fail(where + ": displacement needs P to divide the stage extent");
        if (!cfg.allow_padding && (g.height % (2 * p) || g.width % (2 * p)))
          fail(where + ": global window 2P=" + std::to_string(2 * p) +
               " does not divide the stage extent (set allow_padding to pad)");
      }
    }
    geo.push_back(g);
  }
  return geo;
}

void validate(const ModelConfig& cfg) { stage_geometry(cfg, cfg.resolution, cfg.resolution); }

// -------------------- skip cache --------------------

template <typename T>
void SkipCache<T>::put(std::size_t stage, Tensor<T> t) {
  if (!pending_.emplace(stage, std::move(t)).second)
    throw ContractError("skip for stage " + std::to_string(stage) + " cached twice");
}

template <typename T>
Tensor<T> SkipCache<T>::take(std::size_t stage) {
  auto it = pending_.find(stage);
  if (it == pending_.end())
    throw ContractError("skip for stage " + std::to_string(stage) + " missing or already consumed");
  auto t = std::move(it->second);
  pending_.erase(it);
  return t;
}

template <typename T>
void SkipCache<T>::finish() const {
  if (!pending_.empty())
    throw ContractError("skip for stage " + std::to_string(pending_.begin()->first) + " was never consumed");
}

// -------------------- network --------------------

template <typename T>
Network<T>::Network(ModelConfig cfg) : cfg_(std::move(cfg)), reg_(cfg_.seed) {
  validate(cfg_);
}

template <typename T>
Tensor<T> Network<T>::forward(const Tensor<T>& x, bool training) {
  if (x.rank() != 4 || x.dim(1) != 3 || x.dim(2) != cfg_.resolution || x.dim(3) != cfg_.resolution)
    throw ShapeError("model expects [N,3," + std::to_string(cfg_.resolution) + "," + std::to_string(cfg_.resolution) +
                     "], got " + to_string(x.shape()));
  return run(x, training);
}

template <typename T>
Tensor<T> Network<T>::forward_any(const Tensor<T>& x, bool training) {
  if (x.rank() != 4 || x.dim(1) != 3) throw ShapeError("model expects [N,3,H,W], got " + to_string(x.shape()));
  try {
    stage_geometry(cfg_, x.dim(2), x.dim(3));
  } catch (const ConfigError& e) {
    throw ShapeError(e.what());
  }
  return run(x, training);
}

namespace {

std::string stage_name(const char* prefix, std::size_t s) { return prefix + std::to_string(s); }

template <typename T>
Tensor<T> fuse_skip(SkipMode mode, const Tensor<T>& skip, const Tensor<T>& up) {
  cost::Scope sc("skip");
  if (mode == SkipMode::concat) return concat(std::vector<Tensor<T>>{up, skip}, 1);
  return nn::to_channels_first(nn::irsc_fuse(skip, nn::to_channels_last(up)));
}

template <typename T>
Tensor<T> merge_patches(const Tensor<T>& x) {
  return nn::to_channels_first(layout::patch_merge(nn::to_channels_last(x)));
}

std::size_t fused_channels(SkipMode mode, std::size_t c) { return mode == SkipMode::concat ? 2 * c : c + c / 2; }

}  // namespace

// -------------------- SegNetr --------------------

template <typename T>
SegNetr<T>::SegNetr(const ModelConfig& cfg) : Network<T>(cfg) {
  auto& reg = this->reg_;
  const auto& c = this->cfg_;
  const layout::PartitionOptions popt{c.allow_padding, layout::ParityRule::cross_axis};

  stem_ = nn::Conv2d<T>(reg, "stem.conv", 3, c.base_channels, 3, {2, 1, 1});
  stem_bn_ = nn::BatchNorm2d<T>(reg, "stem.bn", c.base_channels);
  for (std::size_t s = 0; s < kStages; ++s) {
    const auto name = stage_name("enc", s);
    for (std::size_t b = 0; b < c.depths[s]; ++b)
      encoder_[s].emplace_back(reg, name + ".block" + std::to_string(b), c.stage_channels(s), c.patch_schedule[s],
                               c.interaction_mode, popt);
    if (s + 1 < kStages) {
      merge_[s].proj = nn::Conv2d<T>(reg, name + ".merge.conv", 4 * c.stage_channels(s), c.stage_channels(s + 1), 1);
      merge_[s].bn = nn::BatchNorm2d<T>(reg, name + ".merge.bn", c.stage_channels(s + 1));
    }
  }
  for (std::size_t d = kStages - 1; d-- > 0;) {
    const auto name = stage_name("dec", d);
    const std::size_t ch = c.stage_channels(d);
    auto& dec = decoder_[d];
    dec.up_proj = nn::Conv2d<T>(reg, name + ".up.conv", c.stage_channels(d + 1), ch, 1);
    dec.up_bn = nn::BatchNorm2d<T>(reg, name + ".up.bn", ch);
    dec.fuse = nn::Conv2d<T>(reg, name + ".fuse.conv", fused_channels(c.skip_mode, ch), ch, 1);
    dec.fuse_bn = nn::BatchNorm2d<T>(reg, name + ".fuse.bn", ch);
    for (std::size_t b = 0; b < c.depths[d]; ++b)
      dec.blocks.emplace_back(reg, name + ".block" + std::to_string(b), ch, c.patch_schedule[d], c.interaction_mode,
                              popt);
  }
  head_ = nn::Conv2d<T>(reg, "head.conv", c.base_channels, c.num_classes, 1, {}, true);
}

template <typename T>
std::vector<nn::SegnetrBlock<T>*> SegNetr<T>::blocks() {
  std::vector<nn::SegnetrBlock<T>*> out;
  for (auto& stage : encoder_)
    for (auto& b : stage) out.push_back(&b);
  for (std::size_t d = kStages - 1; d-- > 0;)
    for (auto& b : decoder_[d].blocks) out.push_back(&b);
  return out;
}

template <typename T>
Tensor<T> SegNetr<T>::run(const Tensor<T>& x, bool training) {
  const auto& c = this->cfg_;
  SkipCache<T> skips;
  Tensor<T> h;
  {
    cost::Scope sc("stem");
    h = activation(stem_bn_.forward(stem_.forward(x), training), Activation::silu);
  }
  for (std::size_t s = 0; s < kStages; ++s) {
    cost::Scope sc(stage_name("enc", s));
    for (auto& b : encoder_[s]) h = b.forward(h, training);
    if (s + 1 == kStages) break;
    cost::Scope m("merge");
    if (c.skip_mode == SkipMode::concat) skips.put(s, h);
    auto pm = layout::patch_merge(nn::to_channels_last(h));
    if (c.skip_mode == SkipMode::irsc) skips.put(s, pm);
    h = merge_[s].bn.forward(merge_[s].proj.forward(nn::to_channels_first(pm)), training);
  }
  for (std::size_t d = kStages - 1; d-- > 0;) {
    cost::Scope sc(stage_name("dec", d));
    auto& dec = decoder_[d];
    Tensor<T> up;
    {
      cost::Scope u("up");
      up = dec.up_bn.forward(dec.up_proj.forward(upsample_bilinear2x(h)), training);
    }
    auto fused = fuse_skip(c.skip_mode, skips.take(d), up);
    {
      cost::Scope f("fuse");
      h = activation(dec.fuse_bn.forward(dec.fuse.forward(fused), training), Activation::silu);
    }
    for (auto& b : dec.blocks) h = b.forward(h, training);
  }
  skips.finish();
  cost::Scope sc("head");
  return upsample_bilinear2x(head_.forward(h));
}

// -------------------- mini U-Net --------------------

template <typename T>
MiniUNet<T>::MiniUNet(const ModelConfig& cfg) : Network<T>(cfg) {
  auto& reg = this->reg_;
  const auto& c = this->cfg_;
  auto make_body = [&](const std::string& name, std::size_t in, std::size_t out) {
    DoubleConv d;
    d.conv1 = nn::Conv2d<T>(reg, name + ".conv1", in, out, 3, {1, 1, 1});
    d.bn1 = nn::BatchNorm2d<T>(reg, name + ".bn1", out);
    d.conv2 = nn::Conv2d<T>(reg, name + ".conv2", out, out, 3, {1, 1, 1});
    d.bn2 = nn::BatchNorm2d<T>(reg, name + ".bn2", out);
    return d;
  };
  for (std::size_t s = 0; s < kStages; ++s) {
    const auto name = stage_name("enc", s);
    encoder_[s].body = make_body(name + ".body", s == 0 ? 3 : c.stage_channels(s), c.stage_channels(s));
    if (s + 1 < kStages) {
      encoder_[s].proj = nn::Conv2d<T>(reg, name + ".merge.conv", 4 * c.stage_channels(s), c.stage_channels(s + 1), 1);
      encoder_[s].bn = nn::BatchNorm2d<T>(reg, name + ".merge.bn", c.stage_channels(s + 1));
    }
  }
  for (std::size_t d = kStages - 1; d-- > 0;) {
    const auto name = stage_name("dec", d);
    const std::size_t ch = c.stage_channels(d);
    decoder_[d].proj = nn::Conv2d<T>(reg, name + ".up.conv", c.stage_channels(d + 1), ch, 1);
    decoder_[d].bn = nn::BatchNorm2d<T>(reg, name + ".up.bn", ch);
    decoder_[d].body = make_body(name + ".body", fused_channels(c.skip_mode, ch), ch);
  }
  head_ = nn::Conv2d<T>(reg, "head.conv", c.base_channels, c.num_classes, 1, {}, true);
}

template <typename T>
Tensor<T> MiniUNet<T>::double_conv(DoubleConv& d, const Tensor<T>& x, bool training) {
  cost::Scope sc("body");
  auto h = activation(d.bn1.forward(d.conv1.forward(x), training), Activation::relu);
  return activation(d.bn2.forward(d.conv2.forward(h), training), Activation::relu);
}

template <typename T>
Tensor<T> MiniUNet<T>::run(const Tensor<T>& x, bool training) {
  const auto& c = this->cfg_;
  SkipCache<T> skips;
  Tensor<T> h = x;
  for (std::size_t s = 0; s < kStages; ++s) {
    cost::Scope sc(stage_name("enc", s));
    h = double_conv(encoder_[s].body, h, training);
    if (s + 1 == kStages) break;
    cost::Scope m("merge");
    if (c.skip_mode == SkipMode::concat) skips.put(s, h);
    auto pm = layout::patch_merge(nn::to_channels_last(h));
    if (c.skip_mode == SkipMode::irsc) skips.put(s, pm);
    h = encoder_[s].bn.forward(encoder_[s].proj.forward(nn::to_channels_first(pm)), training);
  }
  for (std::size_t d = kStages - 1; d-- > 0;) {
    cost::Scope sc(stage_name("dec", d));
    Tensor<T> up;
    {
      cost::Scope u("up");
      up = decoder_[d].bn.forward(decoder_[d].proj.forward(upsample_bilinear2x(h)), training);
    }
    h = double_conv(decoder_[d].body, fuse_skip(c.skip_mode, skips.take(d), up), training);
  }
  skips.finish();
  cost::Scope sc("head");
  return head_.forward(h);
}

// -------------------- builders --------------------

template <typename T>
std::unique_ptr<Network<T>> build_segnetr(const ModelConfig& cfg) {
  auto c = cfg;
  c.variant = Variant::segnetr;
  return std::make_unique<SegNetr<T>>(c);
}

template <typename T>
std::unique_ptr<Network<T>> build_mini_unet(const ModelConfig& cfg, SkipMode skip) {
  auto c = cfg;
  c.variant = Variant::mini_unet;
  c.skip_mode = skip;
  return std::make_unique<MiniUNet<T>>(c);
}

template <typename T>
std::unique_ptr<Network<T>> build_model(const ModelConfig& cfg) {
  if (cfg.variant == Variant::mini_unet) return build_mini_unet<T>(cfg, cfg.skip_mode);
  return build_segnetr<T>(cfg);
}

#define SEGNETR_INSTANTIATE_MODEL(T)                                                         \
  template class SkipCache<T>;                                                               \
  template class Network<T>;                                                                 \
  template class SegNetr<T>;                                                                 \
  template class MiniUNet<T>;                                                                \
  template std::unique_ptr<Network<T>> build_segnetr<T>(const ModelConfig&);                 \
  template std::unique_ptr<Network<T>> build_mini_unet<T>(const ModelConfig&, SkipMode);     \
  template std::unique_ptr<Network<T>> build_model<T>(const ModelConfig&);

SEGNETR_INSTANTIATE_MODEL(float)
SEGNETR_INSTANTIATE_MODEL(double)

}  // namespace segnetr::model
