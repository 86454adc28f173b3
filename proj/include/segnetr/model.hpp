#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "segnetr/nn.hpp"

namespace segnetr::model {

enum class Variant { segnetr, mini_unet };
enum class SkipMode { irsc, concat };

Variant parse_variant(std::string_view s);
std::string_view to_string(Variant v);
SkipMode parse_skip_mode(std::string_view s);
std::string_view to_string(SkipMode m);

inline constexpr std::size_t kStages = 4;

/// Declarative network description. JSON keys mirror the field names.
struct ModelConfig {
  Variant variant = Variant::segnetr;
  std::size_t base_channels = 64;
  std::array<std::size_t, kStages> patch_schedule{8, 4, 2, 1};  // local P; global windows are 2P
  nn::InteractionMode interaction_mode = nn::InteractionMode::parallel;
  SkipMode skip_mode = SkipMode::irsc;
  std::size_t num_classes = 2;
  std::size_t resolution = 224;
  std::array<std::size_t, kStages> depths{1, 1, 1, 2};  // blocks per stage; decoder stage d reuses depths[d]
  std::uint64_t seed = 0;
  bool allow_padding = false;  // pad partitions whose window does not divide the stage extent

  std::size_t stage_channels(std::size_t s) const { return base_channels << s; }
  std::array<std::size_t, kStages> global_schedule() const;
};

ModelConfig config_from_json(const std::string& text);
ModelConfig load_config(const std::string& path);
std::string config_to_json(const ModelConfig& cfg);

/// SEGNETR_SEED, when set, replaces cfg.seed.
void apply_env_overrides(ModelConfig& cfg);

struct StageGeometry {
  std::size_t height = 0, width = 0, channels = 0, patch = 0;
};

/// Per-stage extents for an H x W input. Throws ConfigError naming the first
/// violated constraint.
std::vector<StageGeometry> stage_geometry(const ModelConfig& cfg, std::size_t height, std::size_t width);

/// Full validation at the configured resolution.
void validate(const ModelConfig& cfg);

/// Encoder skips keyed by stage. Each stored skip must be taken exactly once
/// before the forward pass ends.
template <typename T>
class SkipCache {
public:
  void put(std::size_t stage, Tensor<T> t);
  Tensor<T> take(std::size_t stage);
  void finish() const;  // throws ContractError if a skip was never consumed

private:
  std::map<std::size_t, Tensor<T>> pending_;
};

template <typename T>
class Network {
public:
  explicit Network(ModelConfig cfg);
  virtual ~Network() = default;
  Network(const Network&) = delete;
  Network& operator=(const Network&) = delete;

  /// x: [N,3,R,R] with R the configured resolution -> logits [N,K,R,R].
  Tensor<T> forward(const Tensor<T>& x, bool training = false);

  /// Same network on any extents satisfying the stage constraints.
  Tensor<T> forward_any(const Tensor<T>& x, bool training = false);

  const ModelConfig& config() const { return cfg_; }
  nn::Registry<T>& registry() { return reg_; }
  const nn::Registry<T>& registry() const { return reg_; }
  std::vector<Tensor<T>> parameters() const { return reg_.parameters(); }
  std::size_t parameter_count() const { return reg_.parameter_count(); }

  /// Interaction blocks in forward order (empty for the conv baseline).
  virtual std::vector<nn::SegnetrBlock<T>*> blocks() { return {}; }

protected:
  virtual Tensor<T> run(const Tensor<T>& x, bool training) = 0;

  ModelConfig cfg_;
  nn::Registry<T> reg_;
};

template <typename T>
class SegNetr final : public Network<T> {
public:
  explicit SegNetr(const ModelConfig& cfg);
  std::vector<nn::SegnetrBlock<T>*> blocks() override;

private:
  Tensor<T> run(const Tensor<T>& x, bool training) override;

  struct Merge {
    nn::Conv2d<T> proj;
    nn::BatchNorm2d<T> bn;
  };
  struct Decoder {
    nn::Conv2d<T> up_proj;
    nn::BatchNorm2d<T> up_bn;
    nn::Conv2d<T> fuse;
    nn::BatchNorm2d<T> fuse_bn;
    std::vector<nn::SegnetrBlock<T>> blocks;
  };

  nn::Conv2d<T> stem_;
  nn::BatchNorm2d<T> stem_bn_;
  std::array<std::vector<nn::SegnetrBlock<T>>, kStages> encoder_;
  std::array<Merge, kStages - 1> merge_;
  std::array<Decoder, kStages - 1> decoder_;
  nn::Conv2d<T> head_;
};

/// Four-stage conv U-Net (two 3x3 conv + BN + ReLU per stage) with the same
/// patch-merge downsampling and a pluggable skip.
template <typename T>
class MiniUNet final : public Network<T> {
public:
  explicit MiniUNet(const ModelConfig& cfg);

private:
  Tensor<T> run(const Tensor<T>& x, bool training) override;

  struct DoubleConv {
    nn::Conv2d<T> conv1, conv2;
    nn::BatchNorm2d<T> bn1, bn2;
  };
  struct Stage {
    DoubleConv body;
    nn::Conv2d<T> proj;  // encoder: merge projection; decoder: upsample projection
    nn::BatchNorm2d<T> bn;
  };

  Tensor<T> double_conv(DoubleConv& d, const Tensor<T>& x, bool training);

  std::array<Stage, kStages> encoder_;
  std::array<Stage, kStages - 1> decoder_;
  nn::Conv2d<T> head_;
};

template <typename T>
std::unique_ptr<Network<T>> build_segnetr(const ModelConfig& cfg);

template <typename T>
std::unique_ptr<Network<T>> build_mini_unet(const ModelConfig& cfg, SkipMode skip);

/// Dispatches on cfg.variant.
template <typename T>
std::unique_ptr<Network<T>> build_model(const ModelConfig& cfg);

}  // namespace segnetr::model
