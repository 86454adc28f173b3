#pragma once

#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <string_view>
#include <vector>

#include "segnetr/layout.hpp"
#include "segnetr/ops.hpp"
#include "segnetr/tensor.hpp"

namespace segnetr::nn {

enum class TensorKind { parameter, buffer };

template <typename T>
struct NamedTensor {
  std::string name;
  Tensor<T> tensor;
  TensorKind kind;
};

struct Init {
  enum class Kind { zeros, ones, constant, kaiming_uniform };
  Kind kind = Kind::zeros;
  std::size_t fan_in = 1;
  double value = 0;

  static Init zeros() { return {Kind::zeros, 1, 0}; }
  static Init ones() { return {Kind::ones, 1, 1}; }
  static Init constant(double v) { return {Kind::constant, 1, v}; }
  /// U(-b, b) with b = sqrt(6 / fan_in).
  static Init kaiming(std::size_t fan_in) { return {Kind::kaiming_uniform, fan_in, 0}; }
};

/// Owns the ordered list of every learnable tensor and buffer of a network.
/// Registration order is construction order and fixes checkpoint layout.
template <typename T>
class Registry {
public:
  explicit Registry(std::uint64_t seed) : rng_(seed) {}

  Tensor<T> parameter(std::string name, Shape shape, Init init);
  Tensor<T> buffer(std::string name, Shape shape, T fill);

  const std::vector<NamedTensor<T>>& tensors() const { return tensors_; }
  std::vector<Tensor<T>> parameters() const;
  std::size_t parameter_count() const;

private:
  std::mt19937_64 rng_;
  std::vector<NamedTensor<T>> tensors_;
};

std::string join_name(std::string_view prefix, std::string_view leaf);

// -------------------- layers --------------------

template <typename T>
class Conv2d {
public:
  Conv2d() = default;
  Conv2d(Registry<T>& reg, const std::string& name, std::size_t in, std::size_t out, std::size_t kernel,
         Conv2dOptions opt = {}, bool bias = false);
  Tensor<T> forward(const Tensor<T>& x) const;

  Tensor<T> weight;
  std::optional<Tensor<T>> bias;

private:
  std::string scope_;
  Conv2dOptions opt_{};
};

template <typename T>
class BatchNorm2d {
public:
  BatchNorm2d() = default;
  BatchNorm2d(Registry<T>& reg, const std::string& name, std::size_t channels);
  Tensor<T> forward(const Tensor<T>& x, bool training);

  Tensor<T> gamma, beta, running_mean, running_var;

private:
  std::string scope_;
};

template <typename T>
class LayerNorm {
public:
  LayerNorm() = default;
  LayerNorm(Registry<T>& reg, const std::string& name, std::size_t features);
  Tensor<T> forward(const Tensor<T>& x) const;

  Tensor<T> gamma, beta;

private:
  std::string scope_;
};

template <typename T>
class Linear {
public:
  Linear() = default;
  Linear(Registry<T>& reg, const std::string& name, std::size_t in, std::size_t out);
  Tensor<T> forward(const Tensor<T>& x) const;

  Tensor<T> weight, bias;

private:
  std::string scope_;
};

// -------------------- blocks --------------------

/// Mobile inverted bottleneck on [N,C,H,W]:
/// expand 1x1 (x4) -> BN -> SiLU -> depthwise 3x3 -> BN -> SiLU
/// -> squeeze-excitation (avg pool, 4C -> C -> 4C, sigmoid gate)
/// -> project 1x1 -> BN -> + input.
template <typename T>
class MBConv {
public:
  static constexpr std::size_t kExpansion = 4;
  static constexpr std::size_t kSeReduction = 4;

  MBConv() = default;
  MBConv(Registry<T>& reg, const std::string& name, std::size_t channels);
  Tensor<T> forward(const Tensor<T>& x, bool training);

  std::size_t channels() const { return channels_; }

  Conv2d<T> expand, depthwise, se_reduce, se_expand, project;
  BatchNorm2d<T> bn_expand, bn_depthwise, bn_project;

private:
  std::string scope_;
  std::size_t channels_ = 0;
};

enum class BranchKind { local, global };

/// Spatial window attention: per window, channel mean -> flatten -> LayerNorm
/// -> FFN (area -> 2 area -> area, GELU) -> softmax over the window area. The
/// input is reweighted by area * attention so a uniform map is the identity.
template <typename T>
class WindowBranch {
public:
  WindowBranch() = default;
  WindowBranch(Registry<T>& reg, const std::string& name, BranchKind kind, std::size_t patch,
               layout::PartitionOptions opt = {});

  /// Attention rows (num_windows, window_area) for a channels-last stack.
  Tensor<T> window_attention(const layout::WindowStack<T>& ws) const;

  /// x: [N,C,H,W] -> same shape.
  Tensor<T> forward(const Tensor<T>& x);

  /// Attention rows of the most recent forward call.
  const Tensor<T>& last_attention() const { return last_attention_; }

  BranchKind kind() const { return kind_; }
  std::size_t patch() const { return patch_; }
  std::size_t window() const { return kind_ == BranchKind::local ? patch_ : 2 * patch_; }
  std::size_t area() const { return window() * window(); }

  LayerNorm<T> norm;
  Linear<T> fc1, fc2;

private:
  std::string scope_;
  BranchKind kind_ = BranchKind::local;
  std::size_t patch_ = 1;
  layout::PartitionOptions opt_{};
  Tensor<T> last_attention_;
};

enum class InteractionMode { without, local, global, series, parallel };

InteractionMode parse_interaction_mode(std::string_view s);
std::string_view to_string(InteractionMode m);
bool uses_local(InteractionMode m);
bool uses_global(InteractionMode m);

/// m = mbconv(x); branches fused by learnable scalar weights:
///  without  m
///  local    m + a_l * L(m)
///  global   m + a_g * G(m)
///  parallel m + a_l * L(m) + a_g * G(m)
///  series   m + a_g * G(m + a_l * L(m))
template <typename T>
class SegnetrBlock {
public:
  SegnetrBlock() = default;
  SegnetrBlock(Registry<T>& reg, const std::string& name, std::size_t channels, std::size_t patch,
               InteractionMode mode, layout::PartitionOptions opt = {});
  Tensor<T> forward(const Tensor<T>& x, bool training);

  InteractionMode mode() const { return mode_; }

  MBConv<T> mbconv;
  std::optional<WindowBranch<T>> local, global;
  std::optional<Tensor<T>> alpha_local, alpha_global;

private:
  std::string scope_;
  InteractionMode mode_ = InteractionMode::parallel;
};

// -------------------- skip connections --------------------

/// x_pr = patch_reverse(alternate_select(encoder_pm)):
/// (N, h, w, 4C) -> (N, 2h, 2w, C/2).
template <typename T>
Tensor<T> irsc_skip(const Tensor<T>& encoder_pm);

/// Channel concatenation [decoder_up, x_pr]; both channels-last. Adds no
/// learnable parameters.
template <typename T>
Tensor<T> irsc_fuse(const Tensor<T>& encoder_pm, const Tensor<T>& decoder_up);

// NCHW <-> NHWC
template <typename T>
Tensor<T> to_channels_last(const Tensor<T>& x);
template <typename T>
Tensor<T> to_channels_first(const Tensor<T>& x);

}  // namespace segnetr::nn
