#pragma once

#include <cstddef>
#include <memory>
#include <optional>
#include <span>
#include <vector>

#include "segnetr/tensor.hpp"

namespace segnetr {

// -------------------- rearrangement --------------------
// All rearrangements are value-preserving and contribute no arithmetic.

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape);

template <typename T>
Tensor<T> permute(const Tensor<T>& x, const std::vector<std::size_t>& perm);

template <typename T>
Tensor<T> slice(const Tensor<T>& x, std::size_t axis, std::size_t begin, std::size_t end);

template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& xs, std::size_t axis);

inline constexpr std::size_t kPadIndex = static_cast<std::size_t>(-1);

/// out.flat[i] = x.flat[index[i]], or zero where index[i] == kPadIndex.
/// Backward scatters (additively) along the same map. This is the primitive
/// underneath every layout transform.
template <typename T>
Tensor<T> gather(const Tensor<T>& x, Shape out_shape,
                 std::shared_ptr<const std::vector<std::size_t>> index);

// -------------------- elementwise --------------------
// Binary ops broadcast `b` against `a`: each extent of b equals a's or is 1
// (missing leading axes count as 1).

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);

template <typename T>
Tensor<T> scale(const Tensor<T>& x, T factor);

enum class Activation { gelu, silu, sigmoid, relu };

/// gelu uses the tanh approximation
/// 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3))).
template <typename T>
Tensor<T> activation(const Tensor<T>& x, Activation kind);

// -------------------- reductions --------------------

template <typename T>
Tensor<T> sum(const Tensor<T>& x);

template <typename T>
Tensor<T> mean(const Tensor<T>& x, std::size_t axis, bool keepdim = true);

template <typename T>
Tensor<T> softmax(const Tensor<T>& x, std::size_t axis);

// -------------------- layers --------------------

struct Conv2dOptions {
  std::size_t stride = 1;
  std::size_t padding = 0;
  std::size_t groups = 1;
};

/// Cross-correlation. x: [N,C,H,W], w: [O, C/groups, kH, kW], b: [O].
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, const std::optional<Tensor<T>>& b,
                 Conv2dOptions opt = {});

/// Affine map over the trailing axis. w: [d_out, d_in], b: [d_out].
template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const std::optional<Tensor<T>>& b);

struct BatchNormState {
  double momentum = 0.1;
  double eps = 1e-5;
};

/// Per-channel normalization of [N,C,H,W]. In training mode uses batch
/// statistics and updates the running buffers (unbiased variance); otherwise
/// uses the running buffers.
template <typename T>
Tensor<T> batch_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                     Tensor<T>& running_mean, Tensor<T>& running_var, bool training,
                     BatchNormState opt = {});

/// Normalization over the trailing axis.
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                     double eps = 1e-5);

/// x2 bilinear upsampling of [N,C,H,W], align_corners=false (half-pixel
/// centres, source coordinate clamped at the border).
template <typename T>
Tensor<T> upsample_bilinear2x(const Tensor<T>& x);

/// Mean negative log-softmax of the target class over all N*H*W pixels.
/// logits: [N,K,H,W]; target: N*H*W class indices.
template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& logits, std::span<const int> target);

}  // namespace segnetr
