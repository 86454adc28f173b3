#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "segnetr/tensor.hpp"

namespace segnetr {

struct AdamOptions {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Adam with bias correction. Moment buffers are bound to the parameter list
/// given at construction and must keep matching its shapes.
template <typename T>
class Adam {
public:
  Adam(std::vector<Tensor<T>> params, AdamOptions opt = {});

  /// One update from the gradients currently held by the parameters.
  /// Parameters without a gradient are treated as having a zero gradient.
  void step();
  void zero_grad();

  std::uint64_t steps() const { return t_; }
  const AdamOptions& options() const { return opt_; }
  const std::vector<std::vector<T>>& first_moment() const { return m_; }
  const std::vector<std::vector<T>>& second_moment() const { return v_; }

private:
  std::vector<Tensor<T>> params_;
  AdamOptions opt_;
  std::vector<std::vector<T>> m_, v_;
  std::uint64_t t_ = 0;
};

// -------------------- finite-difference checking --------------------

/// Scalar-valued function of a list of tensors, built from recorded ops.
template <typename T>
using ScalarFn = std::function<Tensor<T>(const std::vector<Tensor<T>>&)>;

struct GradCheckResult {
  double max_rel_error = 0;
  double norm_rel_error = 0;  // |a - n|_2 / max(|a|_2, |n|_2, 1e-8) over all coordinates
  std::size_t coordinates = 0;
  std::string worst;  // "input[i].flat[j]"
};

/// Compares recorded gradients of every input against central differences
/// (f(x+h) - f(x-h)) / 2h. Relative error is |a-b| / max(|a|, |b|, 1e-8).
template <typename T>
GradCheckResult grad_check(const ScalarFn<T>& f, std::vector<Tensor<T>> inputs, double step = 1e-4);

extern template class Adam<float>;
extern template class Adam<double>;

}  // namespace segnetr
