#include "segnetr/optim.hpp"

#include <algorithm>
#include <cmath>

namespace segnetr {

template <typename T>
Adam<T>::Adam(std::vector<Tensor<T>> params, AdamOptions opt) : params_(std::move(params)), opt_(opt) {
  for (const auto& p : params_) {
    m_.emplace_back(p.numel(), T(0));
    v_.emplace_back(p.numel(), T(0));
  }
}

template <typename T>
void Adam<T>::step() {
  ++t_;
  const double bc1 = 1.0 - std::pow(opt_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(opt_.beta2, static_cast<double>(t_));
  const T b1 = static_cast<T>(opt_.beta1), b2 = static_cast<T>(opt_.beta2);
  const T step_size = static_cast<T>(opt_.lr / bc1);
  const T inv_bc2 = static_cast<T>(1.0 / bc2);
  const T eps = static_cast<T>(opt_.eps);
  for (std::size_t i = 0; i < params_.size(); ++i) {
    auto& p = params_[i];
    if (p.numel() != m_[i].size()) throw ShapeError("adam: parameter shape changed after construction");
    auto data = p.data();
    const bool has = p.has_grad();
    auto grad = p.grad();
    auto& m = m_[i];
    auto& v = v_[i];
    for (std::size_t j = 0; j < data.size(); ++j) {
      const T g = has ? grad[j] : T(0);
      m[j] = b1 * m[j] + (T(1) - b1) * g;
      v[j] = b2 * v[j] + (T(1) - b2) * g * g;
      data[j] -= step_size * m[j] / (std::sqrt(v[j] * inv_bc2) + eps);
    }
  }
}

template <typename T>
void Adam<T>::zero_grad() {
  for (auto& p : params_) p.zero_grad();
}

template <typename T>
GradCheckResult grad_check(const ScalarFn<T>& f, std::vector<Tensor<T>> inputs, double step) {
  clear_record<T>();
  for (auto& in : inputs) {
    in.set_requires_grad(true);
    in.zero_grad();
  }
  auto loss = f(inputs);
  backward(loss);

  GradCheckResult res;
  double diff2 = 0, a2 = 0, n2 = 0;
  NoGradGuard no_grad;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    auto& in = inputs[k];
    std::vector<T> analytic(in.numel(), T(0));
    if (in.has_grad()) std::copy(in.grad().begin(), in.grad().end(), analytic.begin());
    auto data = in.data();
    for (std::size_t j = 0; j < data.size(); ++j) {
      const T orig = data[j];
      data[j] = static_cast<T>(orig + step);
      const double fp = static_cast<double>(f(inputs).item());
      data[j] = static_cast<T>(orig - step);
      const double fm = static_cast<double>(f(inputs).item());
      data[j] = orig;
      const double numeric = (fp - fm) / (2.0 * step);
      const double a = static_cast<double>(analytic[j]);
      const double denom = std::max({std::abs(a), std::abs(numeric), 1e-8});
      const double rel = std::abs(a - numeric) / denom;
      diff2 += (a - numeric) * (a - numeric);
      a2 += a * a;
      n2 += numeric * numeric;
      ++res.coordinates;
      if (rel > res.max_rel_error) {
        res.max_rel_error = rel;
        res.worst = "input[" + std::to_string(k) + "].flat[" + std::to_string(j) + "]";
      }
    }
  }
  res.norm_rel_error = std::sqrt(diff2) / std::max({std::sqrt(a2), std::sqrt(n2), 1e-8});
  return res;
}

template class Adam<float>;
template class Adam<double>;
template GradCheckResult grad_check<float>(const ScalarFn<float>&, std::vector<Tensor<float>>, double);
template GradCheckResult grad_check<double>(const ScalarFn<double>&, std::vector<Tensor<double>>, double);

}  // namespace segnetr
