#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace segnetr {

using Shape = std::vector<std::size_t>;

// -------------------- errors --------------------
class Error : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};
class ShapeError : public Error {
public:
  using Error::Error;
};
class LayoutError : public Error {
public:
  using Error::Error;
};
class ContractError : public Error {
public:
  using Error::Error;
};
class ConfigError : public Error {
public:
  using Error::Error;
};
class ValidationError : public Error {
public:
  using Error::Error;
};
class NumericError : public Error {
public:
  using Error::Error;
};

std::size_t numel(const Shape& shape);
std::string to_string(const Shape& shape);

template <typename T>
struct TensorImpl {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;  // empty until first accumulation
  bool requires_grad = false;
  std::optional<std::size_t> node_id;

  void ensure_grad() {
    if (grad.empty()) grad.assign(data.size(), T(0));
  }
};

/// Dense row-major tensor with shared storage. Copies alias the same buffer;
/// use clone() for a deep copy.
template <typename T>
class Tensor {
public:
  Tensor();
  explicit Tensor(Shape shape, T fill = T(0));
  Tensor(Shape shape, std::vector<T> values);

  static Tensor scalar(T value) { return Tensor(Shape{}, std::vector<T>{value}); }

  const Shape& shape() const { return impl_->shape; }
  std::size_t rank() const { return impl_->shape.size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t numel() const { return impl_->data.size(); }

  std::span<T> data() { return impl_->data; }
  std::span<const T> data() const { return impl_->data; }
  T item() const;

  bool requires_grad() const { return impl_->requires_grad; }
  Tensor& set_requires_grad(bool on);
  bool has_grad() const { return !impl_->grad.empty(); }
  std::span<const T> grad() const { return impl_->grad; }
  std::span<T> grad() { return impl_->grad; }
  void zero_grad() { impl_->grad.clear(); }

  std::optional<std::size_t> node_id() const { return impl_->node_id; }

  Tensor clone() const;   // deep copy, detached
  Tensor detach() const { return clone(); }

  template <typename U>
  Tensor<U> cast() const {
    std::vector<U> out(numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<U>(impl_->data[i]);
    return Tensor<U>(shape(), std::move(out));
  }

  const std::shared_ptr<TensorImpl<T>>& impl() const { return impl_; }
  bool same_storage(const Tensor& other) const { return impl_ == other.impl_; }

private:
  std::shared_ptr<TensorImpl<T>> impl_;
};

// -------------------- computation record --------------------
template <typename T>
struct RecordedOp {
  std::vector<std::shared_ptr<TensorImpl<T>>> inputs;
  std::shared_ptr<TensorImpl<T>> output;
  std::function<void()> backward;
};

/// Thread-local tape of differentiable operations in execution order.
/// Cleared by every call to backward().
template <typename T>
class ComputationRecord {
public:
  static ComputationRecord& current();

  void push(std::vector<std::shared_ptr<TensorImpl<T>>> inputs,
            std::shared_ptr<TensorImpl<T>> output, std::function<void()> backward);
  const std::vector<RecordedOp<T>>& ops() const { return ops_; }
  std::size_t size() const { return ops_.size(); }
  void clear() { ops_.clear(); }

private:
  std::size_t assign_id(TensorImpl<T>& t);

  std::vector<RecordedOp<T>> ops_;
  std::size_t next_id_ = 0;
};

bool grad_enabled();

class NoGradGuard {
public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
  bool previous_;
};

/// Populates d loss / d leaf for every leaf that requires grad, then clears
/// the record. Throws ContractError for non-scalar or unrecorded losses.
template <typename T>
void backward(const Tensor<T>& loss);

template <typename T>
void clear_record() {
  ComputationRecord<T>::current().clear();
}

extern template class Tensor<float>;
extern template class Tensor<double>;
extern template class ComputationRecord<float>;
extern template class ComputationRecord<double>;

}  // namespace segnetr
