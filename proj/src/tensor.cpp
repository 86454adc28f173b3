#include "segnetr/tensor.hpp"

#include <algorithm>
#include <sstream>

namespace segnetr {

std::size_t numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto e : shape) n *= e;
  return n;
}

std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ')';
  return os.str();
}

template <typename T>
Tensor<T>::Tensor() : Tensor(Shape{0}) {}

template <typename T>
Tensor<T>::Tensor(Shape shape, T fill) : impl_(std::make_shared<TensorImpl<T>>()) {
  impl_->data.assign(segnetr::numel(shape), fill);
  impl_->shape = std::move(shape);
}

template <typename T>
Tensor<T>::Tensor(Shape shape, std::vector<T> values) : impl_(std::make_shared<TensorImpl<T>>()) {
  if (segnetr::numel(shape) != values.size())
    throw ShapeError("tensor: " + std::to_string(values.size()) + " values do not fill shape " +
                     to_string(shape));
  impl_->shape = std::move(shape);
  impl_->data = std::move(values);
}

template <typename T>
std::size_t Tensor<T>::dim(std::size_t axis) const {
  if (axis >= rank())
    throw ShapeError("axis " + std::to_string(axis) + " out of range for shape " + to_string(shape()));
  return impl_->shape[axis];
}

template <typename T>
T Tensor<T>::item() const {
  if (numel() != 1) throw ShapeError("item() on tensor of shape " + to_string(shape()));
  return impl_->data[0];
}

template <typename T>
Tensor<T>& Tensor<T>::set_requires_grad(bool on) {
  impl_->requires_grad = on;
  if (!on) impl_->grad.clear();
  return *this;
}

template <typename T>
Tensor<T> Tensor<T>::clone() const {
  return Tensor(impl_->shape, impl_->data);
}

// -------------------- record --------------------

namespace {
thread_local bool g_grad_enabled = true;
}

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

template <typename T>
ComputationRecord<T>& ComputationRecord<T>::current() {
  thread_local ComputationRecord<T> record;
  return record;
}

template <typename T>
std::size_t ComputationRecord<T>::assign_id(TensorImpl<T>& t) {
  if (!t.node_id) t.node_id = next_id_++;
  return *t.node_id;
}

template <typename T>
void ComputationRecord<T>::push(std::vector<std::shared_ptr<TensorImpl<T>>> inputs,
                                std::shared_ptr<TensorImpl<T>> output,
                                std::function<void()> backward) {
  for (auto& in : inputs) assign_id(*in);
  assign_id(*output);
  output->requires_grad = true;
  ops_.push_back({std::move(inputs), std::move(output), std::move(backward)});
}

template <typename T>
void backward(const Tensor<T>& loss) {
  auto& record = ComputationRecord<T>::current();
  if (loss.numel() != 1)
    throw ContractError("backward: loss must be scalar, got shape " + to_string(loss.shape()));
  const auto& root = loss.impl();
  auto it = std::find_if(record.ops().begin(), record.ops().end(),
                         [&](const RecordedOp<T>& op) { return op.output == root; });
  if (it == record.ops().end())
    throw ContractError("backward: loss is not the output of a recorded operation");

  root->ensure_grad();
  root->grad[0] += T(1);
  const auto& ops = record.ops();
  for (auto op = ops.rbegin(); op != ops.rend(); ++op) {
    if (op->output->grad.empty()) continue;
    op->backward();
  }
  // Intermediate gradients die with the record unless the caller holds the
  // tensor; leaves keep theirs.
  record.clear();
}

template class Tensor<float>;
template class Tensor<double>;
template class ComputationRecord<float>;
template class ComputationRecord<double>;
template void backward<float>(const Tensor<float>&);
template void backward<double>(const Tensor<double>&);

}  // namespace segnetr
