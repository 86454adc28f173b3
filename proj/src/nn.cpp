#include "segnetr/nn.hpp"

#include <cmath>

#include "segnetr/trace.hpp"

namespace segnetr::nn {

using segnetr::to_string;

std::string join_name(std::string_view prefix, std::string_view leaf) {
  if (prefix.empty()) return std::string(leaf);
  std::string s(prefix);
  s += '.';
  s += leaf;
  return s;
}

namespace {
std::string leaf_of(const std::string& name) {
  auto pos = name.rfind('.');
  return pos == std::string::npos ? name : name.substr(pos + 1);
}
}  // namespace

// -------------------- registry --------------------

template <typename T>
Tensor<T> Registry<T>::parameter(std::string name, Shape shape, Init init) {
  Tensor<T> t(std::move(shape));
  auto d = t.data();
  switch (init.kind) {
    case Init::Kind::zeros: break;
    case Init::Kind::ones: std::fill(d.begin(), d.end(), T(1)); break;
    case Init::Kind::constant: std::fill(d.begin(), d.end(), static_cast<T>(init.value)); break;
    case Init::Kind::kaiming_uniform: {
      const double bound = std::sqrt(6.0 / static_cast<double>(init.fan_in));
      std::uniform_real_distribution<double> dist(-bound, bound);
      for (auto& v : d) v = static_cast<T>(dist(rng_));
      break;
    }
  }
  t.set_requires_grad(true);
  tensors_.push_back({std::move(name), t, TensorKind::parameter});
  return t;
}

template <typename T>
Tensor<T> Registry<T>::buffer(std::string name, Shape shape, T fill) {
  Tensor<T> t(std::move(shape), fill);
  tensors_.push_back({std::move(name), t, TensorKind::buffer});
  return t;
}

template <typename T>
std::vector<Tensor<T>> Registry<T>::parameters() const {
  std::vector<Tensor<T>> out;
  for (const auto& nt : tensors_)
    if (nt.kind == TensorKind::parameter) out.push_back(nt.tensor);
  return out;
}

template <typename T>
std::size_t Registry<T>::parameter_count() const {
  std::size_t n = 0;
  for (const auto& nt : tensors_)
    if (nt.kind == TensorKind::parameter) n += nt.tensor.numel();
  return n;
}

// -------------------- layers --------------------

template <typename T>
Conv2d<T>::Conv2d(Registry<T>& reg, const std::string& name, std::size_t in, std::size_t out,
                  std::size_t kernel, Conv2dOptions opt, bool with_bias)
    : scope_(leaf_of(name)), opt_(opt) {
  if (opt.groups == 0 || in % opt.groups || out % opt.groups)
    throw ShapeError("conv " + name + ": channels not divisible by groups");
  const std::size_t fan_in = in / opt.groups * kernel * kernel;
  weight = reg.parameter(join_name(name, "weight"), Shape{out, in / opt.groups, kernel, kernel},
                         Init::kaiming(fan_in));
  if (with_bias) bias = reg.parameter(join_name(name, "bias"), Shape{out}, Init::zeros());
}

template <typename T>
Tensor<T> Conv2d<T>::forward(const Tensor<T>& x) const {
  cost::Scope s(scope_);
  return conv2d(x, weight, bias, opt_);
}

template <typename T>
BatchNorm2d<T>::BatchNorm2d(Registry<T>& reg, const std::string& name, std::size_t channels)
    : scope_(leaf_of(name)) {
  gamma = reg.parameter(join_name(name, "weight"), Shape{channels}, Init::ones());
  beta = reg.parameter(join_name(name, "bias"), Shape{channels}, Init::zeros());
  running_mean = reg.buffer(join_name(name, "running_mean"), Shape{channels}, T(0));
  running_var = reg.buffer(join_name(name, "running_var"), Shape{channels}, T(1));
}

template <typename T>
Tensor<T> BatchNorm2d<T>::forward(const Tensor<T>& x, bool training) {
  cost::Scope s(scope_);
  return batch_norm(x, gamma, beta, running_mean, running_var, training);
}

template <typename T>
LayerNorm<T>::LayerNorm(Registry<T>& reg, const std::string& name, std::size_t features)
    : scope_(leaf_of(name)) {
  gamma = reg.parameter(join_name(name, "weight"), Shape{features}, Init::ones());
  beta = reg.parameter(join_name(name, "bias"), Shape{features}, Init::zeros());
}

template <typename T>
Tensor<T> LayerNorm<T>::forward(const Tensor<T>& x) const {
  cost::Scope s(scope_);
  return layer_norm(x, gamma, beta);
}

template <typename T>
Linear<T>::Linear(Registry<T>& reg, const std::string& name, std::size_t in, std::size_t out)
    : scope_(leaf_of(name)) {
  weight = reg.parameter(join_name(name, "weight"), Shape{out, in}, Init::kaiming(in));
  bias = reg.parameter(join_name(name, "bias"), Shape{out}, Init::zeros());
}

template <typename T>
Tensor<T> Linear<T>::forward(const Tensor<T>& x) const {
  cost::Scope s(scope_);
  return linear(x, weight, std::optional<Tensor<T>>(bias));
}

// -------------------- MBConv --------------------

template <typename T>
MBConv<T>::MBConv(Registry<T>& reg, const std::string& name, std::size_t channels)
    : scope_(leaf_of(name)), channels_(channels) {
  const std::size_t hidden = channels * kExpansion;
  const std::size_t squeezed = hidden / kSeReduction;
  expand = Conv2d<T>(reg, join_name(name, "expand"), channels, hidden, 1);
  bn_expand = BatchNorm2d<T>(reg, join_name(name, "bn_expand"), hidden);
  depthwise = Conv2d<T>(reg, join_name(name, "depthwise"), hidden, hidden, 3, {1, 1, hidden});
  bn_depthwise = BatchNorm2d<T>(reg, join_name(name, "bn_depthwise"), hidden);
  se_reduce = Conv2d<T>(reg, join_name(name, "se_reduce"), hidden, squeezed, 1, {}, true);
  se_expand = Conv2d<T>(reg, join_name(name, "se_expand"), squeezed, hidden, 1, {}, true);
  project = Conv2d<T>(reg, join_name(name, "project"), hidden, channels, 1);
  bn_project = BatchNorm2d<T>(reg, join_name(name, "bn_project"), channels);
}

template <typename T>
Tensor<T> MBConv<T>::forward(const Tensor<T>& x, bool training) {
  cost::Scope s(scope_);
  if (x.rank() != 4 || x.dim(1) != channels_)
    throw ShapeError("mbconv: expected [N," + std::to_string(channels_) + ",H,W], got " + to_string(x.shape()));
  auto h = activation(bn_expand.forward(expand.forward(x), training), Activation::silu);
  h = activation(bn_depthwise.forward(depthwise.forward(h), training), Activation::silu);
  Tensor<T> pooled;
  {
    cost::Scope p("se_pool");
    pooled = mean(mean(h, 3, true), 2, true);
  }
  auto gate = activation(se_reduce.forward(pooled), Activation::silu);
  gate = activation(se_expand.forward(gate), Activation::sigmoid);
  {
    cost::Scope g("se_gate");
    h = mul(h, gate);
  }
  h = bn_project.forward(project.forward(h), training);
  cost::Scope r("residual");
  return add(h, x);
}

// -------------------- window branch --------------------

template <typename T>
WindowBranch<T>::WindowBranch(Registry<T>& reg, const std::string& name, BranchKind kind, std::size_t patch,
                              layout::PartitionOptions opt)
    : scope_(leaf_of(name)), kind_(kind), patch_(patch), opt_(opt) {
  if (patch == 0) throw ConfigError("window branch " + name + ": patch size must be positive");
  const std::size_t a = area();
  norm = LayerNorm<T>(reg, join_name(name, "norm"), a);
  fc1 = Linear<T>(reg, join_name(name, "fc1"), a, 2 * a);
  fc2 = Linear<T>(reg, join_name(name, "fc2"), 2 * a, a);
}

template <typename T>
Tensor<T> WindowBranch<T>::window_attention(const layout::WindowStack<T>& ws) const {
  const auto& w = ws.windows;
  if (w.rank() != 4 || w.dim(1) * w.dim(2) != area())
    throw ShapeError("window_attention: window area of " + to_string(w.shape()) + " does not match FFN input " +
                     std::to_string(area()));
  auto m = mean(w, 3, false);
  auto flat = reshape(m, Shape{w.dim(0), area()});
  auto h = norm.forward(flat);
  h = activation(fc1.forward(h), Activation::gelu);
  h = fc2.forward(h);
  return softmax(h, 1);
}

template <typename T>
Tensor<T> WindowBranch<T>::forward(const Tensor<T>& x) {
  cost::Scope s(scope_);
  if (x.rank() != 4) throw ShapeError("window branch: expected [N,C,H,W], got " + to_string(x.shape()));
  const std::size_t N = x.dim(0), H = x.dim(2), W = x.dim(3);
  auto m = reshape(mean(x, 1, true), Shape{N, H, W, 1});
  auto ws = kind_ == BranchKind::local ? layout::local_partition(m, patch_, opt_)
                                       : layout::global_partition(m, patch_, opt_);
  last_attention_ = window_attention(ws);
  layout::WindowStack<T> att{reshape(last_attention_, ws.windows.shape()), ws.grid, ws.displaced, ws.displacement};
  auto amap = kind_ == BranchKind::local ? layout::local_reverse(att) : layout::global_reverse(att);
  auto weight = scale(reshape(amap, Shape{N, 1, H, W}), static_cast<T>(area()));
  return mul(x, weight);
}

// -------------------- SegNetr block --------------------

InteractionMode parse_interaction_mode(std::string_view s) {
  if (s == "without") return InteractionMode::without;
  if (s == "local") return InteractionMode::local;
  if (s == "global") return InteractionMode::global;
  if (s == "series") return InteractionMode::series;
  if (s == "parallel") return InteractionMode::parallel;
  throw ConfigError("unknown interaction mode '" + std::string(s) +
                    "' (expected without|local|global|series|parallel)");
}

std::string_view to_string(InteractionMode m) {
  switch (m) {
    case InteractionMode::without: return "without";
    case InteractionMode::local: return "local";
    case InteractionMode::global: return "global";
    case InteractionMode::series: return "series";
    case InteractionMode::parallel: return "parallel";
  }
  return "?";
}

bool uses_local(InteractionMode m) {
  return m == InteractionMode::local || m == InteractionMode::series || m == InteractionMode::parallel;
}

bool uses_global(InteractionMode m) {
  return m == InteractionMode::global || m == InteractionMode::series || m == InteractionMode::parallel;
}

template <typename T>
SegnetrBlock<T>::SegnetrBlock(Registry<T>& reg, const std::string& name, std::size_t channels, std::size_t patch,
                              InteractionMode mode, layout::PartitionOptions opt)
    : scope_(leaf_of(name)), mode_(mode) {
  mbconv = MBConv<T>(reg, join_name(name, "mbconv"), channels);
  if (uses_local(mode)) {
    local.emplace(reg, join_name(name, "local"), BranchKind::local, patch, opt);
    alpha_local = reg.parameter(join_name(name, "alpha_local"), Shape{1}, Init::constant(0.5));
  }
  if (uses_global(mode)) {
    global.emplace(reg, join_name(name, "global"), BranchKind::global, patch, opt);
    alpha_global = reg.parameter(join_name(name, "alpha_global"), Shape{1}, Init::constant(0.5));
  }
}

template <typename T>
Tensor<T> SegnetrBlock<T>::forward(const Tensor<T>& x, bool training) {
  cost::Scope s(scope_);
  auto m = mbconv.forward(x, training);
  auto with_local = [&](const Tensor<T>& in) {
    auto l = local->forward(in);
    cost::Scope f("fuse_local");
    return add(in, mul(l, *alpha_local));
  };
  auto with_global = [&](const Tensor<T>& in) {
    auto g = global->forward(in);
    cost::Scope f("fuse_global");
    return add(in, mul(g, *alpha_global));
  };
  switch (mode_) {
    case InteractionMode::without: return m;
    case InteractionMode::local: return with_local(m);
    case InteractionMode::global: return with_global(m);
    case InteractionMode::series: {
      auto g = global->forward(with_local(m));
      cost::Scope f("fuse_global");
      return add(m, mul(g, *alpha_global));
    }
    case InteractionMode::parallel: {
      auto l = local->forward(m);
      auto g = global->forward(m);
      cost::Scope f("fuse");
      return add(add(m, mul(l, *alpha_local)), mul(g, *alpha_global));
    }
  }
  return m;
}

// -------------------- skips --------------------

template <typename T>
Tensor<T> irsc_skip(const Tensor<T>& encoder_pm) {
  cost::Scope s("irsc");
  return layout::patch_reverse(layout::alternate_select(encoder_pm));
}

template <typename T>
Tensor<T> irsc_fuse(const Tensor<T>& encoder_pm, const Tensor<T>& decoder_up) {
  auto x_pr = irsc_skip(encoder_pm);
  if (x_pr.rank() != decoder_up.rank())
    throw ShapeError("irsc_fuse: rank mismatch " + to_string(x_pr.shape()) + " vs " + to_string(decoder_up.shape()));
  for (std::size_t d = 0; d + 1 < x_pr.rank(); ++d)
    if (x_pr.dim(d) != decoder_up.dim(d))
      throw ShapeError("irsc_fuse: restored encoder features " + to_string(x_pr.shape()) +
                       " do not match decoder features " + to_string(decoder_up.shape()));
  return concat(std::vector<Tensor<T>>{decoder_up, x_pr}, x_pr.rank() - 1);
}

template <typename T>
Tensor<T> to_channels_last(const Tensor<T>& x) {
  return permute(x, {0, 2, 3, 1});
}

template <typename T>
Tensor<T> to_channels_first(const Tensor<T>& x) {
  return permute(x, {0, 3, 1, 2});
}

#define SEGNETR_INSTANTIATE_NN(T)                                  \
  template class Registry<T>;                                      \
  template class Conv2d<T>;                                        \
  template class BatchNorm2d<T>;                                   \
  template class LayerNorm<T>;                                     \
  template class Linear<T>;                                        \
  template class MBConv<T>;                                        \
  template class WindowBranch<T>;                                  \
  template class SegnetrBlock<T>;                                  \
  template Tensor<T> irsc_skip(const Tensor<T>&);                  \
  template Tensor<T> irsc_fuse(const Tensor<T>&, const Tensor<T>&); \
  template Tensor<T> to_channels_last(const Tensor<T>&);           \
  template Tensor<T> to_channels_first(const Tensor<T>&);

SEGNETR_INSTANTIATE_NN(float)
SEGNETR_INSTANTIATE_NN(double)

}  // namespace segnetr::nn
