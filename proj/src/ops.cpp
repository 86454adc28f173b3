#include "segnetr/ops.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "segnetr/trace.hpp"

namespace segnetr {

namespace {

template <typename T>
using ImplPtr = std::shared_ptr<TensorImpl<T>>;

template <typename T>
bool recording(std::initializer_list<const Tensor<T>*> inputs) {
  if (!grad_enabled() || cost::dry_run()) return false;
  for (const auto* t : inputs)
    if (t && t->requires_grad()) return true;
  return false;
}

template <typename T>
void record(const Tensor<T>& out, std::vector<ImplPtr<T>> inputs, std::function<void()> bw) {
  ComputationRecord<T>::current().push(std::move(inputs), out.impl(), std::move(bw));
}

// Lane-split accumulation so the compiler can vectorize without reassociating.
template <typename T>
T dot(const T* a, const T* b, std::size_t n) {
  T acc[8] = {};
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8)
    for (std::size_t j = 0; j < 8; ++j) acc[j] += a[i + j] * b[i + j];
  T s = T(0);
  for (std::size_t j = 0; j < 8; ++j) s += acc[j];
  for (; i < n; ++i) s += a[i] * b[i];
  return s;
}

template <typename T>
T reduce_sum(const T* a, std::size_t n) {
  T acc[8] = {};
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8)
    for (std::size_t j = 0; j < 8; ++j) acc[j] += a[i + j];
  T s = T(0);
  for (std::size_t j = 0; j < 8; ++j) s += acc[j];
  for (; i < n; ++i) s += a[i];
  return s;
}

template <typename T>
void axpy(T alpha, const T* x, T* y, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) y[i] += alpha * x[i];
}

// outer * len * inner decomposition around `axis`.
struct AxisSplit {
  std::size_t outer = 1, len = 1, inner = 1;
};

AxisSplit split_axis(const Shape& s, std::size_t axis) {
  if (axis >= s.size())
    throw ShapeError("axis " + std::to_string(axis) + " out of range for shape " + to_string(s));
  AxisSplit r;
  for (std::size_t i = 0; i < axis; ++i) r.outer *= s[i];
  r.len = s[axis];
  for (std::size_t i = axis + 1; i < s.size(); ++i) r.inner *= s[i];
  return r;
}

// Calls f(a_offset, b_offset, run_length, b_step) over contiguous runs of a.
template <typename F>
void for_each_broadcast(const Shape& as, const Shape& bs_in, const char* op, F&& f) {
  if (bs_in.size() > as.size())
    throw ShapeError(std::string(op) + ": cannot broadcast " + to_string(bs_in) + " to " +
                     to_string(as));
  Shape bs(as.size() - bs_in.size(), 1);
  bs.insert(bs.end(), bs_in.begin(), bs_in.end());
  for (std::size_t i = 0; i < as.size(); ++i)
    if (bs[i] != as[i] && bs[i] != 1)
      throw ShapeError(std::string(op) + ": cannot broadcast " + to_string(bs_in) + " to " +
                       to_string(as));
  if (as.empty()) {
    f(0, 0, 1, 0);
    return;
  }
  // Coalesce neighbouring axes with the same broadcast status.
  std::vector<std::size_t> ext, full;
  for (std::size_t i = 0; i < as.size(); ++i) {
    bool is_full = bs[i] == as[i];
    if (as[i] == 1) continue;
    if (!ext.empty() && full.back() == static_cast<std::size_t>(is_full)) {
      ext.back() *= as[i];
    } else {
      ext.push_back(as[i]);
      full.push_back(is_full);
    }
  }
  if (ext.empty()) {
    f(0, 0, 1, 0);
    return;
  }
  std::vector<std::size_t> bstride(ext.size(), 0);
  std::size_t st = 1;
  for (std::size_t i = ext.size(); i-- > 0;) {
    if (full[i]) {
      bstride[i] = st;
      st *= ext[i];
    }
  }
  const std::size_t last = ext.size() - 1;
  const std::size_t run = ext[last];
  const std::size_t bstep = bstride[last];
  std::size_t outer = 1;
  for (std::size_t i = 0; i < last; ++i) outer *= ext[i];
  std::vector<std::size_t> idx(last, 0);
  std::size_t b_off = 0;
  for (std::size_t o = 0; o < outer; ++o) {
    f(o * run, b_off, run, bstep);
    for (std::size_t d = last; d-- > 0;) {
      ++idx[d];
      b_off += bstride[d];
      if (idx[d] < ext[d]) break;
      b_off -= bstride[d] * ext[d];
      idx[d] = 0;
    }
  }
}

template <typename T>
void check_shape_4d(const Tensor<T>& x, const char* op) {
  if (x.rank() != 4) throw ShapeError(std::string(op) + ": expected [N,C,H,W], got " + to_string(x.shape()));
}

}  // namespace

// -------------------- rearrangement --------------------

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  if (numel(shape) != x.numel())
    throw ShapeError("reshape: " + to_string(x.shape()) + " -> " + to_string(shape));
  Tensor<T> out(std::move(shape), std::vector<T>(x.data().begin(), x.data().end()));
  cost::add_layout();
  if (recording<T>({&x})) {
    auto* X = x.impl().get();
    auto* Y = out.impl().get();
    record<T>(out, {x.impl()}, [X, Y] {
      if (!X->requires_grad) return;
      X->ensure_grad();
      for (std::size_t i = 0; i < Y->grad.size(); ++i) X->grad[i] += Y->grad[i];
    });
  }
  return out;
}

template <typename T>
Tensor<T> gather(const Tensor<T>& x, Shape out_shape,
                 std::shared_ptr<const std::vector<std::size_t>> index) {
  if (numel(out_shape) != index->size())
    throw ShapeError("gather: index size does not match " + to_string(out_shape));
  Tensor<T> out(std::move(out_shape));
  cost::add_layout();
  auto src = x.data();
  auto dst = out.data();
  const auto& idx = *index;
  for (std::size_t i = 0; i < idx.size(); ++i) dst[i] = idx[i] == kPadIndex ? T(0) : src[idx[i]];
  if (recording<T>({&x})) {
    auto* X = x.impl().get();
    auto* Y = out.impl().get();
    record<T>(out, {x.impl()}, [X, Y, index] {
      if (!X->requires_grad) return;
      X->ensure_grad();
      const auto& ix = *index;
      for (std::size_t i = 0; i < ix.size(); ++i)
        if (ix[i] != kPadIndex) X->grad[ix[i]] += Y->grad[i];
    });
  }
  return out;
}

template <typename T>
Tensor<T> permute(const Tensor<T>& x, const std::vector<std::size_t>& perm) {
  const auto& s = x.shape();
  if (perm.size() != s.size()) throw ShapeError("permute: rank mismatch for " + to_string(s));
  std::vector<bool> seen(perm.size(), false);
  for (auto p : perm) {
    if (p >= perm.size() || seen[p]) throw ShapeError("permute: invalid permutation");
    seen[p] = true;
  }
  std::vector<std::size_t> stride(s.size(), 1);
  for (std::size_t i = s.size(); i-- > 1;) stride[i - 1] = stride[i] * s[i];
  Shape os(s.size());
  std::vector<std::size_t> ostride(s.size());
  for (std::size_t d = 0; d < s.size(); ++d) {
    os[d] = s[perm[d]];
    ostride[d] = stride[perm[d]];
  }
  auto index = std::make_shared<std::vector<std::size_t>>(x.numel());
  std::vector<std::size_t> pos(s.size(), 0);
  std::size_t off = 0;
  for (std::size_t i = 0; i < index->size(); ++i) {
    (*index)[i] = off;
    for (std::size_t d = s.size(); d-- > 0;) {
      ++pos[d];
      off += ostride[d];
      if (pos[d] < os[d]) break;
      off -= ostride[d] * os[d];
      pos[d] = 0;
    }
  }
  return gather(x, std::move(os), std::move(index));
}

template <typename T>
Tensor<T> slice(const Tensor<T>& x, std::size_t axis, std::size_t begin, std::size_t end) {
  auto sp = split_axis(x.shape(), axis);
  if (begin > end || end > sp.len)
    throw ShapeError("slice: range [" + std::to_string(begin) + "," + std::to_string(end) +
                     ") invalid for axis of extent " + std::to_string(sp.len));
  Shape os = x.shape();
  os[axis] = end - begin;
  auto index = std::make_shared<std::vector<std::size_t>>();
  index->reserve(numel(os));
  for (std::size_t o = 0; o < sp.outer; ++o)
    for (std::size_t l = begin; l < end; ++l)
      for (std::size_t i = 0; i < sp.inner; ++i) index->push_back((o * sp.len + l) * sp.inner + i);
  return gather(x, std::move(os), std::move(index));
}

template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& xs, std::size_t axis) {
  if (xs.empty()) throw ShapeError("concat: no inputs");
  const Shape& s0 = xs[0].shape();
  if (axis >= s0.size()) throw ShapeError("concat: axis out of range for " + to_string(s0));
  Shape os = s0;
  os[axis] = 0;
  for (const auto& t : xs) {
    if (t.rank() != s0.size()) throw ShapeError("concat: rank mismatch");
    for (std::size_t d = 0; d < s0.size(); ++d)
      if (d != axis && t.shape()[d] != s0[d])
        throw ShapeError("concat: extent mismatch " + to_string(t.shape()) + " vs " + to_string(s0));
    os[axis] += t.shape()[axis];
  }
  auto sp = split_axis(os, axis);
  Tensor<T> out(os);
  cost::add_layout();
  auto dst = out.data();
  std::size_t at = 0;
  std::vector<std::size_t> offsets;
  for (const auto& t : xs) {
    offsets.push_back(at);
    std::size_t chunk = t.shape()[axis] * sp.inner;
    auto src = t.data();
    for (std::size_t o = 0; o < sp.outer; ++o)
      std::copy_n(src.begin() + o * chunk, chunk, dst.begin() + o * sp.len * sp.inner + at);
    at += chunk;
  }
  bool any = false;
  for (const auto& t : xs) any = any || t.requires_grad();
  if (any && grad_enabled() && !cost::dry_run()) {
    std::vector<ImplPtr<T>> ins;
    for (const auto& t : xs) ins.push_back(t.impl());
    auto* Y = out.impl().get();
    std::vector<TensorImpl<T>*> raw;
    for (const auto& t : xs) raw.push_back(t.impl().get());
    record<T>(out, ins, [raw, Y, offsets, sp, axis] {
      for (std::size_t k = 0; k < raw.size(); ++k) {
        auto* X = raw[k];
        if (!X->requires_grad) continue;
        X->ensure_grad();
        std::size_t chunk = X->shape[axis] * sp.inner;
        for (std::size_t o = 0; o < sp.outer; ++o) {
          const T* g = Y->grad.data() + o * sp.len * sp.inner + offsets[k];
          T* gx = X->grad.data() + o * chunk;
          for (std::size_t i = 0; i < chunk; ++i) gx[i] += g[i];
        }
      }
    });
  }
  return out;
}

// -------------------- elementwise --------------------

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  Tensor<T> out(a.shape());
  cost::add_elementwise(a.numel());
  if (cost::dry_run()) return out;
  auto A = a.data();
  auto B = b.data();
  auto Y = out.data();
  for_each_broadcast(a.shape(), b.shape(), "add", [&](std::size_t ao, std::size_t bo, std::size_t n, std::size_t bs) {
    for (std::size_t j = 0; j < n; ++j) Y[ao + j] = A[ao + j] + B[bo + j * bs];
  });
  if (recording<T>({&a, &b})) {
    auto* PA = a.impl().get();
    auto* PB = b.impl().get();
    auto* PY = out.impl().get();
    record<T>(out, {a.impl(), b.impl()}, [PA, PB, PY] {
      const auto& g = PY->grad;
      if (PA->requires_grad) {
        PA->ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) PA->grad[i] += g[i];
      }
      if (PB->requires_grad) {
        PB->ensure_grad();
        for_each_broadcast(PA->shape, PB->shape, "add", [&](std::size_t ao, std::size_t bo, std::size_t n, std::size_t bs) {
          for (std::size_t j = 0; j < n; ++j) PB->grad[bo + j * bs] += g[ao + j];
        });
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  Tensor<T> out(a.shape());
  cost::add_elementwise(a.numel());
  if (cost::dry_run()) return out;
  auto A = a.data();
  auto B = b.data();
  auto Y = out.data();
  for_each_broadcast(a.shape(), b.shape(), "sub", [&](std::size_t ao, std::size_t bo, std::size_t n, std::size_t bs) {
    for (std::size_t j = 0; j < n; ++j) Y[ao + j] = A[ao + j] - B[bo + j * bs];
  });
  if (recording<T>({&a, &b})) {
    auto* PA = a.impl().get();
    auto* PB = b.impl().get();
    auto* PY = out.impl().get();
    record<T>(out, {a.impl(), b.impl()}, [PA, PB, PY] {
      const auto& g = PY->grad;
      if (PA->requires_grad) {
        PA->ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) PA->grad[i] += g[i];
      }
      if (PB->requires_grad) {
        PB->ensure_grad();
        for_each_broadcast(PA->shape, PB->shape, "sub", [&](std::size_t ao, std::size_t bo, std::size_t n, std::size_t bs) {
          for (std::size_t j = 0; j < n; ++j) PB->grad[bo + j * bs] -= g[ao + j];
        });
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  Tensor<T> out(a.shape());
  cost::add_elementwise(a.numel());
  if (cost::dry_run()) return out;
  auto A = a.data();
  auto B = b.data();
  auto Y = out.data();
  for_each_broadcast(a.shape(), b.shape(), "mul", [&](std::size_t ao, std::size_t bo, std::size_t n, std::size_t bs) {
    if (bs == 0) {
      const T bv = B[bo];
      for (std::size_t j = 0; j < n; ++j) Y[ao + j] = A[ao + j] * bv;
    } else {
      for (std::size_t j = 0; j < n; ++j) Y[ao + j] = A[ao + j] * B[bo + j];
    }
  });
  if (recording<T>({&a, &b})) {
    auto* PA = a.impl().get();
    auto* PB = b.impl().get();
    auto* PY = out.impl().get();
    record<T>(out, {a.impl(), b.impl()}, [PA, PB, PY] {
      const auto& g = PY->grad;
      if (PA->requires_grad) PA->ensure_grad();
      if (PB->requires_grad) PB->ensure_grad();
      const bool da = PA->requires_grad, db = PB->requires_grad;
      for_each_broadcast(PA->shape, PB->shape, "mul", [&](std::size_t ao, std::size_t bo, std::size_t n, std::size_t bs) {
        if (da)
          for (std::size_t j = 0; j < n; ++j) PA->grad[ao + j] += g[ao + j] * PB->data[bo + j * bs];
        if (db) {
          if (bs == 0)
            PB->grad[bo] += dot(g.data() + ao, PA->data.data() + ao, n);
          else
            for (std::size_t j = 0; j < n; ++j) PB->grad[bo + j] += g[ao + j] * PA->data[ao + j];
        }
      });
    });
  }
  return out;
}

template <typename T>
Tensor<T> scale(const Tensor<T>& x, T factor) {
  Tensor<T> out(x.shape());
  cost::add_elementwise(x.numel());
  if (cost::dry_run()) return out;
  auto X = x.data();
  auto Y = out.data();
  for (std::size_t i = 0; i < X.size(); ++i) Y[i] = X[i] * factor;
  if (recording<T>({&x})) {
    auto* PX = x.impl().get();
    auto* PY = out.impl().get();
    record<T>(out, {x.impl()}, [PX, PY, factor] {
      if (!PX->requires_grad) return;
      PX->ensure_grad();
      for (std::size_t i = 0; i < PY->grad.size(); ++i) PX->grad[i] += PY->grad[i] * factor;
    });
  }
  return out;
}

namespace {

template <typename T>
T sigmoid_scalar(T v) {
  return T(1) / (T(1) + std::exp(-v));
}

template <typename T>
constexpr T kGeluC = T(0.7978845608028654);  // sqrt(2/pi)

template <typename T>
T apply_act(Activation k, T v) {
  switch (k) {
    case Activation::relu: return v > T(0) ? v : T(0);
    case Activation::sigmoid: return sigmoid_scalar(v);
    case Activation::silu: return v * sigmoid_scalar(v);
    case Activation::gelu: {
      T u = kGeluC<T> * (v + T(0.044715) * v * v * v);
      return T(0.5) * v * (T(1) + std::tanh(u));
    }
  }
  return v;
}

template <typename T>
T act_derivative(Activation k, T v) {
  switch (k) {
    case Activation::relu: return v > T(0) ? T(1) : T(0);
    case Activation::sigmoid: {
      T s = sigmoid_scalar(v);
      return s * (T(1) - s);
    }
    case Activation::silu: {
      T s = sigmoid_scalar(v);
      return s * (T(1) + v * (T(1) - s));
    }
    case Activation::gelu: {
      T u = kGeluC<T> * (v + T(0.044715) * v * v * v);
      T t = std::tanh(u);
      T du = kGeluC<T> * (T(1) + T(3) * T(0.044715) * v * v);
      return T(0.5) * (T(1) + t) + T(0.5) * v * (T(1) - t * t) * du;
    }
  }
  return T(1);
}

}  // namespace

template <typename T>
Tensor<T> activation(const Tensor<T>& x, Activation kind) {
  Tensor<T> out(x.shape());
  cost::add_elementwise(x.numel());
  if (cost::dry_run()) return out;
  auto X = x.data();
  auto Y = out.data();
  for (std::size_t i = 0; i < X.size(); ++i) Y[i] = apply_act(kind, X[i]);
  if (recording<T>({&x})) {
    auto* PX = x.impl().get();
    auto* PY = out.impl().get();
    record<T>(out, {x.impl()}, [PX, PY, kind] {
      if (!PX->requires_grad) return;
      PX->ensure_grad();
      for (std::size_t i = 0; i < PY->grad.size(); ++i)
        PX->grad[i] += PY->grad[i] * act_derivative(kind, PX->data[i]);
    });
  }
  return out;
}

// -------------------- reductions --------------------

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
  Tensor<T> out(Shape{});
  cost::add_elementwise(x.numel());
  if (cost::dry_run()) return out;
  out.data()[0] = reduce_sum(x.data().data(), x.numel());
  if (recording<T>({&x})) {
    auto* PX = x.impl().get();
    auto* PY = out.impl().get();
    record<T>(out, {x.impl()}, [PX, PY] {
      if (!PX->requires_grad) return;
      PX->ensure_grad();
      const T g = PY->grad[0];
      for (auto& v : PX->grad) v += g;
    });
  }
  return out;
}

template <typename T>
Tensor<T> mean(const Tensor<T>& x, std::size_t axis, bool keepdim) {
  auto sp = split_axis(x.shape(), axis);
  Shape os = x.shape();
  if (keepdim)
    os[axis] = 1;
  else
    os.erase(os.begin() + static_cast<std::ptrdiff_t>(axis));
  Tensor<T> out(os);
  cost::add_elementwise(x.numel());
  if (cost::dry_run()) return out;
  auto X = x.data();
  auto Y = out.data();
  const T inv = T(1) / static_cast<T>(sp.len);
  for (std::size_t o = 0; o < sp.outer; ++o) {
    T* y = Y.data() + o * sp.inner;
    for (std::size_t l = 0; l < sp.len; ++l) {
      const T* xr = X.data() + (o * sp.len + l) * sp.inner;
      for (std::size_t i = 0; i < sp.inner; ++i) y[i] += xr[i];
    }
    for (std::size_t i = 0; i < sp.inner; ++i) y[i] *= inv;
  }
  if (recording<T>({&x})) {
    auto* PX = x.impl().get();
    auto* PY = out.impl().get();
    record<T>(out, {x.impl()}, [PX, PY, sp, inv] {
      if (!PX->requires_grad) return;
      PX->ensure_grad();
      for (std::size_t o = 0; o < sp.outer; ++o) {
        const T* g = PY->grad.data() + o * sp.inner;
        for (std::size_t l = 0; l < sp.len; ++l) {
          T* gx = PX->grad.data() + (o * sp.len + l) * sp.inner;
          for (std::size_t i = 0; i < sp.inner; ++i) gx[i] += g[i] * inv;
        }
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> softmax(const Tensor<T>& x, std::size_t axis) {
  auto sp = split_axis(x.shape(), axis);
  Tensor<T> out(x.shape());
  cost::add_elementwise(x.numel());
  if (cost::dry_run()) return out;
  auto X = x.data();
  auto Y = out.data();
  for (std::size_t o = 0; o < sp.outer; ++o) {
    for (std::size_t i = 0; i < sp.inner; ++i) {
      const std::size_t base = o * sp.len * sp.inner + i;
      T mx = X[base];
      for (std::size_t l = 1; l < sp.len; ++l) mx = std::max(mx, X[base + l * sp.inner]);
      T s = T(0);
      for (std::size_t l = 0; l < sp.len; ++l) {
        T e = std::exp(X[base + l * sp.inner] - mx);
        Y[base + l * sp.inner] = e;
        s += e;
      }
      const T inv = T(1) / s;
      for (std::size_t l = 0; l < sp.len; ++l) Y[base + l * sp.inner] *= inv;
    }
  }
  if (recording<T>({&x})) {
    auto* PX = x.impl().get();
    auto* PY = out.impl().get();
    record<T>(out, {x.impl()}, [PX, PY, sp] {
      if (!PX->requires_grad) return;
      PX->ensure_grad();
      const auto& y = PY->data;
      const auto& g = PY->grad;
      for (std::size_t o = 0; o < sp.outer; ++o) {
        for (std::size_t i = 0; i < sp.inner; ++i) {
          const std::size_t base = o * sp.len * sp.inner + i;
          T d = T(0);
          for (std::size_t l = 0; l < sp.len; ++l) d += g[base + l * sp.inner] * y[base + l * sp.inner];
          for (std::size_t l = 0; l < sp.len; ++l) {
            const std::size_t k = base + l * sp.inner;
            PX->grad[k] += y[k] * (g[k] - d);
          }
        }
      }
    });
  }
  return out;
}

// -------------------- convolution --------------------

namespace {

struct ConvGeom {
  std::size_t N, C, H, W, O, Cg, KH, KW, G, OH, OW, stride, pad;
  std::size_t Og() const { return O / G; }
  std::size_t K() const { return Cg * KH * KW; }
  std::size_t P() const { return OH * OW; }
  bool pointwise() const { return KH == 1 && KW == 1 && stride == 1 && pad == 0; }
};

template <typename T>
void im2col(const T* x, const ConvGeom& g, T* col) {
  const std::size_t P = g.P();
  for (std::size_t c = 0; c < g.Cg; ++c) {
    const T* xc = x + c * g.H * g.W;
    for (std::size_t ky = 0; ky < g.KH; ++ky) {
      for (std::size_t kx = 0; kx < g.KW; ++kx) {
        T* row = col + ((c * g.KH + ky) * g.KW + kx) * P;
        for (std::size_t oy = 0; oy < g.OH; ++oy) {
          T* dst = row + oy * g.OW;
          const long iy = static_cast<long>(oy * g.stride + ky) - static_cast<long>(g.pad);
          if (iy < 0 || iy >= static_cast<long>(g.H)) {
            std::fill_n(dst, g.OW, T(0));
            continue;
          }
          const T* src = xc + static_cast<std::size_t>(iy) * g.W;
          for (std::size_t ox = 0; ox < g.OW; ++ox) {
            const long ix = static_cast<long>(ox * g.stride + kx) - static_cast<long>(g.pad);
            dst[ox] = (ix < 0 || ix >= static_cast<long>(g.W)) ? T(0) : src[ix];
          }
        }
      }
    }
  }
}

template <typename T>
void col2im(const T* col, const ConvGeom& g, T* x) {
  const std::size_t P = g.P();
  for (std::size_t c = 0; c < g.Cg; ++c) {
    T* xc = x + c * g.H * g.W;
    for (std::size_t ky = 0; ky < g.KH; ++ky) {
      for (std::size_t kx = 0; kx < g.KW; ++kx) {
        const T* row = col + ((c * g.KH + ky) * g.KW + kx) * P;
        for (std::size_t oy = 0; oy < g.OH; ++oy) {
          const long iy = static_cast<long>(oy * g.stride + ky) - static_cast<long>(g.pad);
          if (iy < 0 || iy >= static_cast<long>(g.H)) continue;
          const T* src = row + oy * g.OW;
          T* dst = xc + static_cast<std::size_t>(iy) * g.W;
          for (std::size_t ox = 0; ox < g.OW; ++ox) {
            const long ix = static_cast<long>(ox * g.stride + kx) - static_cast<long>(g.pad);
            if (ix >= 0 && ix < static_cast<long>(g.W)) dst[ix] += src[ox];
          }
        }
      }
    }
  }
}

// out[o, :] += sum_k w[o, k] * col[k, :], four output rows at a time.
template <typename T>
void gemm_rows(const T* w, std::size_t w_ld, const T* col, std::size_t K, std::size_t P, T* out,
               std::size_t rows) {
  std::size_t o = 0;
  for (; o + 4 <= rows; o += 4) {
    T* y0 = out + o * P;
    T* y1 = y0 + P;
    T* y2 = y1 + P;
    T* y3 = y2 + P;
    for (std::size_t k = 0; k < K; ++k) {
      const T* c = col + k * P;
      const T w0 = w[o * w_ld + k], w1 = w[(o + 1) * w_ld + k];
      const T w2 = w[(o + 2) * w_ld + k], w3 = w[(o + 3) * w_ld + k];
      for (std::size_t p = 0; p < P; ++p) {
        const T cv = c[p];
        y0[p] += w0 * cv;
        y1[p] += w1 * cv;
        y2[p] += w2 * cv;
        y3[p] += w3 * cv;
      }
    }
  }
  for (; o < rows; ++o)
    for (std::size_t k = 0; k < K; ++k) axpy(w[o * w_ld + k], col + k * P, out + o * P, P);
}

// dcol[k, :] += sum_o w[o, k] * gy[o, :], four k rows at a time.
template <typename T>
void gemm_t_rows(const T* w, std::size_t w_ld, const T* gy, std::size_t rows, std::size_t P, T* dcol,
                 std::size_t K) {
  std::size_t k = 0;
  for (; k + 4 <= K; k += 4) {
    T* d0 = dcol + k * P;
    T* d1 = d0 + P;
    T* d2 = d1 + P;
    T* d3 = d2 + P;
    for (std::size_t o = 0; o < rows; ++o) {
      const T* g = gy + o * P;
      const T* wr = w + o * w_ld + k;
      const T w0 = wr[0], w1 = wr[1], w2 = wr[2], w3 = wr[3];
      for (std::size_t p = 0; p < P; ++p) {
        const T gv = g[p];
        d0[p] += w0 * gv;
        d1[p] += w1 * gv;
        d2[p] += w2 * gv;
        d3[p] += w3 * gv;
      }
    }
  }
  for (; k < K; ++k)
    for (std::size_t o = 0; o < rows; ++o) axpy(w[o * w_ld + k], gy + o * P, dcol + k * P, P);
}

// c[m * ldc + n] += sum_p a[m, p] * b[n, p], in 2x4 register tiles.
template <typename T>
void gemm_nt(const T* a, std::size_t M, const T* b, std::size_t N, std::size_t P, T* c, std::size_t ldc) {
  constexpr std::size_t L = 8;
  auto tile = [&](std::size_t m0, std::size_t mr, std::size_t n0, std::size_t nr) {
    T acc[2][4][L] = {};
    const T* ar[2] = {a + m0 * P, a + (m0 + (mr > 1)) * P};
    const T* br[4];
    for (std::size_t j = 0; j < 4; ++j) br[j] = b + (n0 + std::min(j, nr - 1)) * P;
    std::size_t p = 0;
    for (; p + L <= P; p += L)
      for (std::size_t l = 0; l < L; ++l) {
        const T a0 = ar[0][p + l], a1 = ar[1][p + l];
        for (std::size_t j = 0; j < 4; ++j) {
          const T bv = br[j][p + l];
          acc[0][j][l] += a0 * bv;
          acc[1][j][l] += a1 * bv;
        }
      }
    for (std::size_t i = 0; i < mr; ++i)
      for (std::size_t j = 0; j < nr; ++j) {
        T s = T(0);
        for (std::size_t l = 0; l < L; ++l) s += acc[i][j][l];
        for (std::size_t q = p; q < P; ++q) s += ar[i][q] * br[j][q];
        c[(m0 + i) * ldc + n0 + j] += s;
      }
  };
  for (std::size_t m = 0; m < M; m += 2)
    for (std::size_t n = 0; n < N; n += 4) tile(m, std::min<std::size_t>(2, M - m), n, std::min<std::size_t>(4, N - n));
}

// Valid output range [lo, hi) along one axis for kernel offset k (stride 1).
inline void tap_range(std::size_t k, std::size_t pad, std::size_t in, std::size_t out, std::size_t& lo,
                      std::size_t& hi) {
  lo = pad > k ? pad - k : 0;
  hi = std::min(out, in + pad - k);
  if (hi < lo) hi = lo;
}

// One input plane against one KH x KW filter, stride 1. mode 0: y += w * x;
// mode 1: x_grad += w * y_grad; mode 2: w_grad += y_grad . x.
template <typename T>
void depthwise_plane(const ConvGeom& g, T* x, T* w, T* y, int mode) {
  for (std::size_t ky = 0; ky < g.KH; ++ky) {
    std::size_t y0, y1;
    tap_range(ky, g.pad, g.H, g.OH, y0, y1);
    for (std::size_t kx = 0; kx < g.KW; ++kx) {
      std::size_t x0, x1;
      tap_range(kx, g.pad, g.W, g.OW, x0, x1);
      if (x1 == x0) continue;
      T& wk = w[ky * g.KW + kx];
      const std::size_t len = x1 - x0;
      T acc = T(0);
      for (std::size_t oy = y0; oy < y1; ++oy) {
        T* yr = y + oy * g.OW + x0;
        T* xr = x + (oy + ky - g.pad) * g.W + (x0 + kx - g.pad);
        if (mode == 0) {
          for (std::size_t i = 0; i < len; ++i) yr[i] += wk * xr[i];
        } else if (mode == 1) {
          for (std::size_t i = 0; i < len; ++i) xr[i] += wk * yr[i];
        } else {
          acc += dot(yr, static_cast<const T*>(xr), len);
        }
      }
      if (mode == 2) wk += acc;
    }
  }
}

}  // namespace

template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, const std::optional<Tensor<T>>& b,
                 Conv2dOptions opt) {
  check_shape_4d(x, "conv2d");
  if (w.rank() != 4) throw ShapeError("conv2d: weight must be [O,C/g,kH,kW], got " + to_string(w.shape()));
  ConvGeom g{};
  g.N = x.dim(0);
  g.C = x.dim(1);
  g.H = x.dim(2);
  g.W = x.dim(3);
  g.O = w.dim(0);
  g.Cg = w.dim(1);
  g.KH = w.dim(2);
  g.KW = w.dim(3);
  g.G = opt.groups;
  g.stride = opt.stride;
  g.pad = opt.padding;
  if (g.G == 0 || g.stride == 0) throw ShapeError("conv2d: groups and stride must be positive");
  if (g.C % g.G != 0 || g.O % g.G != 0 || g.Cg * g.G != g.C)
    throw ShapeError("conv2d: channel/group mismatch: input " + to_string(x.shape()) + ", weight " +
                     to_string(w.shape()) + ", groups " + std::to_string(g.G));
  if (g.H + 2 * g.pad < g.KH || g.W + 2 * g.pad < g.KW) throw ShapeError("conv2d: kernel larger than padded input");
  if (b && (b->rank() != 1 || b->dim(0) != g.O)) throw ShapeError("conv2d: bias must be [O]");
  g.OH = (g.H + 2 * g.pad - g.KH) / g.stride + 1;
  g.OW = (g.W + 2 * g.pad - g.KW) / g.stride + 1;

  Tensor<T> out(Shape{g.N, g.O, g.OH, g.OW});
  cost::add_macs(static_cast<std::uint64_t>(g.N) * g.O * g.P() * g.K());
  if (cost::dry_run()) return out;

  const std::size_t P = g.P(), K = g.K(), Og = g.Og();
  const T* X = x.data().data();
  const T* Wt = w.data().data();
  T* Y = out.data().data();
  const bool depthwise = g.Cg == 1 && Og == 1 && g.stride == 1;
  std::vector<T> col(g.pointwise() || depthwise ? 0 : K * P);
  for (std::size_t n = 0; n < g.N && depthwise; ++n)
    for (std::size_t c = 0; c < g.C; ++c) {
      T* yout = Y + (n * g.O + c) * P;
      if (b) std::fill_n(yout, P, b->data()[c]);
      depthwise_plane(g, const_cast<T*>(X + (n * g.C + c) * g.H * g.W), const_cast<T*>(Wt + c * K), yout, 0);
    }
  for (std::size_t n = 0; n < g.N && !depthwise; ++n) {
    for (std::size_t gi = 0; gi < g.G; ++gi) {
      const T* xin = X + (n * g.C + gi * g.Cg) * g.H * g.W;
      const T* cp = xin;
      if (!g.pointwise()) {
        im2col(xin, g, col.data());
        cp = col.data();
      }
      T* yout = Y + (n * g.O + gi * Og) * P;
      if (b) {
        auto B = b->data();
        for (std::size_t o = 0; o < Og; ++o) std::fill_n(yout + o * P, P, B[gi * Og + o]);
      }
      gemm_rows(Wt + gi * Og * K, K, cp, K, P, yout, Og);
    }
  }

  if (recording<T>({&x, &w, b ? &*b : nullptr})) {
    auto* PX = x.impl().get();
    auto* PW = w.impl().get();
    TensorImpl<T>* PB = b ? b->impl().get() : nullptr;
    auto* PY = out.impl().get();
    std::vector<ImplPtr<T>> ins{x.impl(), w.impl()};
    if (b) ins.push_back(b->impl());
    record<T>(out, ins, [PX, PW, PB, PY, g] {
      const std::size_t P = g.P(), K = g.K(), Og = g.Og();
      const bool dx = PX->requires_grad, dw = PW->requires_grad, db = PB && PB->requires_grad;
      if (dx) PX->ensure_grad();
      if (dw) PW->ensure_grad();
      if (db) PB->ensure_grad();
      const bool depthwise = g.Cg == 1 && Og == 1 && g.stride == 1;
      if (depthwise) {
        for (std::size_t n = 0; n < g.N; ++n)
          for (std::size_t c = 0; c < g.C; ++c) {
            T* gy = PY->grad.data() + (n * g.O + c) * P;
            if (db) PB->grad[c] += reduce_sum(gy, P);
            if (dw) depthwise_plane(g, PX->data.data() + (n * g.C + c) * g.H * g.W, PW->grad.data() + c * K, gy, 2);
            if (dx) depthwise_plane(g, PX->grad.data() + (n * g.C + c) * g.H * g.W, PW->data.data() + c * K, gy, 1);
          }
        return;
      }
      std::vector<T> col(g.pointwise() ? 0 : K * P);
      std::vector<T> dcol(g.pointwise() ? 0 : K * P);
      for (std::size_t n = 0; n < g.N; ++n) {
        for (std::size_t gi = 0; gi < g.G; ++gi) {
          const T* gy = PY->grad.data() + (n * g.O + gi * Og) * P;
          const T* xin = PX->data.data() + (n * g.C + gi * g.Cg) * g.H * g.W;
          if (db)
            for (std::size_t o = 0; o < Og; ++o) PB->grad[gi * Og + o] += reduce_sum(gy + o * P, P);
          const T* cp = xin;
          if (dw) {
            if (!g.pointwise()) {
              im2col(xin, g, col.data());
              cp = col.data();
            }
            T* gw = PW->grad.data() + gi * Og * K;
            gemm_nt(gy, Og, cp, K, P, gw, K);
          }
          if (dx) {
            T* gx = PX->grad.data() + (n * g.C + gi * g.Cg) * g.H * g.W;
            const T* wt = PW->data.data() + gi * Og * K;
            if (g.pointwise()) {
              gemm_t_rows(wt, K, gy, Og, P, gx, K);
            } else {
              std::fill(dcol.begin(), dcol.end(), T(0));
              gemm_t_rows(wt, K, gy, Og, P, dcol.data(), K);
              col2im(dcol.data(), g, gx);
            }
          }
        }
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const std::optional<Tensor<T>>& b) {
  if (w.rank() != 2) throw ShapeError("linear: weight must be [d_out, d_in]");
  if (x.rank() == 0) throw ShapeError("linear: input must have a trailing axis");
  const std::size_t din = w.dim(1), dout = w.dim(0);
  if (x.shape().back() != din)
    throw ShapeError("linear: trailing extent " + std::to_string(x.shape().back()) + " != d_in " +
                     std::to_string(din));
  if (b && (b->rank() != 1 || b->dim(0) != dout)) throw ShapeError("linear: bias must be [d_out]");
  const std::size_t R = x.numel() / din;
  Shape os = x.shape();
  os.back() = dout;
  Tensor<T> out(os);
  cost::add_macs(static_cast<std::uint64_t>(R) * din * dout);
  if (cost::dry_run()) return out;
  const T* X = x.data().data();
  const T* Wt = w.data().data();
  T* Y = out.data().data();
  for (std::size_t r = 0; r < R; ++r)
    for (std::size_t o = 0; o < dout; ++o)
      Y[r * dout + o] = (b ? b->data()[o] : T(0)) + dot(X + r * din, Wt + o * din, din);

  if (recording<T>({&x, &w, b ? &*b : nullptr})) {
    auto* PX = x.impl().get();
    auto* PW = w.impl().get();
    TensorImpl<T>* PB = b ? b->impl().get() : nullptr;
    auto* PY = out.impl().get();
    std::vector<ImplPtr<T>> ins{x.impl(), w.impl()};
    if (b) ins.push_back(b->impl());
    record<T>(out, ins, [PX, PW, PB, PY, R, din, dout] {
      const bool dx = PX->requires_grad, dw = PW->requires_grad, db = PB && PB->requires_grad;
      if (dx) PX->ensure_grad();
      if (dw) PW->ensure_grad();
      if (db) PB->ensure_grad();
      for (std::size_t r = 0; r < R; ++r) {
        for (std::size_t o = 0; o < dout; ++o) {
          const T g = PY->grad[r * dout + o];
          if (dx) axpy(g, PW->data.data() + o * din, PX->grad.data() + r * din, din);
          if (dw) axpy(g, PX->data.data() + r * din, PW->grad.data() + o * din, din);
          if (db) PB->grad[o] += g;
        }
      }
    });
  }
  return out;
}

// -------------------- normalization --------------------

template <typename T>
Tensor<T> batch_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                     Tensor<T>& running_mean, Tensor<T>& running_var, bool training,
                     BatchNormState opt) {
  check_shape_4d(x, "batch_norm");
  const std::size_t N = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
  for (const Tensor<T>* p : std::initializer_list<const Tensor<T>*>{&gamma, &beta, &running_mean, &running_var})
    if (p->numel() != C) throw ShapeError("batch_norm: parameter extent does not match channels " + std::to_string(C));
  const std::size_t m = N * HW;
  if (training && m <= 1)
    throw NumericError("batch_norm: degenerate statistics, one value per channel in training mode (input " +
                       to_string(x.shape()) + ")");
  Tensor<T> out(x.shape());
  cost::add_elementwise(x.numel());
  if (cost::dry_run()) return out;

  const T* X = x.data().data();
  T* Y = out.data().data();
  std::vector<T> mu(C), invstd(C);
  for (std::size_t c = 0; c < C; ++c) {
    if (training) {
      double s = 0;
      for (std::size_t n = 0; n < N; ++n) s += reduce_sum(X + (n * C + c) * HW, HW);
      const double mean_c = s / static_cast<double>(m);
      double v = 0;
      for (std::size_t n = 0; n < N; ++n) {
        const T* xr = X + (n * C + c) * HW;
        for (std::size_t i = 0; i < HW; ++i) {
          const double d = static_cast<double>(xr[i]) - mean_c;
          v += d * d;
        }
      }
      const double var_b = v / static_cast<double>(m);
      mu[c] = static_cast<T>(mean_c);
      invstd[c] = static_cast<T>(1.0 / std::sqrt(var_b + opt.eps));
      auto rm = running_mean.data();
      auto rv = running_var.data();
      rm[c] = static_cast<T>((1.0 - opt.momentum) * rm[c] + opt.momentum * mean_c);
      rv[c] = static_cast<T>((1.0 - opt.momentum) * rv[c] +
                             opt.momentum * v / static_cast<double>(m - 1));
    } else {
      mu[c] = running_mean.data()[c];
      invstd[c] = static_cast<T>(1.0 / std::sqrt(static_cast<double>(running_var.data()[c]) + opt.eps));
    }
    const T gsc = gamma.data()[c] * invstd[c];
    const T sh = beta.data()[c] - mu[c] * gsc;
    for (std::size_t n = 0; n < N; ++n) {
      const T* xr = X + (n * C + c) * HW;
      T* yr = Y + (n * C + c) * HW;
      for (std::size_t i = 0; i < HW; ++i) yr[i] = xr[i] * gsc + sh;
    }
  }

  if (recording<T>({&x, &gamma, &beta})) {
    auto* PX = x.impl().get();
    auto* PG = gamma.impl().get();
    auto* PB = beta.impl().get();
    auto* PY = out.impl().get();
    record<T>(out, {x.impl(), gamma.impl(), beta.impl()},
              [PX, PG, PB, PY, mu = std::move(mu), invstd = std::move(invstd), N, C, HW, m, training] {
                const bool dx = PX->requires_grad, dg = PG->requires_grad, db = PB->requires_grad;
                if (dx) PX->ensure_grad();
                if (dg) PG->ensure_grad();
                if (db) PB->ensure_grad();
                for (std::size_t c = 0; c < C; ++c) {
                  double sg = 0, sgx = 0;
                  for (std::size_t n = 0; n < N; ++n) {
                    const T* g = PY->grad.data() + (n * C + c) * HW;
                    const T* xr = PX->data.data() + (n * C + c) * HW;
                    for (std::size_t i = 0; i < HW; ++i) {
                      sg += g[i];
                      sgx += static_cast<double>(g[i]) * static_cast<double>((xr[i] - mu[c]) * invstd[c]);
                    }
                  }
                  if (dg) PG->grad[c] += static_cast<T>(sgx);
                  if (db) PB->grad[c] += static_cast<T>(sg);
                  if (!dx) continue;
                  const T gm = PG->data[c];
                  if (training) {
                    // dx = gamma*invstd/m * (m*g - sum(g) - xhat*sum(g*xhat))
                    const T k = gm * invstd[c] / static_cast<T>(m);
                    const T a = static_cast<T>(sg);
                    const T bsum = static_cast<T>(sgx);
                    for (std::size_t n = 0; n < N; ++n) {
                      const T* g = PY->grad.data() + (n * C + c) * HW;
                      const T* xr = PX->data.data() + (n * C + c) * HW;
                      T* gx = PX->grad.data() + (n * C + c) * HW;
                      for (std::size_t i = 0; i < HW; ++i) {
                        const T xh = (xr[i] - mu[c]) * invstd[c];
                        gx[i] += k * (static_cast<T>(m) * g[i] - a - xh * bsum);
                      }
                    }
                  } else {
                    const T k = gm * invstd[c];
                    for (std::size_t n = 0; n < N; ++n) {
                      const T* g = PY->grad.data() + (n * C + c) * HW;
                      T* gx = PX->grad.data() + (n * C + c) * HW;
                      for (std::size_t i = 0; i < HW; ++i) gx[i] += k * g[i];
                    }
                  }
                }
              });
  }
  return out;
}

template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, double eps) {
  if (x.rank() == 0) throw ShapeError("layer_norm: input must have a trailing axis");
  const std::size_t L = x.shape().back();
  if (gamma.numel() != L || beta.numel() != L)
    throw ShapeError("layer_norm: parameter extent does not match trailing extent " + std::to_string(L));
  const std::size_t R = x.numel() / L;
  Tensor<T> out(x.shape());
  cost::add_elementwise(x.numel());
  if (cost::dry_run()) return out;
  const T* X = x.data().data();
  T* Y = out.data().data();
  std::vector<T> mu(R), invstd(R);
  for (std::size_t r = 0; r < R; ++r) {
    const T* xr = X + r * L;
    double s = 0;
    for (std::size_t i = 0; i < L; ++i) s += xr[i];
    const double mean_r = s / static_cast<double>(L);
    double v = 0;
    for (std::size_t i = 0; i < L; ++i) {
      const double d = static_cast<double>(xr[i]) - mean_r;
      v += d * d;
    }
    mu[r] = static_cast<T>(mean_r);
    invstd[r] = static_cast<T>(1.0 / std::sqrt(v / static_cast<double>(L) + eps));
    for (std::size_t i = 0; i < L; ++i)
      Y[r * L + i] = (xr[i] - mu[r]) * invstd[r] * gamma.data()[i] + beta.data()[i];
  }
  if (recording<T>({&x, &gamma, &beta})) {
    auto* PX = x.impl().get();
    auto* PG = gamma.impl().get();
    auto* PB = beta.impl().get();
    auto* PY = out.impl().get();
    record<T>(out, {x.impl(), gamma.impl(), beta.impl()},
              [PX, PG, PB, PY, mu = std::move(mu), invstd = std::move(invstd), R, L] {
                const bool dx = PX->requires_grad, dg = PG->requires_grad, db = PB->requires_grad;
                if (dx) PX->ensure_grad();
                if (dg) PG->ensure_grad();
                if (db) PB->ensure_grad();
                std::vector<T> xh(L), dxh(L);
                for (std::size_t r = 0; r < R; ++r) {
                  const T* g = PY->grad.data() + r * L;
                  const T* xr = PX->data.data() + r * L;
                  T s1 = 0, s2 = 0;
                  for (std::size_t i = 0; i < L; ++i) {
                    xh[i] = (xr[i] - mu[r]) * invstd[r];
                    dxh[i] = g[i] * PG->data[i];
                    s1 += dxh[i];
                    s2 += dxh[i] * xh[i];
                    if (dg) PG->grad[i] += g[i] * xh[i];
                    if (db) PB->grad[i] += g[i];
                  }
                  if (!dx) continue;
                  const T k = invstd[r] / static_cast<T>(L);
                  T* gx = PX->grad.data() + r * L;
                  for (std::size_t i = 0; i < L; ++i)
                    gx[i] += k * (static_cast<T>(L) * dxh[i] - s1 - xh[i] * s2);
                }
              });
  }
  return out;
}

// -------------------- resampling --------------------

namespace {

struct Interp {
  std::size_t i0, i1;
  double w0, w1;
};

std::vector<Interp> interp_table(std::size_t in, std::size_t out) {
  std::vector<Interp> t(out);
  const double ratio = static_cast<double>(in) / static_cast<double>(out);
  for (std::size_t o = 0; o < out; ++o) {
    double src = (static_cast<double>(o) + 0.5) * ratio - 0.5;
    if (src < 0) src = 0;
    std::size_t i0 = static_cast<std::size_t>(src);
    if (i0 > in - 1) i0 = in - 1;
    std::size_t i1 = i0 + (i0 < in - 1 ? 1 : 0);
    double w1 = src - static_cast<double>(i0);
    t[o] = {i0, i1, 1.0 - w1, w1};
  }
  return t;
}

}  // namespace

template <typename T>
Tensor<T> upsample_bilinear2x(const Tensor<T>& x) {
  check_shape_4d(x, "upsample_bilinear2x");
  const std::size_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const std::size_t OH = 2 * H, OW = 2 * W;
  Tensor<T> out(Shape{N, C, OH, OW});
  cost::add_elementwise(out.numel());
  if (cost::dry_run()) return out;
  auto ty = interp_table(H, OH);
  auto tx = interp_table(W, OW);
  const T* X = x.data().data();
  T* Y = out.data().data();
  for (std::size_t nc = 0; nc < N * C; ++nc) {
    const T* xp = X + nc * H * W;
    T* yp = Y + nc * OH * OW;
    for (std::size_t oy = 0; oy < OH; ++oy) {
      const auto& a = ty[oy];
      for (std::size_t ox = 0; ox < OW; ++ox) {
        const auto& b = tx[ox];
        yp[oy * OW + ox] = static_cast<T>(a.w0 * (b.w0 * xp[a.i0 * W + b.i0] + b.w1 * xp[a.i0 * W + b.i1]) +
                                          a.w1 * (b.w0 * xp[a.i1 * W + b.i0] + b.w1 * xp[a.i1 * W + b.i1]));
      }
    }
  }
  if (recording<T>({&x})) {
    auto* PX = x.impl().get();
    auto* PY = out.impl().get();
    record<T>(out, {x.impl()}, [PX, PY, ty = std::move(ty), tx = std::move(tx), N, C, H, W, OH, OW] {
      if (!PX->requires_grad) return;
      PX->ensure_grad();
      for (std::size_t nc = 0; nc < N * C; ++nc) {
        T* gx = PX->grad.data() + nc * H * W;
        const T* g = PY->grad.data() + nc * OH * OW;
        for (std::size_t oy = 0; oy < OH; ++oy) {
          const auto& a = ty[oy];
          for (std::size_t ox = 0; ox < OW; ++ox) {
            const auto& b = tx[ox];
            const double gv = g[oy * OW + ox];
            gx[a.i0 * W + b.i0] += static_cast<T>(gv * a.w0 * b.w0);
            gx[a.i0 * W + b.i1] += static_cast<T>(gv * a.w0 * b.w1);
            gx[a.i1 * W + b.i0] += static_cast<T>(gv * a.w1 * b.w0);
            gx[a.i1 * W + b.i1] += static_cast<T>(gv * a.w1 * b.w1);
          }
        }
      }
    });
  }
  return out;
}

// -------------------- loss --------------------

template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& logits, std::span<const int> target) {
  check_shape_4d(logits, "cross_entropy");
  const std::size_t N = logits.dim(0), K = logits.dim(1), HW = logits.dim(2) * logits.dim(3);
  if (target.size() != N * HW)
    throw ShapeError("cross_entropy: target has " + std::to_string(target.size()) + " entries, expected " +
                     std::to_string(N * HW));
  for (std::size_t i = 0; i < target.size(); ++i)
    if (target[i] < 0 || static_cast<std::size_t>(target[i]) >= K)
      throw ValidationError("cross_entropy: class " + std::to_string(target[i]) + " at pixel " +
                            std::to_string(i) + " outside [0," + std::to_string(K) + ")");
  Tensor<T> out(Shape{});
  cost::add_elementwise(logits.numel());
  if (cost::dry_run()) return out;
  const T* Z = logits.data().data();
  const std::size_t M = N * HW;
  // Probabilities kept for backward.
  auto prob = std::make_shared<std::vector<T>>(logits.numel());
  double total = 0;
  for (std::size_t n = 0; n < N; ++n) {
    for (std::size_t p = 0; p < HW; ++p) {
      const T* z = Z + n * K * HW + p;
      T mx = z[0];
      for (std::size_t k = 1; k < K; ++k) mx = std::max(mx, z[k * HW]);
      double s = 0;
      for (std::size_t k = 0; k < K; ++k) s += std::exp(static_cast<double>(z[k * HW] - mx));
      const double lse = std::log(s) + static_cast<double>(mx);
      const int t = target[n * HW + p];
      total += lse - static_cast<double>(z[static_cast<std::size_t>(t) * HW]);
      for (std::size_t k = 0; k < K; ++k)
        (*prob)[n * K * HW + k * HW + p] = static_cast<T>(std::exp(static_cast<double>(z[k * HW]) - lse));
    }
  }
  out.data()[0] = static_cast<T>(total / static_cast<double>(M));
  if (recording<T>({&logits})) {
    auto* PX = logits.impl().get();
    auto* PY = out.impl().get();
    std::vector<int> tgt(target.begin(), target.end());
    record<T>(out, {logits.impl()}, [PX, PY, prob, tgt = std::move(tgt), N, K, HW, M] {
      if (!PX->requires_grad) return;
      PX->ensure_grad();
      const T g = PY->grad[0] / static_cast<T>(M);
      for (std::size_t n = 0; n < N; ++n)
        for (std::size_t k = 0; k < K; ++k)
          for (std::size_t p = 0; p < HW; ++p) {
            const std::size_t i = n * K * HW + k * HW + p;
            const T onehot = static_cast<std::size_t>(tgt[n * HW + p]) == k ? T(1) : T(0);
            PX->grad[i] += g * ((*prob)[i] - onehot);
          }
    });
  }
  return out;
}

// -------------------- instantiation --------------------

#define SEGNETR_INSTANTIATE_OPS(T)                                                                    \
  template Tensor<T> reshape(const Tensor<T>&, Shape);                                                \
  template Tensor<T> permute(const Tensor<T>&, const std::vector<std::size_t>&);                      \
  template Tensor<T> slice(const Tensor<T>&, std::size_t, std::size_t, std::size_t);                  \
  template Tensor<T> concat(const std::vector<Tensor<T>>&, std::size_t);                              \
  template Tensor<T> gather(const Tensor<T>&, Shape, std::shared_ptr<const std::vector<std::size_t>>); \
  template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                                         \
  template Tensor<T> sub(const Tensor<T>&, const Tensor<T>&);                                         \
  template Tensor<T> mul(const Tensor<T>&, const Tensor<T>&);                                         \
  template Tensor<T> scale(const Tensor<T>&, T);                                                      \
  template Tensor<T> activation(const Tensor<T>&, Activation);                                        \
  template Tensor<T> sum(const Tensor<T>&);                                                           \
  template Tensor<T> mean(const Tensor<T>&, std::size_t, bool);                                       \
  template Tensor<T> softmax(const Tensor<T>&, std::size_t);                                          \
  template Tensor<T> conv2d(const Tensor<T>&, const Tensor<T>&, const std::optional<Tensor<T>>&,     \
                            Conv2dOptions);                                                           \
  template Tensor<T> linear(const Tensor<T>&, const Tensor<T>&, const std::optional<Tensor<T>>&);    \
  template Tensor<T> batch_norm(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, Tensor<T>&,     \
                                Tensor<T>&, bool, BatchNormState);                                    \
  template Tensor<T> layer_norm(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, double);        \
  template Tensor<T> upsample_bilinear2x(const Tensor<T>&);                                           \
  template Tensor<T> cross_entropy(const Tensor<T>&, std::span<const int>);

SEGNETR_INSTANTIATE_OPS(float)
SEGNETR_INSTANTIATE_OPS(double)

}  // namespace segnetr
