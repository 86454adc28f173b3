#include "segnetr/layout.hpp"

#include <string>

#include "segnetr/ops.hpp"

namespace segnetr::layout {

namespace {

using Index = std::vector<std::size_t>;

struct Dims {
  std::size_t n, h, w, c;
  bool batched;
};

template <typename T>
Dims dims_of(const Tensor<T>& x, const char* op) {
  if (x.rank() == 3) return {1, x.dim(0), x.dim(1), x.dim(2), false};
  if (x.rank() == 4) return {x.dim(0), x.dim(1), x.dim(2), x.dim(3), true};
  throw ShapeError(std::string(op) + ": expected [H,W,C] or [N,H,W,C], got " + to_string(x.shape()));
}

Shape shape_of(const Dims& d) {
  if (d.batched) return {d.n, d.h, d.w, d.c};
  return {d.h, d.w, d.c};
}

void check_patch_divides(const Dims& d, std::size_t patch, const char* op) {
  if (patch == 0) throw LayoutError(std::string(op) + ": patch size must be positive");
  if (d.h % patch != 0 || d.w % patch != 0)
    throw LayoutError(std::string(op) + ": patch " + std::to_string(patch) + " does not divide " +
                      std::to_string(d.h) + "x" + std::to_string(d.w));
}

WindowGrid make_grid(const Dims& d, std::size_t patch, std::size_t window, bool allow_padding,
                     const char* op) {
  WindowGrid g;
  g.batch = d.n;
  g.height = d.h;
  g.width = d.w;
  g.channels = d.c;
  g.patch = patch;
  g.window = window;
  g.batched = d.batched;
  if (window == 0) throw LayoutError(std::string(op) + ": window size must be positive");
  const std::size_t ph = (window - d.h % window) % window;
  const std::size_t pw = (window - d.w % window) % window;
  if ((ph || pw) && !allow_padding)
    throw LayoutError(std::string(op) + ": window " + std::to_string(window) + " does not divide " +
                      std::to_string(d.h) + "x" + std::to_string(d.w) + " (padding disabled)");
  g.pad_top = ph / 2;
  g.pad_bottom = ph - ph / 2;
  g.pad_left = pw / 2;
  g.pad_right = pw - pw / 2;
  return g;
}

// For every window element, the flat source index in the (possibly displaced)
// [N,H,W,C] input, or kPadIndex inside padding. `patch_src` maps a displaced
// patch cell to its source cell; empty means no displacement.
Index window_index(const WindowGrid& g, const Index& patch_src) {
  const std::size_t S = g.window, P = g.patch;
  const std::size_t pcols = g.width / (P ? P : 1);
  Index idx;
  idx.reserve(g.num_windows() * S * S * g.channels);
  for (std::size_t n = 0; n < g.batch; ++n)
    for (std::size_t wr = 0; wr < g.rows(); ++wr)
      for (std::size_t wc = 0; wc < g.cols(); ++wc)
        for (std::size_t py = 0; py < S; ++py)
          for (std::size_t px = 0; px < S; ++px) {
            const long y = static_cast<long>(wr * S + py) - static_cast<long>(g.pad_top);
            const long x = static_cast<long>(wc * S + px) - static_cast<long>(g.pad_left);
            if (y < 0 || x < 0 || y >= static_cast<long>(g.height) || x >= static_cast<long>(g.width)) {
              for (std::size_t c = 0; c < g.channels; ++c) idx.push_back(kPadIndex);
              continue;
            }
            std::size_t sy = static_cast<std::size_t>(y), sx = static_cast<std::size_t>(x);
            if (!patch_src.empty()) {
              const std::size_t src = patch_src[(sy / P) * pcols + sx / P];
              sy = (src / pcols) * P + sy % P;
              sx = (src % pcols) * P + sx % P;
            }
            const std::size_t base = ((n * g.height + sy) * g.width + sx) * g.channels;
            for (std::size_t c = 0; c < g.channels; ++c) idx.push_back(base + c);
          }
  return idx;
}

// Inverse of a window index: for every source element, where it sits among
// the windows. Padding entries are dropped.
Index invert_index(const Index& fwd, std::size_t source_size) {
  Index inv(source_size, kPadIndex);
  for (std::size_t j = 0; j < fwd.size(); ++j)
    if (fwd[j] != kPadIndex) inv[fwd[j]] = j;
  return inv;
}

Index displacement_pixel_index(const Dims& d, const DisplacementSpec& spec, bool inverse) {
  const std::size_t P = spec.patch;
  const std::size_t rows = d.h / P, cols = d.w / P;
  Index cell = displacement_source(rows, cols, spec.parity);
  if (inverse) {
    Index inv(cell.size());
    for (std::size_t dst = 0; dst < cell.size(); ++dst) inv[cell[dst]] = dst;
    cell = std::move(inv);
  }
  Index idx;
  idx.reserve(d.n * d.h * d.w * d.c);
  for (std::size_t n = 0; n < d.n; ++n)
    for (std::size_t y = 0; y < d.h; ++y)
      for (std::size_t x = 0; x < d.w; ++x) {
        const std::size_t src = cell[(y / P) * cols + x / P];
        const std::size_t sy = (src / cols) * P + y % P;
        const std::size_t sx = (src % cols) * P + x % P;
        const std::size_t base = ((n * d.h + sy) * d.w + sx) * d.c;
        for (std::size_t c = 0; c < d.c; ++c) idx.push_back(base + c);
      }
  return idx;
}

template <typename T>
Tensor<T> gather_with(const Tensor<T>& x, Shape s, Index idx) {
  return gather(x, std::move(s), std::make_shared<const Index>(std::move(idx)));
}

template <typename T>
Tensor<T> reverse_windows(const WindowStack<T>& ws, const Index& patch_src) {
  const auto& g = ws.grid;
  const Shape expect{g.num_windows(), g.window, g.window, g.channels};
  if (ws.windows.shape() != expect)
    throw ShapeError("window reverse: stack shape " + to_string(ws.windows.shape()) +
                     " does not match its grid " + to_string(expect));
  const std::size_t source_size = g.batch * g.height * g.width * g.channels;
  auto inv = invert_index(window_index(g, patch_src), source_size);
  Dims d{g.batch, g.height, g.width, g.channels, g.batched};
  return gather_with(ws.windows, shape_of(d), std::move(inv));
}

}  // namespace

std::vector<std::size_t> displacement_source(std::size_t rows, std::size_t cols, ParityRule parity) {
  if (rows == 0 || cols == 0) throw LayoutError("displacement: empty patch grid");
  const std::size_t cells = rows * cols;
  auto step = [](std::size_t v, bool odd, std::size_t mod) {
    return odd ? (v + mod - 1) % mod : (v + 1) % mod;
  };
  Index dest_of(cells);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) {
      const bool h_odd = parity == ParityRule::cross_axis ? (r % 2 == 1) : (c % 2 == 1);
      const std::size_t c1 = step(c, h_odd, cols);
      const bool v_odd = parity == ParityRule::cross_axis ? (c1 % 2 == 1) : (r % 2 == 1);
      const std::size_t r1 = step(r, v_odd, rows);
      dest_of[r * cols + c] = r1 * cols + c1;
    }
  Index src_of(cells, kPadIndex);
  for (std::size_t s = 0; s < cells; ++s) {
    if (src_of[dest_of[s]] != kPadIndex)
      throw LayoutError("displacement: parity rule is not a bijection on a " + std::to_string(rows) + "x" +
                        std::to_string(cols) + " patch grid");
    src_of[dest_of[s]] = s;
  }
  return src_of;
}

template <typename T>
WindowStack<T> local_partition(const Tensor<T>& x, std::size_t patch, PartitionOptions opt) {
  auto d = dims_of(x, "local_partition");
  if (patch == 0) throw LayoutError("local_partition: patch size must be positive");
  auto g = make_grid(d, patch, patch, opt.allow_padding, "local_partition");
  WindowStack<T> ws;
  ws.windows = gather_with(x, Shape{g.num_windows(), patch, patch, d.c}, window_index(g, {}));
  ws.grid = g;
  return ws;
}

template <typename T>
Tensor<T> local_reverse(const WindowStack<T>& ws) {
  if (ws.displaced) throw ContractError("local_reverse: stack was displaced, use global_reverse");
  return reverse_windows(ws, {});
}

template <typename T>
Tensor<T> displace(const Tensor<T>& x, const DisplacementSpec& spec) {
  auto d = dims_of(x, "displace");
  check_patch_divides(d, spec.patch, "displace");
  return gather_with(x, x.shape(), displacement_pixel_index(d, spec, false));
}

template <typename T>
Tensor<T> displace_inverse(const Tensor<T>& x, const DisplacementSpec& spec) {
  auto d = dims_of(x, "displace_inverse");
  check_patch_divides(d, spec.patch, "displace_inverse");
  return gather_with(x, x.shape(), displacement_pixel_index(d, spec, true));
}

template <typename T>
WindowStack<T> global_partition(const Tensor<T>& x, std::size_t patch, PartitionOptions opt) {
  auto d = dims_of(x, "global_partition");
  check_patch_divides(d, patch, "global_partition");
  auto g = make_grid(d, patch, 2 * patch, opt.allow_padding, "global_partition");
  auto src = displacement_source(d.h / patch, d.w / patch, opt.parity);
  WindowStack<T> ws;
  ws.windows = gather_with(x, Shape{g.num_windows(), g.window, g.window, d.c}, window_index(g, src));
  ws.grid = g;
  ws.displaced = true;
  ws.displacement = {patch, opt.parity};
  return ws;
}

template <typename T>
Tensor<T> global_reverse(const WindowStack<T>& ws) {
  if (!ws.displaced) throw ContractError("global_reverse: stack was not displaced, use local_reverse");
  const auto& g = ws.grid;
  auto src = displacement_source(g.height / g.patch, g.width / g.patch, ws.displacement.parity);
  return reverse_windows(ws, src);
}

template <typename T>
Tensor<T> patch_merge(const Tensor<T>& x) {
  auto d = dims_of(x, "patch_merge");
  if (d.h % 2 || d.w % 2)
    throw LayoutError("patch_merge: extents must be even, got " + std::to_string(d.h) + "x" + std::to_string(d.w));
  const std::size_t h = d.h / 2, w = d.w / 2, oc = 4 * d.c;
  Index idx(d.n * h * w * oc);
  for (std::size_t n = 0; n < d.n; ++n)
    for (std::size_t i = 0; i < h; ++i)
      for (std::size_t j = 0; j < w; ++j)
        for (std::size_t k = 0; k < d.c; ++k)
          for (std::size_t di = 0; di < 2; ++di)
            for (std::size_t dj = 0; dj < 2; ++dj)
              idx[((n * h + i) * w + j) * oc + 4 * k + 2 * di + dj] =
                  ((n * d.h + 2 * i + di) * d.w + 2 * j + dj) * d.c + k;
  Dims od{d.n, h, w, oc, d.batched};
  return gather_with(x, shape_of(od), std::move(idx));
}

template <typename T>
Tensor<T> alternate_select(const Tensor<T>& x) {
  auto d = dims_of(x, "alternate_select");
  if (d.c % 2) throw LayoutError("alternate_select: channel count " + std::to_string(d.c) + " is odd");
  const std::size_t oc = d.c / 2;
  const std::size_t pixels = d.n * d.h * d.w;
  Index idx(pixels * oc);
  for (std::size_t p = 0; p < pixels; ++p)
    for (std::size_t m = 0; m < oc; ++m) idx[p * oc + m] = p * d.c + 2 * m;
  Dims od{d.n, d.h, d.w, oc, d.batched};
  return gather_with(x, shape_of(od), std::move(idx));
}

template <typename T>
Tensor<T> patch_reverse(const Tensor<T>& x) {
  auto d = dims_of(x, "patch_reverse");
  if (d.c % 4) throw LayoutError("patch_reverse: channel count " + std::to_string(d.c) + " not divisible by 4");
  const std::size_t H = 2 * d.h, W = 2 * d.w, oc = d.c / 4;
  Index idx(d.n * H * W * oc);
  for (std::size_t n = 0; n < d.n; ++n)
    for (std::size_t i = 0; i < d.h; ++i)
      for (std::size_t j = 0; j < d.w; ++j)
        for (std::size_t k = 0; k < oc; ++k)
          for (std::size_t di = 0; di < 2; ++di)
            for (std::size_t dj = 0; dj < 2; ++dj)
              idx[((n * H + 2 * i + di) * W + 2 * j + dj) * oc + k] =
                  ((n * d.h + i) * d.w + j) * d.c + 4 * k + 2 * di + dj;
  Dims od{d.n, H, W, oc, d.batched};
  return gather_with(x, shape_of(od), std::move(idx));
}

#define SEGNETR_INSTANTIATE_LAYOUT(T)                                                      \
  template WindowStack<T> local_partition(const Tensor<T>&, std::size_t, PartitionOptions);  \
  template Tensor<T> local_reverse(const WindowStack<T>&);                                  \
  template Tensor<T> displace(const Tensor<T>&, const DisplacementSpec&);                   \
  template Tensor<T> displace_inverse(const Tensor<T>&, const DisplacementSpec&);           \
  template WindowStack<T> global_partition(const Tensor<T>&, std::size_t, PartitionOptions); \
  template Tensor<T> global_reverse(const WindowStack<T>&);                                 \
  template Tensor<T> patch_merge(const Tensor<T>&);                                         \
  template Tensor<T> alternate_select(const Tensor<T>&);                                    \
  template Tensor<T> patch_reverse(const Tensor<T>&);

SEGNETR_INSTANTIATE_LAYOUT(float)
SEGNETR_INSTANTIATE_LAYOUT(double)

}  // namespace segnetr::layout
