#pragma once

#include <cstddef>
#include <memory>
#include <vector>

#include "segnetr/tensor.hpp"

// Index-permutation transforms on channels-last feature maps. Inputs are
// [H,W,C] or batched [N,H,W,C]. No op here performs arithmetic on values;
// each is an exact bijection on element indices (alternate_select is a
// projection onto the kept channels, padding inserts zeros that reversal
// crops away).
namespace segnetr::layout {

/// Which axis parity selects the shift direction of a patch.
///  - cross_axis: horizontal direction from the patch ROW parity, vertical
///    direction from the patch COLUMN parity (the adopted rule).
///  - own_axis: horizontal from the column parity, vertical from the row
///    parity. Kept for comparison; only bijective on even patch grids.
enum class ParityRule { cross_axis, own_axis };

/// Patch displacement on the P x P patch grid. Horizontal pass first: an odd
/// patch moves one patch left, an even one right. Then the vertical pass on
/// the shifted grid: odd moves one patch up, even one down. Both wrap
/// cyclically. Parity is 0-indexed.
struct DisplacementSpec {
  std::size_t patch = 1;
  ParityRule parity = ParityRule::cross_axis;
};

/// dest -> source patch map on a rows x cols grid: the patch that ends up at
/// grid cell d came from cell result[d] (cells row-major). Throws LayoutError
/// when the rule is not a bijection on that grid.
std::vector<std::size_t> displacement_source(std::size_t rows, std::size_t cols, ParityRule parity);

struct WindowGrid {
  std::size_t batch = 1;
  std::size_t height = 0, width = 0, channels = 0;
  std::size_t patch = 0;   // P
  std::size_t window = 0;  // P for local windows, 2P for global windows
  std::size_t pad_top = 0, pad_bottom = 0, pad_left = 0, pad_right = 0;
  bool batched = false;  // input was [N,H,W,C]

  std::size_t padded_height() const { return height + pad_top + pad_bottom; }
  std::size_t padded_width() const { return width + pad_left + pad_right; }
  std::size_t rows() const { return padded_height() / window; }
  std::size_t cols() const { return padded_width() / window; }
  std::size_t windows_per_image() const { return rows() * cols(); }
  std::size_t num_windows() const { return batch * windows_per_image(); }
  std::size_t window_area() const { return window * window; }
  bool padded() const { return pad_top + pad_bottom + pad_left + pad_right > 0; }
};

/// Windows laid out as (num_windows, S, S, C), windows ordered by image then
/// row-major over the window grid.
template <typename T>
struct WindowStack {
  Tensor<T> windows;
  WindowGrid grid;
  bool displaced = false;
  DisplacementSpec displacement{};
};

struct PartitionOptions {
  /// Zero-pad (split as evenly as possible, extra row/col at the bottom/right)
  /// up to a multiple of the window size instead of rejecting the extents.
  bool allow_padding = false;
  ParityRule parity = ParityRule::cross_axis;
};

template <typename T>
WindowStack<T> local_partition(const Tensor<T>& x, std::size_t patch, PartitionOptions opt = {});

template <typename T>
Tensor<T> local_reverse(const WindowStack<T>& ws);

template <typename T>
Tensor<T> displace(const Tensor<T>& x, const DisplacementSpec& spec);

template <typename T>
Tensor<T> displace_inverse(const Tensor<T>& x, const DisplacementSpec& spec);

/// local_partition(displace(x, P), 2P). The displacement acts on the
/// unpadded P-patch grid, so P must divide H and W; only the 2P tiling may pad.
template <typename T>
WindowStack<T> global_partition(const Tensor<T>& x, std::size_t patch, PartitionOptions opt = {});

template <typename T>
Tensor<T> global_reverse(const WindowStack<T>& ws);

/// (H,W,C) -> (H/2,W/2,4C) with out[i,j,4k+2di+dj] = in[2i+di,2j+dj,k].
template <typename T>
Tensor<T> patch_merge(const Tensor<T>& x);

/// Keeps channels 0,2,4,... in order.
template <typename T>
Tensor<T> alternate_select(const Tensor<T>& x);

/// (h,w,C) -> (2h,2w,C/4) with out[2i+di,2j+dj,k] = in[i,j,4k+2di+dj].
template <typename T>
Tensor<T> patch_reverse(const Tensor<T>& x);

}  // namespace segnetr::layout
