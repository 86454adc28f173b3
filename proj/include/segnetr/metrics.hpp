#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "segnetr/tensor.hpp"

namespace segnetr::metrics {

struct ConfusionCounts {
  std::size_t num_classes = 0;
  std::vector<std::uint64_t> tp, fp, fn;

  explicit ConfusionCounts(std::size_t k = 0) : num_classes(k), tp(k), fp(k), fn(k) {}
  ConfusionCounts& operator+=(const ConfusionCounts& other);
};

/// Per-pixel argmax over the class axis of [N,K,H,W]; ties go to the lower class.
template <typename T>
std::vector<int> argmax_classes(const Tensor<T>& logits);

ConfusionCounts confusion(std::span<const int> pred, std::span<const int> gt, std::size_t num_classes);

struct Scores {
  std::vector<double> iou, dice;
  std::vector<bool> counted;  // false for classes absent from both maps
  double mean_iou = 1;
  double mean_dice = 1;
};

/// IoU = TP/(TP+FP+FN), Dice = 2TP/(2TP+FP+FN). A class with TP+FP+FN = 0
/// scores 1 and is left out of the means. Means cover classes
/// first_class..K-1; with none counted they are 1.
Scores iou_dice(const ConfusionCounts& counts, std::size_t first_class = 0);

}  // namespace segnetr::metrics
