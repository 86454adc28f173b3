#include "segnetr/metrics.hpp"

namespace segnetr::metrics {

ConfusionCounts& ConfusionCounts::operator+=(const ConfusionCounts& other) {
  if (other.num_classes != num_classes) throw ShapeError("confusion counts: class count mismatch");
  for (std::size_t k = 0; k < num_classes; ++k) {
    tp[k] += other.tp[k];
    fp[k] += other.fp[k];
    fn[k] += other.fn[k];
  }
  return *this;
}

template <typename T>
std::vector<int> argmax_classes(const Tensor<T>& logits) {
  if (logits.rank() != 4) throw ShapeError("argmax_classes: expected [N,K,H,W], got " + to_string(logits.shape()));
  const std::size_t N = logits.dim(0), K = logits.dim(1), HW = logits.dim(2) * logits.dim(3);
  const auto d = logits.data();
  std::vector<int> out(N * HW);
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t p = 0; p < HW; ++p) {
      std::size_t best = 0;
      for (std::size_t k = 1; k < K; ++k)
        if (d[(n * K + k) * HW + p] > d[(n * K + best) * HW + p]) best = k;
      out[n * HW + p] = static_cast<int>(best);
    }
  return out;
}

ConfusionCounts confusion(std::span<const int> pred, std::span<const int> gt, std::size_t num_classes) {
  if (pred.size() != gt.size())
    throw ShapeError("confusion: " + std::to_string(pred.size()) + " predictions vs " + std::to_string(gt.size()) +
                     " labels");
  ConfusionCounts c(num_classes);
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const int p = pred[i], g = gt[i];
    if (p < 0 || g < 0 || static_cast<std::size_t>(p) >= num_classes || static_cast<std::size_t>(g) >= num_classes)
      throw ValidationError("confusion: class index out of range at pixel " + std::to_string(i));
    if (p == g) {
      ++c.tp[p];
    } else {
      ++c.fp[p];
      ++c.fn[g];
    }
  }
  return c;
}

Scores iou_dice(const ConfusionCounts& c, std::size_t first_class) {
  Scores s;
  s.iou.assign(c.num_classes, 1.0);
  s.dice.assign(c.num_classes, 1.0);
  s.counted.assign(c.num_classes, false);
  double sum_iou = 0, sum_dice = 0;
  std::size_t n = 0;
  for (std::size_t k = 0; k < c.num_classes; ++k) {
    const double tp = static_cast<double>(c.tp[k]);
    const double wrong = static_cast<double>(c.fp[k] + c.fn[k]);
    if (tp + wrong == 0) continue;
    s.counted[k] = true;
    s.iou[k] = tp / (tp + wrong);
    s.dice[k] = 2 * tp / (2 * tp + wrong);
    if (k >= first_class) {
      sum_iou += s.iou[k];
      sum_dice += s.dice[k];
      ++n;
    }
  }
  if (n) {
    s.mean_iou = sum_iou / static_cast<double>(n);
    s.mean_dice = sum_dice / static_cast<double>(n);
  }
  return s;
}

template std::vector<int> argmax_classes<float>(const Tensor<float>&);
template std::vector<int> argmax_classes<double>(const Tensor<double>&);

}  // namespace segnetr::metrics
