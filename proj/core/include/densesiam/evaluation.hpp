#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "densesiam/dataset.hpp"
#include "densesiam/networks.hpp"

namespace dsiam {

struct ConfusionMatrix {
  std::size_t n_pred = 0, n_gt = 0;
  std::vector<std::int64_t> counts;  // row-major [n_pred, n_gt]

  ConfusionMatrix() = default;
  ConfusionMatrix(std::size_t pred_classes, std::size_t gt_classes)
      : n_pred(pred_classes), n_gt(gt_classes), counts(pred_classes * gt_classes, 0) {}
  std::int64_t& at(std::size_t p, std::size_t g) { return counts[p * n_gt + g]; }
  std::int64_t at(std::size_t p, std::size_t g) const { return counts[p * n_gt + g]; }
  std::int64_t total() const;
  ConfusionMatrix& operator+=(const ConfusionMatrix& other);
};

// cm[p, g] += #pixels predicted p with truth g. Throws on size or range errors.
void accumulate_confusion(std::span<const std::int64_t> pred, std::span<const std::int64_t> gt, ConfusionMatrix& cm);

/// Minimum-cost perfect assignment of an n x n row-major cost matrix;
/// result[row] = column. Among optimal assignments the lexicographically
/// smallest one is returned. Non-square input raises UsageError.
std::vector<std::size_t> hungarian_assign(std::span<const double> cost, std::size_t rows, std::size_t cols);
// Exhaustive search over permutations in lexicographic order (first strict minimum wins).
std::vector<std::size_t> brute_force_assign(std::span<const double> cost, std::size_t n);
double assignment_cost(std::span<const double> cost, std::size_t n, std::span<const std::size_t> assignment);

struct SegMetrics {
  std::vector<std::size_t> mapping;  // predicted label -> ground-truth class
  std::vector<double> iou;           // per ground-truth class
  std::vector<bool> scored;          // false where the union is empty (excluded from means)
  double miou = 0, miou_st = 0, miou_th = 0;
};

/// Relabels predictions through `mapping` and scores per-class IoU. Classes
/// with an empty union are excluded from every mean; a mean over no classes
/// is NaN.
SegMetrics compute_miou(const ConfusionMatrix& cm, std::span<const std::size_t> mapping,
                        std::span<const ClassKind> class_kinds);

// Pads to square, assigns with hungarian_assign on -counts, then scores.
SegMetrics evaluate(const ConfusionMatrix& cm, std::span<const ClassKind> class_kinds);

// Summary line "mIoU=<v> mIoU_St=<v> mIoU_Th=<v>" preceded by a per-class table.
std::string format_report(const SegMetrics& m, std::span<const ClassKind> class_kinds);
std::string format_csv(const SegMetrics& m, std::span<const ClassKind> class_kinds);

// Encoder + projector inference, bilinear upsampling to image size, argmax.
std::vector<std::vector<std::int64_t>> predict_labels(ModelF& model, std::span<const TensorF> images);

ConfusionMatrix confusion_for(std::span<const std::vector<std::int64_t>> preds, const Dataset& data,
                              std::size_t pred_classes);

// Mean mIoU of `runs` labelings drawn i.i.d. per pixel from the ground-truth class marginals.
double random_baseline_miou(const Dataset& data, int runs, std::uint64_t seed);

}  // namespace dsiam
