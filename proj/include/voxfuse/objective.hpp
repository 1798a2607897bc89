#pragma once

// Training loss and evaluation metric over voxel grids.
//
// bce_loss is the mean voxel-wise binary cross entropy with probabilities
// clamped to [1e-7, 1 - 1e-7] (negated so smaller is better). iou binarizes
// the prediction at a strict threshold and counts intersection over union;
// an empty union scores 1.0 (both sets empty means perfect agreement).

#include "voxfuse/ops.hpp"
#include "voxfuse/tensor.hpp"
#include "voxfuse/voxel.hpp"

namespace voxfuse {

template <Scalar T>
Tensor<T> bce_loss(const Tensor<T>& pred, const Tensor<T>& gt) {
  return bce_mean(pred, gt);
}

template <Scalar T>
Tensor<T> bce_loss(const Tensor<T>& pred, const BinaryGrid& gt) {
  auto gt_t = gt.template to_tensor<T>();
  if (gt_t.size() != pred.size()) {
    throw ShapeError("bce_loss: prediction size " + std::to_string(pred.size()) +
                     " vs grid " + std::to_string(gt_t.size()));
  }
  return bce_mean(pred, gt_t.aliased_view(pred.shape()));
}

// value > t -> occupied (strict inequality).
template <Scalar T>
BinaryGrid binarize(const Tensor<T>& pred, double threshold) {
  if (threshold <= 0.0 || threshold >= 1.0) {
    throw ContractError("binarize: threshold must lie in (0, 1)");
  }
  const auto& shape = pred.shape();
  const int res = shape.back();
  if (static_cast<std::int64_t>(res) * res * res != pred.size()) {
    throw ShapeError("binarize: prediction is not a cubic volume, shape " +
                     shape_str(shape));
  }
  BinaryGrid g(res);
  for (std::int64_t i = 0; i < pred.size(); ++i) {
    g.cells[static_cast<std::size_t>(i)] =
        pred.ptr()[i] > static_cast<T>(threshold) ? 1 : 0;
  }
  return g;
}

inline double iou(const BinaryGrid& a, const BinaryGrid& b) {
  if (a.res != b.res) {
    throw ShapeError("iou: resolution mismatch " + std::to_string(a.res) +
                     " vs " + std::to_string(b.res));
  }
  std::size_t inter = 0, uni = 0;
  for (std::size_t i = 0; i < a.cells.size(); ++i) {
    const bool pa = a.cells[i] != 0, pb = b.cells[i] != 0;
    inter += pa && pb;
    uni += pa || pb;
  }
  if (uni == 0) return 1.0;
  return static_cast<double>(inter) / static_cast<double>(uni);
}

template <Scalar T>
double iou(const Tensor<T>& pred, const BinaryGrid& gt, double threshold = 0.3) {
  return iou(binarize(pred, threshold), gt);
}

}  // namespace voxfuse
