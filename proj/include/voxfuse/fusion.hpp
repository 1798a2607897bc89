#pragma once

// Context-aware fusion: a shared scoring network produces one raw score map
// per view, scores are normalized per voxel position by a softmax across
// views, and the fused volume is the per-voxel convex combination of the
// coarse volumes under those scores. An average-fusion baseline is provided
// through the identical reduction kernel so that uniform weighted fusion and
// average fusion agree exactly.

#include <vector>

#include "voxfuse/layers.hpp"
#include "voxfuse/ops.hpp"
#include "voxfuse/tensor.hpp"

namespace voxfuse {

// Raw per-voxel score map for one view's 9-channel context. The same
// parameters score every view.
template <Scalar T>
Tensor<T> context_score(const std::vector<LayerSpec>& scorer_specs,
                        ParamStore<T>& params, const Tensor<T>& context,
                        Mode mode) {
  if (context.rank() != 5 || context.extent(1) != 9) {
    throw ShapeError("context_score: context must be [n, 9, R, R, R], got " +
                     shape_str(context.shape()));
  }
  return forward_chain(scorer_specs, params, context, mode);
}

template <Scalar T>
void check_view_list(const std::vector<Tensor<T>>& xs, const char* op) {
  if (xs.empty()) throw ContractError(std::string(op) + ": empty view list");
  for (const auto& x : xs) {
    if (x.shape() != xs[0].shape()) {
      throw ShapeError(std::string(op) + ": view shape mismatch " +
                       shape_str(x.shape()) + " vs " + shape_str(xs[0].shape()));
    }
  }
}

// Per-position softmax over the view list (max-subtracted for stability).
// For a single view the result is exactly all-ones.
template <Scalar T>
std::vector<Tensor<T>> normalize_scores(const std::vector<Tensor<T>>& raw) {
  check_view_list(raw, "normalize_scores");
  auto normalized = softmax_axis0(concat_axis(raw, 0));
  return split_axis0(normalized);
}

// v_fused = sum_r scores[r] * coarse[r], accumulated in ascending view order.
template <Scalar T>
Tensor<T> fuse_weighted(const std::vector<Tensor<T>>& coarse,
                        const std::vector<Tensor<T>>& scores) {
  check_view_list(coarse, "fuse_weighted");
  check_view_list(scores, "fuse_weighted scores");
  if (coarse.size() != scores.size()) {
    throw ShapeError("fuse_weighted: " + std::to_string(coarse.size()) +
                     " volumes vs " + std::to_string(scores.size()) + " score maps");
  }
  if (coarse[0].shape() != scores[0].shape()) {
    throw ShapeError("fuse_weighted: volume/score shape mismatch");
  }
  return weighted_sum_axis0(concat_axis(coarse, 0), concat_axis(scores, 0));
}

// Average fusion baseline; identical to fuse_weighted under constant scores
// 1/n (bitwise, same kernel and reduction order).
template <Scalar T>
Tensor<T> fuse_average(const std::vector<Tensor<T>>& coarse) {
  check_view_list(coarse, "fuse_average");
  const int n = static_cast<int>(coarse.size());
  auto stacked = concat_axis(coarse, 0);
  auto uniform = Tensor<T>::full(stacked.shape(), T(1) / static_cast<T>(n));
  return weighted_sum_axis0(stacked, uniform);
}

}  // namespace voxfuse
