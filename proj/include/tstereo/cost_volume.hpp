#pragma once

#include "tstereo/nn_ops.hpp"

namespace tstereo {

/// Correlation cost volume at 1/4 resolution. d_levels = D_max / 4.
template <typename S>
Var<S> buildCorrelationVolume(const Var<S>& f_left, const Var<S>& f_right, Index d_levels) {
  return correlationVolume(f_left, f_right, d_levels);
}

/// Differentiable disparity readout: per pixel the expectation of d under
/// softmax(costs) over the disparity axis. costs (D,H,W) -> (H,W) in
/// quarter-resolution pixel units, bounded by [0, D-1].
template <typename S>
Var<S> softArgmin(const Var<S>& costs) {
  if (!costs.value().allFinite()) throw std::invalid_argument("softArgmin: non-finite costs");
  const Index d = costs.dim(0);
  std::vector<S> idx(static_cast<size_t>(d));
  for (Index k = 0; k < d; ++k) idx[static_cast<size_t>(k)] = static_cast<S>(k);
  return sumDim(scaleAlongDim(softmaxDim(costs, 0), 0, std::move(idx)), 0);
}

}  // namespace tstereo
