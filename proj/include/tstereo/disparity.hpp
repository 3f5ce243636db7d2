#pragma once

#include "tstereo/tensor.hpp"

#include <optional>

namespace tstereo {

enum class DispScale { Quarter, Full };

/// Per-pixel horizontal displacement with an optional validity mask.
/// Pixel units refer to the map's own resolution.
template <typename S>
struct DisparityMap {
  Tensor<S> data;                       // (H, W)
  std::optional<Tensor<uint8_t>> valid;  // 1 = valid; absent = all valid
  DispScale scale = DispScale::Full;

  Index height() const { return data.dim(0); }
  Index width() const { return data.dim(1); }

  bool isValid(Index y, Index x) const { return !valid || valid->at(y, x) != 0; }

  Index validCount() const {
    if (!valid) return data.numel();
    Index n = 0;
    for (Index i = 0; i < valid->numel(); ++i) n += (*valid)[i] != 0;
    return n;
  }

  bool dense() const { return validCount() == data.numel(); }

  /// Mask as a {0,1} tensor in the map's scalar type.
  Tensor<S> maskTensor() const {
    Tensor<S> m = Tensor<S>::full(data.shape(), S(1));
    if (valid)
      for (Index i = 0; i < m.numel(); ++i) m[i] = (*valid)[i] ? S(1) : S(0);
    return m;
  }
};

}  // namespace tstereo
