#pragma once

#include "arvsr/core/tensor.hpp"

namespace arvsr {

// Resampling of the last two dimensions. These operate on values only and
// record no gradient history.

// Half-pixel-centred bilinear interpolation with edge clamping.
Tensor resize_bilinear(const Tensor& x, int64_t out_h, int64_t out_w);
// Mean over non-overlapping factor x factor blocks.
Tensor downsample_area(const Tensor& x, int factor);

}  // namespace arvsr
