#pragma once

#include <functional>

#include "arvsr/core/tensor.hpp"

namespace arvsr {

// Max over coordinates of |analytic - central difference| / (|central difference| + 1e-8).
// `x` must be an f64 leaf; it is perturbed in place and restored.
double grad_check(const std::function<Tensor(const Tensor&)>& f, Tensor& x, double eps = 1e-4);

// Same, but only over `samples` coordinates chosen by a fixed stride.
double grad_check_sampled(const std::function<Tensor(const Tensor&)>& f, Tensor& x, int64_t samples,
                          double eps = 1e-4);

}  // namespace arvsr
