#pragma once

#include <string>

#include "arvsr/core/ops.hpp"
#include "arvsr/core/params.hpp"
#include "arvsr/core/rng.hpp"

namespace arvsr {

struct Conv3d {
  Tensor weight;  // [Cout, Cin, KT, KH, KW]
  Tensor bias;    // [Cout]
  Conv3dOptions opt;

  // He-normal init scaled by `gain`; gain 0 gives an all-zero kernel.
  static Conv3d make(ParamStore& ps, const std::string& name, int64_t cin, int64_t cout, std::array<int64_t, 3> kernel,
                     Conv3dOptions opt, Rng& rng, double gain = 1.0, DType dtype = DType::kF32);
  Tensor operator()(const Tensor& x) const { return conv3d(x, weight, bias, opt); }
};

struct Linear {
  Tensor weight;  // [in, out]
  Tensor bias;    // [out] or undefined

  static Linear make(ParamStore& ps, const std::string& name, int64_t in, int64_t out, Rng& rng, double gain = 1.0,
                     bool with_bias = true, DType dtype = DType::kF32);
  Tensor operator()(const Tensor& x) const { return linear(x, weight, bias); }
};

}  // namespace arvsr
