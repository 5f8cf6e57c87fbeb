#include "arvsr/core/nn.hpp"

#include <cmath>

namespace arvsr {

Conv3d Conv3d::make(ParamStore& ps, const std::string& name, int64_t cin, int64_t cout, std::array<int64_t, 3> kernel,
                    Conv3dOptions opt, Rng& rng, double gain, DType dtype) {
  const double fan_in = static_cast<double>(cin * kernel[0] * kernel[1] * kernel[2]);
  Conv3d c;
  c.weight = ps.add(name + ".weight",
                    Tensor::randn({cout, cin, kernel[0], kernel[1], kernel[2]}, rng, gain * std::sqrt(2.0 / fan_in), dtype));
  c.bias = ps.add(name + ".bias", Tensor::zeros({cout}, dtype));
  c.opt = opt;
  return c;
}

Linear Linear::make(ParamStore& ps, const std::string& name, int64_t in, int64_t out, Rng& rng, double gain,
                    bool with_bias, DType dtype) {
  Linear l;
  l.weight = ps.add(name + ".weight", Tensor::randn({in, out}, rng, gain / std::sqrt(static_cast<double>(in)), dtype));
  if (with_bias) l.bias = ps.add(name + ".bias", Tensor::zeros({out}, dtype));
  return l;
}

}  // namespace arvsr
