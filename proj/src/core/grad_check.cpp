#include "arvsr/core/grad_check.hpp"

#include <algorithm>
#include <cmath>

#include "arvsr/core/errors.hpp"

namespace arvsr {

namespace {

double eval(const std::function<Tensor(const Tensor&)>& f, const Tensor& x) {
  NoGradGuard guard;
  const double v = f(x).item();
  if (!std::isfinite(v)) throw NumericalError("grad_check: non-finite function value");
  return v;
}

}  // namespace

double grad_check_sampled(const std::function<Tensor(const Tensor&)>& f, Tensor& x, int64_t samples, double eps) {
  if (x.dtype() != DType::kF64) throw Error("grad_check requires a 64-bit tensor");
  x.zero_grad();
  x.set_requires_grad(true);
  f(x).backward();
  const std::vector<double> analytic = x.has_grad() ? std::vector<double>(x.grad().begin(), x.grad().end())
                                                    : std::vector<double>(x.numel(), 0.0);
  x.zero_grad();

  const int64_t n = x.numel();
  const int64_t stride = samples >= n ? 1 : std::max<int64_t>(1, n / samples);
  auto data = x.mutable_data();
  double worst = 0.0;
  for (int64_t i = 0; i < n; i += stride) {
    const double saved = data[i];
    data[i] = saved + eps;
    const double fp = eval(f, x);
    data[i] = saved - eps;
    const double fm = eval(f, x);
    data[i] = saved;
    const double numeric = (fp - fm) / (2.0 * eps);
    worst = std::max(worst, std::fabs(analytic[i] - numeric) / (std::fabs(numeric) + 1e-8));
  }
  return worst;
}

double grad_check(const std::function<Tensor(const Tensor&)>& f, Tensor& x, double eps) {
  return grad_check_sampled(f, x, x.numel(), eps);
}

}  // namespace arvsr
