#include "arvsr/core/image.hpp"

#include <algorithm>
#include <cmath>

#include "arvsr/core/errors.hpp"

namespace arvsr {

namespace {

struct Tap {
  int64_t i0, i1;
  double w1;
};

std::vector<Tap> taps(int64_t in, int64_t out) {
  std::vector<Tap> t(out);
  const double scale = static_cast<double>(in) / static_cast<double>(out);
  for (int64_t o = 0; o < out; ++o) {
    double src = (static_cast<double>(o) + 0.5) * scale - 0.5;
    src = std::clamp(src, 0.0, static_cast<double>(in - 1));
    const int64_t i0 = static_cast<int64_t>(std::floor(src));
    const int64_t i1 = std::min(i0 + 1, in - 1);
    t[o] = {i0, i1, src - static_cast<double>(i0)};
  }
  return t;
}

}  // namespace

Tensor resize_bilinear(const Tensor& x, int64_t out_h, int64_t out_w) {
  if (x.rank() < 2 || out_h < 1 || out_w < 1) throw ShapeError("resize_bilinear needs rank >= 2 and positive output size");
  const int64_t h = x.size(-2), w = x.size(-1);
  if (h < 1 || w < 1) throw ShapeError("resize_bilinear of an empty image");
  const int64_t planes = x.numel() / (h * w);
  const auto ty = taps(h, out_h), tx = taps(w, out_w);
  const auto src = x.data();
  std::vector<double> out(planes * out_h * out_w);
  std::vector<double> row(out_w);
  for (int64_t p = 0; p < planes; ++p) {
    const double* img = src.data() + p * h * w;
    for (int64_t oy = 0; oy < out_h; ++oy) {
      const Tap& a = ty[oy];
      for (int64_t ox = 0; ox < out_w; ++ox) {
        const Tap& b = tx[ox];
        const double top = img[a.i0 * w + b.i0] * (1.0 - b.w1) + img[a.i0 * w + b.i1] * b.w1;
        const double bot = img[a.i1 * w + b.i0] * (1.0 - b.w1) + img[a.i1 * w + b.i1] * b.w1;
        out[(p * out_h + oy) * out_w + ox] = top * (1.0 - a.w1) + bot * a.w1;
      }
    }
  }
  Shape shape = x.shape();
  shape[shape.size() - 2] = out_h;
  shape[shape.size() - 1] = out_w;
  return Tensor::from_data(std::move(shape), std::move(out), x.dtype());
}

Tensor downsample_area(const Tensor& x, int factor) {
  if (x.rank() < 2 || factor < 1) throw ShapeError("downsample_area needs rank >= 2 and factor >= 1");
  const int64_t h = x.size(-2), w = x.size(-1);
  if (h % factor != 0 || w % factor != 0) throw ShapeError("downsample_area: extent not divisible by factor");
  const int64_t oh = h / factor, ow = w / factor, planes = x.numel() / (h * w);
  const auto src = x.data();
  std::vector<double> out(planes * oh * ow, 0.0);
  const double inv = 1.0 / static_cast<double>(factor * factor);
  for (int64_t p = 0; p < planes; ++p)
    for (int64_t y = 0; y < h; ++y)
      for (int64_t xx = 0; xx < w; ++xx) out[(p * oh + y / factor) * ow + xx / factor] += src[(p * h + y) * w + xx];
  for (double& v : out) v *= inv;
  Shape shape = x.shape();
  shape[shape.size() - 2] = oh;
  shape[shape.size() - 1] = ow;
  return Tensor::from_data(std::move(shape), std::move(out), x.dtype());
}

}  // namespace arvsr
