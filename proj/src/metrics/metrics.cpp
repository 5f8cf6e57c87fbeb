#include "arvsr/metrics/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "arvsr/core/errors.hpp"

namespace arvsr {

namespace {

struct Dims {
  int64_t t, h, w;
};

Dims dims_of(const Tensor& v) {
  const Shape& s = v.shape();
  if (s.size() == 5 && s[0] == 1 && s[1] == 3) return {s[2], s[3], s[4]};
  if (s.size() == 4 && s[0] == 3) return {s[1], s[2], s[3]};
  throw ShapeError("expected a [1,3,T,H,W] or [3,T,H,W] video, got " + shape_str(s));
}

Dims same_dims(const Tensor& a, const Tensor& b) {
  const Dims da = dims_of(a), db = dims_of(b);
  if (da.t != db.t || da.h != db.h || da.w != db.w) {
    throw ShapeError("metric inputs differ in shape: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
  return da;
}

// Pointer to (c, t) plane.
const double* plane(const Tensor& v, const Dims& d, int64_t c, int64_t t) {
  return v.data().data() + (c * d.t + t) * d.h * d.w;
}

std::vector<double> gaussian_window(int size, double sigma) {
  std::vector<double> g(size);
  double s = 0.0;
  for (int i = 0; i < size; ++i) {
    const double x = i - (size - 1) / 2.0;
    s += g[i] = std::exp(-x * x / (2.0 * sigma * sigma));
  }
  for (double& v : g) v /= s;
  return g;
}

// Separable 'valid' filtering of an H x W plane.
std::vector<double> filter_valid(const std::vector<double>& img, int64_t h, int64_t w, const std::vector<double>& g) {
  const int64_t k = static_cast<int64_t>(g.size()), oh = h - k + 1, ow = w - k + 1;
  std::vector<double> tmp(h * ow), out(oh * ow);
  for (int64_t y = 0; y < h; ++y)
    for (int64_t x = 0; x < ow; ++x) {
      double s = 0.0;
      for (int64_t i = 0; i < k; ++i) s += g[i] * img[y * w + x + i];
      tmp[y * ow + x] = s;
    }
  for (int64_t y = 0; y < oh; ++y)
    for (int64_t x = 0; x < ow; ++x) {
      double s = 0.0;
      for (int64_t i = 0; i < k; ++i) s += g[i] * tmp[(y + i) * ow + x];
      out[y * ow + x] = s;
    }
  return out;
}

double block_cost(const double* a, const double* b, int64_t plane_stride, int64_t w, int64_t ay, int64_t ax, int64_t by,
                  int64_t bx, int64_t bh, int64_t bw) {
  double s = 0.0;
  for (int64_t c = 0; c < 3; ++c)
    for (int64_t y = 0; y < bh; ++y)
      for (int64_t x = 0; x < bw; ++x) {
        const double d = a[c * plane_stride + (ay + y) * w + ax + x] - b[c * plane_stride + (by + y) * w + bx + x];
        s += d * d;
      }
  return s;
}

// For each block of `target`, the displacement d with target(p) ~ source(p - d).
// Ties prefer the shortest vector, then the smaller dy, then dx.
std::vector<std::array<int, 2>> match_blocks(const double* target, const double* source, int64_t plane_stride, int64_t h,
                                             int64_t w, int block, int range) {
  const int64_t nby = (h + block - 1) / block, nbx = (w + block - 1) / block;
  std::vector<std::array<int, 2>> vec(nby * nbx);
  for (int64_t iy = 0; iy < nby; ++iy)
    for (int64_t ix = 0; ix < nbx; ++ix) {
      const int64_t by = iy * block, bx = ix * block;
      const int64_t bh = std::min<int64_t>(block, h - by), bw = std::min<int64_t>(block, w - bx);
      double best = std::numeric_limits<double>::infinity();
      std::array<int, 2> best_d{0, 0};
      for (int dy = -range; dy <= range; ++dy)
        for (int dx = -range; dx <= range; ++dx) {
          const int64_t sy = by - dy, sx = bx - dx;
          if (sy < 0 || sx < 0 || sy + bh > h || sx + bw > w) continue;
          const double cost = block_cost(target, source, plane_stride, w, by, bx, sy, sx, bh, bw);
          const auto key = [](int y, int x) { return std::array<int, 3>{std::abs(y) + std::abs(x), y, x}; };
          if (cost < best || (cost == best && key(dy, dx) < key(best_d[0], best_d[1]))) {
            best = cost;
            best_d = {dy, dx};
          }
        }
      vec[iy * nbx + ix] = best_d;
    }
  return vec;
}

}  // namespace

double psnr(const Tensor& a, const Tensor& b) {
  const Dims d = same_dims(a, b);
  if (d.t == 0) throw ShapeError("psnr of an empty video");
  double total = 0.0;
  for (int64_t t = 0; t < d.t; ++t) {
    double se = 0.0;
    for (int64_t c = 0; c < 3; ++c) {
      const double* pa = plane(a, d, c, t);
      const double* pb = plane(b, d, c, t);
      for (int64_t i = 0; i < d.h * d.w; ++i) se += (pa[i] - pb[i]) * (pa[i] - pb[i]);
    }
    const double mse = se / static_cast<double>(3 * d.h * d.w);
    total += mse <= 0.0 ? kPsnrCap : std::min(kPsnrCap, 10.0 * std::log10(1.0 / mse));
  }
  return total / static_cast<double>(d.t);
}

double ssim(const Tensor& a, const Tensor& b) {
  const Dims d = same_dims(a, b);
  constexpr int kWin = 11;
  if (d.h < kWin || d.w < kWin) throw ShapeError("ssim needs frames of at least 11x11");
  const auto g = gaussian_window(kWin, 1.5);
  const double c1 = 0.01 * 0.01, c2 = 0.03 * 0.03;
  const int64_t n = d.h * d.w;
  double total = 0.0;
  for (int64_t t = 0; t < d.t; ++t)
    for (int64_t c = 0; c < 3; ++c) {
      const double* pa = plane(a, d, c, t);
      const double* pb = plane(b, d, c, t);
      std::vector<double> x(pa, pa + n), y(pb, pb + n), xx(n), yy(n), xy(n);
      for (int64_t i = 0; i < n; ++i) {
        xx[i] = x[i] * x[i];
        yy[i] = y[i] * y[i];
        xy[i] = x[i] * y[i];
      }
      const auto mx = filter_valid(x, d.h, d.w, g), my = filter_valid(y, d.h, d.w, g);
      const auto sxx = filter_valid(xx, d.h, d.w, g), syy = filter_valid(yy, d.h, d.w, g), sxy = filter_valid(xy, d.h, d.w, g);
      double s = 0.0;
      for (size_t i = 0; i < mx.size(); ++i) {
        const double vx = sxx[i] - mx[i] * mx[i], vy = syy[i] - my[i] * my[i], cov = sxy[i] - mx[i] * my[i];
        s += ((2 * mx[i] * my[i] + c1) * (2 * cov + c2)) / ((mx[i] * mx[i] + my[i] * my[i] + c1) * (vx + vy + c2));
      }
      total += s / static_cast<double>(mx.size());
    }
  return total / static_cast<double>(3 * d.t);
}

MotionField block_matching_flow(const Tensor& video, int block, int range) {
  const Dims d = dims_of(video);
  if (d.t < 2) throw ShapeError("block matching needs at least 2 frames");
  if (block < 1 || range < 0) throw ShapeError("invalid block matching parameters");
  // Frames as [3, H, W] planes with stride H*W between channels.
  const int64_t T = d.t, H = d.h, W = d.w, n = T - 1;
  const int64_t nbx = (W + block - 1) / block;
  std::vector<double> frames(T * 3 * H * W);
  for (int64_t t = 0; t < T; ++t)
    for (int64_t c = 0; c < 3; ++c) std::copy_n(plane(video, d, c, t), H * W, frames.begin() + (t * 3 + c) * H * W);
  std::vector<double> flow(n * 2 * H * W), valid(n * H * W);
  for (int64_t t = 0; t < n; ++t) {
    const double* cur = frames.data() + t * 3 * H * W;
    const double* next = cur + 3 * H * W;
    const auto back = match_blocks(next, cur, H * W, H, W, block, range);  // next(p) ~ cur(p - d)
    const auto fwd = match_blocks(cur, next, H * W, H, W, block, range);   // cur(q) ~ next(q - e)
    for (int64_t y = 0; y < H; ++y)
      for (int64_t x = 0; x < W; ++x) {
        const auto& v = back[(y / block) * nbx + x / block];
        flow[((t * 2) * H + y) * W + x] = v[0];
        flow[((t * 2 + 1) * H + y) * W + x] = v[1];
        const int64_t qy = y - v[0], qx = x - v[1];
        bool ok = qy >= 0 && qy < H && qx >= 0 && qx < W;
        if (ok) {
          // A consistent forward vector points back: e = -d.
          const auto& e = fwd[(qy / block) * nbx + qx / block];
          ok = std::abs(e[0] + v[0]) <= 1 && std::abs(e[1] + v[1]) <= 1;
        }
        valid[(t * H + y) * W + x] = ok ? 1.0 : 0.0;
      }
  }
  return {Tensor::from_data({n, 2, H, W}, std::move(flow), DType::kF64),
          Tensor::from_data({n, H, W}, std::move(valid), DType::kF64)};
}

Tensor warp_frame(const Tensor& frame, const Tensor& flow, std::vector<double>* inside) {
  if (frame.rank() != 3 || frame.size(0) != 3) throw ShapeError("warp_frame expects a [3,H,W] frame");
  const int64_t H = frame.size(1), W = frame.size(2);
  if (flow.shape() != Shape{2, H, W}) throw ShapeError("warp_frame flow must be [2,H,W]");
  const auto f = frame.data();
  const auto fl = flow.data();
  std::vector<double> out(3 * H * W, 0.0);
  if (inside) inside->assign(H * W, 0.0);
  for (int64_t y = 0; y < H; ++y)
    for (int64_t x = 0; x < W; ++x) {
      const double sy = static_cast<double>(y) - fl[y * W + x];
      const double sx = static_cast<double>(x) - fl[H * W + y * W + x];
      if (sy < 0.0 || sx < 0.0 || sy > static_cast<double>(H - 1) || sx > static_cast<double>(W - 1)) continue;
      const int64_t y0 = static_cast<int64_t>(std::floor(sy)), x0 = static_cast<int64_t>(std::floor(sx));
      const int64_t y1 = std::min(y0 + 1, H - 1), x1 = std::min(x0 + 1, W - 1);
      const double wy = sy - static_cast<double>(y0), wx = sx - static_cast<double>(x0);
      for (int64_t c = 0; c < 3; ++c) {
        const double* p = f.data() + c * H * W;
        out[(c * H + y) * W + x] = (1 - wy) * ((1 - wx) * p[y0 * W + x0] + wx * p[y0 * W + x1]) +
                                   wy * ((1 - wx) * p[y1 * W + x0] + wx * p[y1 * W + x1]);
      }
      if (inside) (*inside)[y * W + x] = 1.0;
    }
  return Tensor::from_data({3, H, W}, std::move(out), DType::kF64);
}

double warp_error(const Tensor& video, const MotionField& motion) {
  const Dims d = dims_of(video);
  if (d.t < 2) throw ShapeError("warp_error needs at least 2 frames");
  const int64_t H = d.h, W = d.w, n = d.t - 1;
  if (motion.flow.shape() != Shape{n, 2, H, W} || motion.valid.shape() != Shape{n, H, W}) {
    throw ShapeError("motion field does not match the video");
  }
  double total = 0.0;
  int64_t pairs = 0;
  for (int64_t t = 0; t < n; ++t) {
    std::vector<double> cur(3 * H * W), fl(2 * H * W);
    for (int64_t c = 0; c < 3; ++c) std::copy_n(plane(video, d, c, t), H * W, cur.begin() + c * H * W);
    std::copy_n(motion.flow.data().begin() + t * 2 * H * W, 2 * H * W, fl.begin());
    std::vector<double> inside;
    const Tensor warped = warp_frame(Tensor::from_data({3, H, W}, std::move(cur), DType::kF64),
                                     Tensor::from_data({2, H, W}, std::move(fl), DType::kF64), &inside);
    const auto wv = warped.data();
    const double* valid = motion.valid.data().data() + t * H * W;
    double se = 0.0, count = 0.0;
    for (int64_t i = 0; i < H * W; ++i) {
      const double m = valid[i] * inside[i];
      if (m == 0.0) continue;
      for (int64_t c = 0; c < 3; ++c) {
        const double e = plane(video, d, c, t + 1)[i] - wv[c * H * W + i];
        se += m * e * e;
      }
      count += 3.0 * m;
    }
    if (count > 0.0) {
      total += se / count;
      ++pairs;
    }
  }
  return pairs == 0 ? 0.0 : 1000.0 * total / static_cast<double>(pairs);
}

double warp_error(const Tensor& video) { return warp_error(video, block_matching_flow(video)); }

std::vector<int64_t> chunk_seams(int64_t frames, int64_t chunk_latent) {
  if (chunk_latent < 1) throw ShapeError("chunk length must be positive");
  std::vector<int64_t> seams;
  for (int64_t s = 4 * chunk_latent - 3; s < frames; s += 4 * chunk_latent) seams.push_back(s);
  return seams;
}

double boundary_drift(const Tensor& video, std::span<const int64_t> seams) {
  const Dims d = dims_of(video);
  if (seams.empty()) return 0.0;
  double total = 0.0;
  for (int64_t s : seams) {
    if (s < 1 || s >= d.t) throw ShapeError("seam " + std::to_string(s) + " outside the video");
    double acc = 0.0;
    for (int64_t c = 0; c < 3; ++c) {
      const double* a = plane(video, d, c, s - 1);
      const double* b = plane(video, d, c, s);
      for (int64_t i = 0; i < d.h * d.w; ++i) acc += std::fabs(b[i] - a[i]);
    }
    total += acc / static_cast<double>(3 * d.h * d.w);
  }
  return total / static_cast<double>(seams.size());
}

Tensor temporal_profile(const Tensor& video, int64_t row) {
  const Dims d = dims_of(video);
  if (row < 0 || row >= d.h) throw ShapeError("profile row " + std::to_string(row) + " outside frame height " + std::to_string(d.h));
  std::vector<double> out(3 * d.t * d.w);
  for (int64_t c = 0; c < 3; ++c)
    for (int64_t t = 0; t < d.t; ++t) std::copy_n(plane(video, d, c, t) + row * d.w, d.w, out.begin() + (c * d.t + t) * d.w);
  return Tensor::from_data({3, d.t, d.w}, std::move(out), DType::kF64);
}

double profile_roughness(const Tensor& profile) {
  if (profile.rank() != 3 || profile.size(0) != 3) throw ShapeError("profile must be [3,T,W]");
  const int64_t T = profile.size(1), W = profile.size(2);
  if (T < 2) return 0.0;
  const auto p = profile.data();
  double s = 0.0;
  for (int64_t c = 0; c < 3; ++c)
    for (int64_t t = 1; t < T; ++t)
      for (int64_t x = 0; x < W; ++x) s += std::fabs(p[(c * T + t) * W + x] - p[(c * T + t - 1) * W + x]);
  return s / static_cast<double>(3 * (T - 1) * W);
}

}  // namespace arvsr
