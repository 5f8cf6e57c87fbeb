#include <cmath>
#include <numbers>

#include "arvsr/core/errors.hpp"
#include "arvsr/degrade/degrade.hpp"

namespace arvsr {

namespace {

constexpr double kTwoPi = 2.0 * std::numbers::pi;

struct Wave {
  double k, cos_a, sin_a, phase;
  std::array<double, 3> amp;
};

Wave random_wave(Rng& rng, double min_period, double max_period, double max_amp) {
  const double period = rng.uniform(min_period, max_period);
  const double angle = rng.uniform(0.0, kTwoPi);
  Wave w{kTwoPi / period, std::cos(angle), std::sin(angle), rng.uniform(0.0, kTwoPi), {}};
  for (double& a : w.amp) a = rng.uniform(-max_amp, max_amp);
  return w;
}

// Sum of plane waves translated by (vy, vx) * t. Integer velocities make
// frame t+1 an exact shift of frame t.
void render_waves(std::vector<double>& out, int64_t T, int64_t H, int64_t W, const std::array<double, 3>& base,
                  const std::vector<Wave>& waves, double vy, double vx) {
  for (int64_t t = 0; t < T; ++t)
    for (int64_t y = 0; y < H; ++y)
      for (int64_t x = 0; x < W; ++x) {
        const double sx = static_cast<double>(x) - vx * static_cast<double>(t);
        const double sy = static_cast<double>(y) - vy * static_cast<double>(t);
        std::array<double, 3> v = base;
        for (const Wave& w : waves) {
          const double s = std::sin(w.k * (w.cos_a * sx + w.sin_a * sy) + w.phase);
          for (int c = 0; c < 3; ++c) v[c] += w.amp[c] * s;
        }
        for (int c = 0; c < 3; ++c) out[((c * T + t) * H + y) * W + x] = std::clamp(v[c], 0.0, 1.0);
      }
}

MotionField uniform_motion(int64_t T, int64_t H, int64_t W, double vy, double vx) {
  const int64_t n = std::max<int64_t>(T - 1, 0);
  std::vector<double> flow(n * 2 * H * W), valid(n * H * W, 1.0);
  for (int64_t t = 0; t < n; ++t) {
    std::fill_n(flow.begin() + (t * 2) * H * W, H * W, vy);
    std::fill_n(flow.begin() + (t * 2 + 1) * H * W, H * W, vx);
  }
  return {Tensor::from_data({n, 2, H, W}, std::move(flow), DType::kF64),
          Tensor::from_data({n, H, W}, std::move(valid), DType::kF64)};
}

struct Shape2 {
  double cx, cy, r, vx, vy, theta, omega;
  bool square;
  std::array<double, 3> color;

  double cx_at(double t) const { return cx + vx * t; }
  double cy_at(double t) const { return cy + vy * t; }
  // Signed distance to the boundary (negative inside) at frame t.
  double distance(double x, double y, double t) const {
    const double dx = x - cx_at(t), dy = y - cy_at(t);
    if (!square) return std::sqrt(dx * dx + dy * dy) - r;
    const double th = theta + omega * t;
    const double u = std::fabs(std::cos(th) * dx + std::sin(th) * dy);
    const double v = std::fabs(-std::sin(th) * dx + std::cos(th) * dy);
    return std::max(u, v) - r;
  }
};

constexpr double kEdgeSlope = 0.4;  // soft edges, roughly 10 px wide

double coverage(double d) { return 1.0 / (1.0 + std::exp(std::clamp(d * kEdgeSlope, -60.0, 60.0))); }

HrClip render_shapes(int64_t T, int64_t H, int64_t W, Rng& rng, double speed) {
  std::array<double, 3> c0{}, c1{};
  for (double& c : c0) c = rng.uniform();
  for (double& c : c1) c = rng.uniform();
  const double ga = rng.uniform(0.0, kTwoPi);
  std::vector<Shape2> shapes(static_cast<size_t>(rng.uniform_int(2, 4)));
  for (auto& s : shapes) {
    s.cx = rng.uniform(0.0, static_cast<double>(W));
    s.cy = rng.uniform(0.0, static_cast<double>(H));
    s.r = rng.uniform(4.0, std::max(5.0, static_cast<double>(std::min(H, W)) / 4.0));
    s.vx = rng.uniform(-speed, speed);
    s.vy = rng.uniform(-speed, speed);
    s.square = rng.uniform() < 0.5;
    s.theta = rng.uniform(0.0, std::numbers::pi);
    s.omega = rng.uniform(-0.05, 0.05) * speed;
    for (double& c : s.color) c = rng.uniform();
  }
  // Static linear gradient background, normalised over the frame.
  std::vector<double> g(H * W);
  double gmin = 1e300, gmax = -1e300;
  for (int64_t y = 0; y < H; ++y)
    for (int64_t x = 0; x < W; ++x) {
      const double v = std::cos(ga) * static_cast<double>(x) + std::sin(ga) * static_cast<double>(y);
      g[y * W + x] = v;
      gmin = std::min(gmin, v);
      gmax = std::max(gmax, v);
    }
  for (double& v : g) v = (v - gmin) / (gmax - gmin + 1e-9);

  std::vector<double> video(3 * T * H * W);
  // Index of the top-most shape with coverage > 1/2 (or -1), and whether any edge band is present.
  std::vector<int> owner(T * H * W, -1);
  std::vector<uint8_t> blended(T * H * W, 0);
  for (int64_t t = 0; t < T; ++t)
    for (int64_t y = 0; y < H; ++y)
      for (int64_t x = 0; x < W; ++x) {
        std::array<double, 3> v;
        for (int c = 0; c < 3; ++c) v[c] = c0[c] * (1.0 - g[y * W + x]) + c1[c] * g[y * W + x];
        const int64_t idx = (t * H + y) * W + x;
        for (size_t k = 0; k < shapes.size(); ++k) {
          const double a = coverage(shapes[k].distance(static_cast<double>(x), static_cast<double>(y), static_cast<double>(t)));
          for (int c = 0; c < 3; ++c) v[c] = v[c] * (1.0 - a) + shapes[k].color[c] * a;
          if (a > 0.5) owner[idx] = static_cast<int>(k);
          if (a > 0.02 && a < 0.98) blended[idx] = 1;
        }
        for (int c = 0; c < 3; ++c) video[((c * T + t) * H + y) * W + x] = v[c];
      }

  const int64_t n = std::max<int64_t>(T - 1, 0);
  std::vector<double> flow(n * 2 * H * W, 0.0), valid(n * H * W, 0.0);
  for (int64_t t = 0; t < n; ++t)
    for (int64_t y = 0; y < H; ++y)
      for (int64_t x = 0; x < W; ++x) {
        const int own = owner[((t + 1) * H + y) * W + x];
        double fy = 0.0, fx = 0.0;
        if (own >= 0) {
          const Shape2& s = shapes[own];
          // Rotate back about the shape centre, then undo the translation.
          const double dx = static_cast<double>(x) - s.cx_at(static_cast<double>(t + 1));
          const double dy = static_cast<double>(y) - s.cy_at(static_cast<double>(t + 1));
          const double c = std::cos(-s.omega), sn = std::sin(-s.omega);
          const double sx = s.cx_at(static_cast<double>(t)) + c * dx - sn * dy;
          const double sy = s.cy_at(static_cast<double>(t)) + sn * dx + c * dy;
          fx = static_cast<double>(x) - sx;
          fy = static_cast<double>(y) - sy;
        }
        flow[((t * 2) * H + y) * W + x] = fy;
        flow[((t * 2 + 1) * H + y) * W + x] = fx;
        const int64_t qy = std::lround(static_cast<double>(y) - fy), qx = std::lround(static_cast<double>(x) - fx);
        bool ok = !blended[((t + 1) * H + y) * W + x] && qy >= 0 && qy < H && qx >= 0 && qx < W;
        if (ok) ok = owner[(t * H + qy) * W + qx] == own && !blended[(t * H + qy) * W + qx];
        valid[(t * H + y) * W + x] = ok ? 1.0 : 0.0;
      }
  HrClip clip;
  clip.video = Tensor::from_data({1, 3, T, H, W}, std::move(video), DType::kF64);
  clip.motion = {Tensor::from_data({n, 2, H, W}, std::move(flow), DType::kF64),
                 Tensor::from_data({n, H, W}, std::move(valid), DType::kF64)};
  return clip;
}

}  // namespace

HrKind parse_hr_kind(const std::string& s) {
  if (s == "moving-patterns") return HrKind::kMovingPatterns;
  if (s == "texture-scroll") return HrKind::kTextureScroll;
  if (s == "shapes") return HrKind::kShapes;
  throw ConfigError("unknown clip kind '" + s + "' (moving-patterns, texture-scroll, shapes)");
}

std::string to_string(HrKind k) {
  switch (k) {
    case HrKind::kMovingPatterns: return "moving-patterns";
    case HrKind::kTextureScroll: return "texture-scroll";
    case HrKind::kShapes: return "shapes";
  }
  return "?";
}

HrClip synthesize_hr(HrKind kind, int64_t T, int64_t H, int64_t W, uint64_t seed, const SynthOptions& opt) {
  if (T < 1 || H < 1 || W < 1) throw ShapeError("synthesize_hr: empty clip shape");
  if (opt.max_speed < 0.0) throw ConfigError("max_speed must be non-negative");
  Rng rng(seed, 0x5917 + static_cast<uint64_t>(kind));
  const double s = opt.max_speed;
  if (kind == HrKind::kShapes) return render_shapes(T, H, W, rng, s);

  std::array<double, 3> base{};
  for (double& b : base) b = rng.uniform(0.3, 0.7);
  std::vector<Wave> waves;
  double vy = 0.0, vx = 0.0;
  if (kind == HrKind::kMovingPatterns) {
    for (int i = 0; i < 3; ++i) waves.push_back(random_wave(rng, 16.0, 48.0, 0.2));
    vy = rng.uniform(-s, s);
    vx = rng.uniform(-s, s);
  } else {
    for (int i = 0; i < 5; ++i) waves.push_back(random_wave(rng, 12.0, 40.0, 0.12));
    // Whole-pixel velocities so each frame is an exact shift of the previous one.
    const double step = std::max(1.0, std::round(s));
    if (s > 0.0) {
      vx = rng.uniform() < 0.5 ? -step : step;
      vy = static_cast<double>(rng.uniform_int(-1, 1)) * (s >= 1.0 ? step : 0.0);
    }
  }
  std::vector<double> video(3 * T * H * W);
  render_waves(video, T, H, W, base, waves, vy, vx);
  return {Tensor::from_data({1, 3, T, H, W}, std::move(video), DType::kF64), uniform_motion(T, H, W, vy, vx)};
}

}  // namespace arvsr
