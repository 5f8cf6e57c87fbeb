#include "arvsr/degrade/degrade.hpp"

#include <cmath>
#include <fstream>
#include <numbers>

#include "arvsr/core/errors.hpp"
#include "arvsr/core/image.hpp"
#include "arvsr/core/ops.hpp"
#include "arvsr/pipeline/video_io.hpp"

namespace arvsr {

namespace {

void check_range(const std::array<double, 2>& r, double lo, double hi, const char* name) {
  if (!(r[0] <= r[1]) || r[0] < lo || r[1] > hi) {
    throw ConfigError(std::string("degradation range ") + name + " must satisfy " + std::to_string(lo) +
                      " <= lo <= hi <= " + std::to_string(hi));
  }
}

void validate(const DegradationConfig& c) {
  check_range(c.blur_sigma, 0.0, 16.0, "blur_sigma");
  check_range(c.noise_sigma, 0.0, 1.0, "noise_sigma");
  check_range(c.quality, 1.0, 100.0, "quality");
}

std::array<double, 2> range_from(const nlohmann::json& j, const char* key, std::array<double, 2> fallback) {
  if (!j.contains(key)) return fallback;
  const auto& v = j.at(key);
  if (v.is_number()) return {v.get<double>(), v.get<double>()};
  if (!v.is_array() || v.size() != 2) throw ConfigError(std::string("degradation.") + key + " must be [lo, hi]");
  return {v[0].get<double>(), v[1].get<double>()};
}

// Orthonormal 8-point DCT-II basis.
const std::array<std::array<double, 8>, 8>& dct_basis() {
  static const auto basis = [] {
    std::array<std::array<double, 8>, 8> b{};
    for (int u = 0; u < 8; ++u)
      for (int x = 0; x < 8; ++x) {
        const double cu = u == 0 ? std::sqrt(1.0 / 8.0) : std::sqrt(2.0 / 8.0);
        b[u][x] = cu * std::cos((2.0 * x + 1.0) * u * std::numbers::pi / 16.0);
      }
    return b;
  }();
  return basis;
}

void quantize_block(std::array<double, 64>& blk, double step) {
  const auto& B = dct_basis();
  std::array<double, 64> tmp{}, coef{};
  for (int y = 0; y < 8; ++y)
    for (int u = 0; u < 8; ++u) {
      double s = 0.0;
      for (int x = 0; x < 8; ++x) s += B[u][x] * blk[y * 8 + x];
      tmp[y * 8 + u] = s;
    }
  for (int v = 0; v < 8; ++v)
    for (int u = 0; u < 8; ++u) {
      double s = 0.0;
      for (int y = 0; y < 8; ++y) s += B[v][y] * tmp[y * 8 + u];
      coef[v * 8 + u] = std::round(s / step) * step;
    }
  for (int y = 0; y < 8; ++y)
    for (int u = 0; u < 8; ++u) {
      double s = 0.0;
      for (int v = 0; v < 8; ++v) s += B[v][y] * coef[v * 8 + u];
      tmp[y * 8 + u] = s;
    }
  for (int y = 0; y < 8; ++y)
    for (int x = 0; x < 8; ++x) {
      double s = 0.0;
      for (int u = 0; u < 8; ++u) s += B[u][x] * tmp[y * 8 + u];
      blk[y * 8 + x] = s;
    }
}

}  // namespace

nlohmann::json to_json(const DegradationConfig& c) {
  return {{"blur_sigma", c.blur_sigma}, {"noise_sigma", c.noise_sigma}, {"quality", c.quality}, {"factor", kDegradeFactor}};
}

DegradationConfig degradation_config_from_json(const nlohmann::json& j) {
  DegradationConfig c;
  try {
    if (!j.is_object()) throw ConfigError("degradation config must be an object");
    if (j.contains("factor") && j.at("factor").get<int>() != kDegradeFactor) throw ConfigError("degradation factor must be 4");
    c.blur_sigma = range_from(j, "blur_sigma", c.blur_sigma);
    c.noise_sigma = range_from(j, "noise_sigma", c.noise_sigma);
    c.quality = range_from(j, "quality", c.quality);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("bad degradation config: ") + e.what());
  }
  validate(c);
  return c;
}

DegradationConfig identity_degradation() { return {{0.0, 0.0}, {0.0, 0.0}, {100.0, 100.0}}; }

DegradationParams sample_degradation(const DegradationConfig& cfg, Rng& rng) {
  validate(cfg);
  DegradationParams p;
  p.blur_sigma = rng.uniform(cfg.blur_sigma[0], cfg.blur_sigma[1]);
  p.noise_sigma = rng.uniform(cfg.noise_sigma[0], cfg.noise_sigma[1]);
  p.quality = rng.uniform(cfg.quality[0], cfg.quality[1]);
  return p;
}

Tensor gaussian_blur(const Tensor& video, double sigma) {
  if (sigma <= 0.0) return video.detach();
  if (video.rank() < 2) throw ShapeError("gaussian_blur needs at least 2 dimensions");
  const int64_t H = video.size(-2), W = video.size(-1), planes = video.numel() / (H * W);
  const int r = static_cast<int>(std::ceil(3.0 * sigma));
  std::vector<double> k(2 * r + 1);
  double ks = 0.0;
  for (int i = -r; i <= r; ++i) ks += k[i + r] = std::exp(-0.5 * i * i / (sigma * sigma));
  for (double& v : k) v /= ks;
  std::vector<double> a(video.data().begin(), video.data().end()), tmp(H * W);
  for (int64_t p = 0; p < planes; ++p) {
    double* img = a.data() + p * H * W;
    for (int64_t y = 0; y < H; ++y)
      for (int64_t x = 0; x < W; ++x) {
        double s = 0.0;
        for (int i = -r; i <= r; ++i) s += k[i + r] * img[y * W + std::clamp<int64_t>(x + i, 0, W - 1)];
        tmp[y * W + x] = s;
      }
    for (int64_t y = 0; y < H; ++y)
      for (int64_t x = 0; x < W; ++x) {
        double s = 0.0;
        for (int i = -r; i <= r; ++i) s += k[i + r] * tmp[std::clamp<int64_t>(y + i, 0, H - 1) * W + x];
        img[y * W + x] = s;
      }
  }
  return Tensor::from_data(video.shape(), std::move(a), video.dtype());
}

double quantizer_step(double quality) {
  if (quality < 1.0 || quality > 100.0) throw ConfigError("quality must lie in [1, 100]");
  // JPEG-style quality scaling of a flat table of 16 (on the 0..255 scale).
  const double scale = quality < 50.0 ? 5000.0 / quality : 200.0 - 2.0 * quality;
  return 16.0 / 255.0 * scale / 100.0;
}

Tensor dct_quantize(const Tensor& video, double quality) {
  const double step = quantizer_step(quality);
  if (step <= 0.0) return video.detach();
  const int64_t H = video.size(-2), W = video.size(-1), planes = video.numel() / (H * W);
  std::vector<double> a(video.data().begin(), video.data().end());
  std::array<double, 64> blk{};
  for (int64_t p = 0; p < planes; ++p) {
    double* img = a.data() + p * H * W;
    for (int64_t by = 0; by < H; by += 8)
      for (int64_t bx = 0; bx < W; bx += 8) {
        // Partial blocks at the border are completed by edge replication.
        for (int y = 0; y < 8; ++y)
          for (int x = 0; x < 8; ++x)
            blk[y * 8 + x] = img[std::min(by + y, H - 1) * W + std::min(bx + x, W - 1)];
        quantize_block(blk, step);
        for (int y = 0; y < 8 && by + y < H; ++y)
          for (int x = 0; x < 8 && bx + x < W; ++x) img[(by + y) * W + bx + x] = blk[y * 8 + x];
      }
  }
  return Tensor::from_data(video.shape(), std::move(a), video.dtype());
}

Tensor degrade_with(const Tensor& hr, const DegradationParams& p, Rng& noise_rng) {
  if (hr.rank() != 5 || hr.size(1) != 3) throw ShapeError("degrade expects [B,3,T,H,W], got " + shape_str(hr.shape()));
  if (hr.size(3) % kDegradeFactor != 0 || hr.size(4) % kDegradeFactor != 0) {
    throw ShapeError("HR extent " + shape_str(hr.shape()) + " is not divisible by 4");
  }
  Tensor x = downsample_area(gaussian_blur(hr, p.blur_sigma), kDegradeFactor);
  if (p.noise_sigma > 0.0) {
    std::vector<double> v(x.data().begin(), x.data().end());
    for (double& e : v) e += p.noise_sigma * noise_rng.normal();
    x = Tensor::from_data(x.shape(), std::move(v), x.dtype());
  }
  if (p.quality < 100.0) x = dct_quantize(x, p.quality);
  std::vector<double> v(x.data().begin(), x.data().end());
  for (double& e : v) e = std::clamp(e, 0.0, 1.0);
  return Tensor::from_data(x.shape(), std::move(v), hr.dtype());
}

Tensor degrade(const Tensor& hr, const DegradationConfig& cfg, uint64_t seed, DegradationParams* used) {
  Rng rng(seed, 0xde9);
  Rng param_rng = rng.fork(0), noise_rng = rng.fork(1);
  const DegradationParams p = sample_degradation(cfg, param_rng);
  if (used) *used = p;
  return degrade_with(hr, p, noise_rng);
}

// ---------------------------------------------------------------------------

void write_dataset_manifest(const std::filesystem::path& path, const std::vector<DatasetEntry>& entries) {
  nlohmann::json pairs = nlohmann::json::array();
  for (const auto& e : entries) {
    pairs.push_back({{"hr_path", e.hr_path}, {"lr_path", e.lr_path}, {"config", to_json(e.config)}, {"seed", e.seed},
                     {"kind", e.kind}});
  }
  nlohmann::json doc = {{"format", "arvsr-dataset-1"}, {"pairs", pairs}};
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream os(path);
  if (!os) throw DataError("cannot write " + path.string());
  os << doc.dump(2) << '\n';
}

std::vector<DatasetEntry> read_dataset_manifest(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw DataError("cannot read dataset manifest " + path.string());
  std::vector<DatasetEntry> out;
  try {
    nlohmann::json doc;
    is >> doc;
    for (const auto& p : doc.at("pairs")) {
      DatasetEntry e;
      e.hr_path = p.at("hr_path").get<std::string>();
      e.lr_path = p.at("lr_path").get<std::string>();
      e.config = degradation_config_from_json(p.at("config"));
      e.seed = p.at("seed").get<uint64_t>();
      e.kind = p.value("kind", "");
      out.push_back(std::move(e));
    }
  } catch (const nlohmann::json::exception& e) {
    throw DataError("malformed dataset manifest " + path.string() + ": " + e.what());
  } catch (const ConfigError& e) {
    throw DataError("dataset manifest " + path.string() + ": " + e.what());
  }
  return out;
}

HrKind dataset_kind(int64_t index) {
  static constexpr HrKind kinds[] = {HrKind::kShapes, HrKind::kMovingPatterns, HrKind::kShapes, HrKind::kTextureScroll};
  return kinds[index % 4];
}

std::vector<DatasetEntry> synthesize_dataset(const std::filesystem::path& dir, const SynthDataRequest& req) {
  if (req.count < 0) throw ConfigError("count must be non-negative");
  std::filesystem::create_directories(dir);
  const Rng root(req.seed, 0xda7a);
  std::vector<DatasetEntry> entries;
  for (int64_t i = 0; i < req.count; ++i) {
    Rng r = root.fork(static_cast<uint64_t>(i));
    DatasetEntry e;
    e.seed = r.next_u64();
    e.config = req.degradation;
    const HrKind kind = dataset_kind(i);
    e.kind = to_string(kind);
    char stem[32];
    std::snprintf(stem, sizeof stem, "clip_%04lld", static_cast<long long>(i));
    e.hr_path = std::string(stem) + "_hr.rgb";
    e.lr_path = std::string(stem) + "_lr.rgb";
    HrClip hr = synthesize_hr(kind, req.frames, req.height, req.width, e.seed, req.synth);
    write_raw_video(dir / e.hr_path, hr.video);
    write_raw_video(dir / e.lr_path, degrade(hr.video, e.config, e.seed ^ 0x9e3779b97f4a7c15ULL));
    entries.push_back(std::move(e));
  }
  write_dataset_manifest(dir / "manifest.json", entries);
  return entries;
}

}  // namespace arvsr
