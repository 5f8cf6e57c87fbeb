#pragma once

#include <array>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "arvsr/core/rng.hpp"
#include "arvsr/core/tensor.hpp"

namespace arvsr {

// ---------------------------------------------------------------------------
// Synthetic HR sources

enum class HrKind { kMovingPatterns, kTextureScroll, kShapes };

HrKind parse_hr_kind(const std::string& s);
std::string to_string(HrKind k);

struct SynthOptions {
  // Velocities are drawn from [-max_speed, max_speed] px/frame; 0 gives a static clip.
  double max_speed = 1.0;
};

// Motion between consecutive frames: frame t+1 at pixel p shows the content of
// frame t at p - flow[t](p).
struct MotionField {
  Tensor flow;   // [T-1, 2, H, W], channel 0 = dy, 1 = dx
  Tensor valid;  // [T-1, H, W], 1 where the correspondence is exact and unoccluded
};

struct HrClip {
  Tensor video;  // [1, 3, T, H, W] in [0, 1], f64
  MotionField motion;
};

HrClip synthesize_hr(HrKind kind, int64_t frames, int64_t height, int64_t width, uint64_t seed,
                     const SynthOptions& opt = {});

// ---------------------------------------------------------------------------
// Degradation: blur -> x4 area downsample -> Gaussian noise -> block-DCT quantization.

inline constexpr int kDegradeFactor = 4;

struct DegradationConfig {
  std::array<double, 2> blur_sigma{0.5, 2.0};    // HR pixels
  std::array<double, 2> noise_sigma{0.02, 0.10};  // on [0, 1] intensities
  std::array<double, 2> quality{30.0, 90.0};     // 1..100; 100 disables quantization
};

nlohmann::json to_json(const DegradationConfig& c);
DegradationConfig degradation_config_from_json(const nlohmann::json& j);
// Every severity at zero: the pipeline reduces to the area downsample.
DegradationConfig identity_degradation();

struct DegradationParams {
  double blur_sigma = 0.0;
  double noise_sigma = 0.0;
  double quality = 100.0;
};

DegradationParams sample_degradation(const DegradationConfig& cfg, Rng& rng);
// hr: [1, 3, T, H, W]. Parameters are drawn once per clip from `seed`.
Tensor degrade(const Tensor& hr, const DegradationConfig& cfg, uint64_t seed, DegradationParams* used = nullptr);
Tensor degrade_with(const Tensor& hr, const DegradationParams& p, Rng& noise_rng);

// Pieces, exposed for tests.
Tensor gaussian_blur(const Tensor& video, double sigma);
// Quantizes 8x8 DCT blocks of each frame plane with a uniform table scaled by quality.
Tensor dct_quantize(const Tensor& video, double quality);
double quantizer_step(double quality);

// ---------------------------------------------------------------------------
// Dataset manifests

struct DatasetEntry {
  std::string hr_path;  // relative to the manifest directory
  std::string lr_path;
  DegradationConfig config;
  uint64_t seed = 0;
  std::string kind;
};

void write_dataset_manifest(const std::filesystem::path& path, const std::vector<DatasetEntry>& entries);
std::vector<DatasetEntry> read_dataset_manifest(const std::filesystem::path& path);

struct SynthDataRequest {
  int64_t count = 8;
  int64_t frames = 9, height = 64, width = 64;
  DegradationConfig degradation;
  uint64_t seed = 0;
  SynthOptions synth;
};

// Writes clip_XXXX_hr.rgb / clip_XXXX_lr.rgb pairs plus manifest.json into `dir`.
std::vector<DatasetEntry> synthesize_dataset(const std::filesystem::path& dir, const SynthDataRequest& req);

// Kind used for the i-th clip of a dataset (cycles through the kinds).
HrKind dataset_kind(int64_t index);

}  // namespace arvsr
