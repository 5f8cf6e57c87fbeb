#pragma once

#include <span>
#include <vector>

#include <json.hpp>

#include "arvsr/degrade/degrade.hpp"
#include "arvsr/pipeline/pipeline.hpp"

namespace arvsr {

struct EvalClip {
  Tensor hr, lr;
  MotionField motion;  // ground truth of hr
};

// Synthetic validation clips, cycling through the HR generators.
std::vector<EvalClip> make_eval_set(int count, int64_t frames, int64_t height, int64_t width,
                                    const DegradationConfig& degradation, const SynthOptions& synth, uint64_t seed);

struct ModeMetrics {
  InferMode mode = InferMode::kAr;
  double psnr = 0, ssim = 0;
  double bilinear_psnr = 0, bilinear_ssim = 0;
  double temporal_loss = 0, bilinear_temporal_loss = 0;
  double e_warp = 0;     // ground-truth flow
  double e_warp_bm = 0;  // block-matching flow
  double boundary_drift = 0;
  double profile_roughness = 0;
  int64_t clips = 0, chunks = 0, forwards = 0;

  nlohmann::json to_json() const;
};

ModeMetrics evaluate_clip(Generator gen, const EvalClip& clip, const StreamOptions& opt, Tensor* output = nullptr);

// Averages over clips. `outputs` / `per_clip`, when given, receive each clip's
// HR result and metrics.
ModeMetrics evaluate(Generator gen, std::span<const EvalClip> clips, const StreamOptions& opt,
                     std::vector<Tensor>* outputs = nullptr, std::vector<ModeMetrics>* per_clip = nullptr);

}  // namespace arvsr
