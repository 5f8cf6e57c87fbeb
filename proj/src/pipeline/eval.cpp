#include "arvsr/pipeline/eval.hpp"

#include "arvsr/core/errors.hpp"
#include "arvsr/core/image.hpp"
#include "arvsr/losses/losses.hpp"
#include "arvsr/metrics/metrics.hpp"

namespace arvsr {

std::vector<EvalClip> make_eval_set(int count, int64_t frames, int64_t height, int64_t width,
                                    const DegradationConfig& degradation, const SynthOptions& synth, uint64_t seed) {
  std::vector<EvalClip> out;
  Rng root(seed, 0xe7a1);
  for (int i = 0; i < count; ++i) {
    const uint64_t s = root.fork(static_cast<uint64_t>(i)).next_u64();
    HrClip hr = synthesize_hr(dataset_kind(i), frames, height, width, s, synth);
    Tensor lr = degrade(hr.video, degradation, s ^ 0x9e3779b97f4a7c15ULL);
    out.push_back({hr.video, lr, hr.motion});
  }
  return out;
}

nlohmann::json ModeMetrics::to_json() const {
  return {{"mode", to_string(mode)},
          {"psnr", psnr},
          {"ssim", ssim},
          {"bilinear_psnr", bilinear_psnr},
          {"bilinear_ssim", bilinear_ssim},
          {"temporal_loss", temporal_loss},
          {"bilinear_temporal_loss", bilinear_temporal_loss},
          {"e_warp", e_warp},
          {"e_warp_bm", e_warp_bm},
          {"boundary_drift", boundary_drift},
          {"profile_roughness", profile_roughness},
          {"clips", clips},
          {"chunks", chunks},
          {"forwards", forwards}};
}

ModeMetrics evaluate_clip(Generator gen, const EvalClip& c, const StreamOptions& opt, Tensor* output) {
  ModeMetrics m;
  m.mode = opt.mode;
  LossWeights unit;
  RunReport rep;
  Tensor sr = run_mode(gen, c.lr, opt, &rep).to(DType::kF64);
  if (sr.shape() != c.hr.shape()) throw ShapeError("output " + shape_str(sr.shape()) + " does not match the HR clip");
  Tensor bil = clamp(resize_bilinear(c.lr, c.hr.size(3), c.hr.size(4)), 0.0, 1.0);
  m.psnr = psnr(sr, c.hr);
  m.ssim = ssim(sr, c.hr);
  m.bilinear_psnr = psnr(bil, c.hr);
  m.bilinear_ssim = ssim(bil, c.hr);
  m.temporal_loss = temporal_loss(sr, c.hr, unit).item();
  m.bilinear_temporal_loss = temporal_loss(bil, c.hr, unit).item();
  m.e_warp = warp_error(sr, c.motion);
  m.e_warp_bm = warp_error(sr);
  m.boundary_drift = boundary_drift(sr, chunk_seams(sr.size(2), gen.dit.config().chunk_len));
  m.profile_roughness = profile_roughness(temporal_profile(sr, sr.size(3) / 2));
  m.chunks = rep.chunks;
  m.forwards = rep.forwards;
  m.clips = 1;
  if (output) *output = sr;
  return m;
}

ModeMetrics evaluate(Generator gen, std::span<const EvalClip> clips, const StreamOptions& opt, std::vector<Tensor>* outputs,
                     std::vector<ModeMetrics>* per_clip) {
  if (clips.empty()) throw ConfigError("evaluation set is empty");
  ModeMetrics m;
  m.mode = opt.mode;
  for (const EvalClip& c : clips) {
    Tensor sr;
    const ModeMetrics one = evaluate_clip(gen, c, opt, outputs ? &sr : nullptr);
    m.psnr += one.psnr;
    m.ssim += one.ssim;
    m.bilinear_psnr += one.bilinear_psnr;
    m.bilinear_ssim += one.bilinear_ssim;
    m.temporal_loss += one.temporal_loss;
    m.bilinear_temporal_loss += one.bilinear_temporal_loss;
    m.e_warp += one.e_warp;
    m.e_warp_bm += one.e_warp_bm;
    m.boundary_drift += one.boundary_drift;
    m.profile_roughness += one.profile_roughness;
    m.chunks += one.chunks;
    m.forwards += one.forwards;
    ++m.clips;
    if (outputs) outputs->push_back(sr);
    if (per_clip) per_clip->push_back(one);
  }
  const double k = static_cast<double>(m.clips);
  for (double* v : {&m.psnr, &m.ssim, &m.bilinear_psnr, &m.bilinear_ssim, &m.temporal_loss, &m.bilinear_temporal_loss,
                    &m.e_warp, &m.e_warp_bm, &m.boundary_drift, &m.profile_roughness}) {
    *v /= k;
  }
  return m;
}

}  // namespace arvsr
