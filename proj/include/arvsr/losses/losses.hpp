#pragma once

#include <memory>
#include <span>

#include <json.hpp>

#include "arvsr/core/nn.hpp"
#include "arvsr/core/optim.hpp"
#include "arvsr/vae/vae.hpp"

namespace arvsr {

struct LossWeights {
  double mse = 1.0;
  double dists = 1.0;
  double temp = 1.0;
  double dmd = 1.0;
};

nlohmann::json to_json(const LossWeights& w);
LossWeights loss_weights_from_json(const nlohmann::json& j);

// Uniform over all interior positions: i in [halo, h - halo - h_c], same for j.
CropWindow sample_patch_window(int64_t h, int64_t w, int64_t h_c, int64_t w_c, int64_t halo, Rng& rng);

// Pluggable perceptual distance on [B, 3, T, H, W] clips.
class PerceptualDistance {
 public:
  virtual ~PerceptualDistance() = default;
  virtual Tensor distance(const Tensor& a, const Tensor& b) const = 0;
};

// Fixed random multi-scale convolution bank. Per channel and frame it compares
// means (structure) and normalized cross-covariances (texture), averaged over
// channels and scales: 1 - mean(0.5 * l + 0.5 * s).
class ToyPerceptual : public PerceptualDistance {
 public:
  explicit ToyPerceptual(uint64_t seed = 0x5e7, int filters = 6, int scales = 3);
  Tensor distance(const Tensor& a, const Tensor& b) const override;

 private:
  std::vector<Tensor> bank_;  // per scale: [filters, 3, 1, 3, 3]
  Tensor pool_;               // [3, 3, 1, 2, 2] per-channel 2x2 average
};

const PerceptualDistance& default_perceptual();

Tensor perceptual_distance(const Tensor& a, const Tensor& b);
// lambda_mse * MSE + lambda_dists * perceptual.
Tensor fidelity_loss(const Tensor& sr, const Tensor& gt, const LossWeights& w,
                     const PerceptualDistance& perc = default_perceptual());
// lambda_temp * sum_t mean_pixels(((gt[t+1] - gt[t]) - (sr[t+1] - sr[t]))^2).
Tensor temporal_loss(const Tensor& sr, const Tensor& gt, const LossWeights& w);

// Small 3-D convolutional x0-denoiser over latent clips [1, C, F, h, w], conditioned on t.
struct ScoreNetConfig {
  int latent_channels = 8;
  int width = 32;
  int time_features = 8;
  DType dtype = DType::kF32;
};

class ScoreNet {
 public:
  explicit ScoreNet(ScoreNetConfig cfg = {}, uint64_t seed = 0);
  // Predicted clean latent for x_t = (1 - t) x0 + t eps.
  Tensor predict_x0(const Tensor& x_t, double t) const;
  // Denoising regression loss against clean latents x0 at a sampled t.
  Tensor denoise_loss(const Tensor& x0, Rng& rng, double t_lo, double t_hi) const;

  const ScoreNetConfig& config() const { return cfg_; }
  ParamStore& params() { return params_; }
  const ParamStore& params() const { return params_; }
  void save(const std::filesystem::path& dir) const;
  void load(const std::filesystem::path& dir);

 private:
  ScoreNetConfig cfg_;
  ParamStore params_;
  Conv3d in_, mid_, out_;
  Linear film_;
};

// Real score frozen; fake score trained against the generator's outputs.
struct ScorePair {
  ScoreNet real;
  ScoreNet fake;
  double t_lo = 0.1;  // middle 80% of the schedule
  double t_hi = 0.9;

  ScorePair(ScoreNetConfig cfg, uint64_t seed);
  // Copies real into fake and freezes real.
  void init_fake_from_real();
};

struct DmdResult {
  Tensor loss;  // surrogate whose gradient w.r.t. the triplet is grad / numel
  Tensor grad;  // normalized score difference, detached
  double t = 0.0;
};

// Normalized score difference (pred_fake - pred_real) / mean|x - pred_real|.
Tensor dmd_direction(const Tensor& x, const Tensor& pred_real, const Tensor& pred_fake);
// 0.5 * mean((x - stopgrad(x - g))^2).
Tensor dmd_surrogate(const Tensor& x, const Tensor& g);

// chunks: exactly three adjacent generated chunk latents.
DmdResult dmd_generator_gradient(std::span<const Tensor> chunks, const ScorePair& scores, Rng& rng);
// One regression step of the fake score on detached generator output. Returns the loss value.
double update_fake_score(const Tensor& triplet, ScorePair& scores, AdamW& fake_opt, Rng& rng);

// 1-D Gaussian toy with closed-form x0 predictors: data N(mu_data, s^2),
// generator x = theta + s z. The fake predictor tracks the generator exactly.
struct GaussianDmdToy {
  double mu_data = 2.0;
  double sigma = 1.0;
  double theta = -1.0;
  double t_lo = 0.1, t_hi = 0.9;

  static double x0_given(double x_t, double t, double mu, double sigma);
  // One DMD update on a batch of `batch` generator samples with plain SGD at `lr`.
  void step(Rng& rng, int batch, double lr);
};

}  // namespace arvsr
