#pragma once

#include <array>
#include <filesystem>
#include <vector>

#include "arvsr/core/nn.hpp"

namespace arvsr {

// Videos are [B, 3, T, H, W] in [0, 1]; latents are [B, C, F, H/8, W/8].
// A clip "with head" has T = 4n + 1 frames and F = n + 1 latent frames. A
// continuation segment (streaming, after the first) has T = 4n and F = n.

struct CropWindow {
  int64_t i = 0, j = 0;      // latent-space top-left
  int64_t h_c = 0, w_c = 0;  // latent-space extents
  int64_t halo = 0;
};

namespace vae_arch {

struct SpatialLayer {
  enum Kind { kConv, kUpsample } kind;
  int size;  // kernel size or upsample factor
};

// Spatial layers of the decoder trunk, in order, from the latent grid to pixels.
// The parallel linear block path maps each latent cell to its own 8x8 block and
// does not widen the receptive field.
inline constexpr std::array<SpatialLayer, 7> kDecoderSpatial = {{
    {SpatialLayer::kUpsample, 2}, {SpatialLayer::kConv, 3},
    {SpatialLayer::kUpsample, 2}, {SpatialLayer::kConv, 3},
    {SpatialLayer::kUpsample, 2}, {SpatialLayer::kConv, 3},
    {SpatialLayer::kConv, 3},
}};

// Latent cells that a zero-padded crop border can contaminate.
constexpr int receptive_radius() {
  int contaminated = 0;  // in pixels of the current resolution
  int scale = 1;
  for (const auto& l : kDecoderSpatial) {
    if (l.kind == SpatialLayer::kUpsample) {
      contaminated *= l.size;
      scale *= l.size;
    } else {
      contaminated += l.size / 2;
    }
  }
  return (contaminated + scale - 1) / scale;
}

}  // namespace vae_arch

// Spatial halo (latent cells) needed for decode_local to match the full decode exactly.
inline constexpr int kDecoderRadius = vae_arch::receptive_radius();
inline constexpr int kSpatialFactor = 8;
inline constexpr int kTemporalFactor = 4;

struct VaeConfig {
  int latent_channels = 8;
  std::array<int, 3> enc_channels{16, 32, 64};
  std::array<int, 3> dec_channels{64, 32, 16};
  double kl_weight = 1e-6;
  DType dtype = DType::kF32;
};

int64_t latent_frames_for(int64_t pixel_frames, bool head = true);
int64_t pixel_frames_for(int64_t latent_frames, bool head = true);

class Vae {
 public:
  explicit Vae(VaeConfig cfg = {}, uint64_t seed = 0);

  struct Moments {
    Tensor mean, logvar;  // unnormalized
  };
  Moments encode_moments(const Tensor& video, bool head = true) const;
  // Normalized posterior mean. Latent frame f depends on pixel frames <= 4f only.
  Tensor encode(const Tensor& video, bool head = true) const;
  // Clamped to [0, 1].
  Tensor decode(const Tensor& latent, bool head = true) const;
  // Unclamped decoder output, used by training losses.
  Tensor decode_raw(const Tensor& latent, bool head = true) const;
  // Decodes only `window` (plus halo) and returns its pixel patch.
  Tensor decode_local(const Tensor& latent, const CropWindow& window, bool head = true, bool clamp_output = true) const;

  // Shape that encode() would produce, without running it.
  Shape latent_shape(const Shape& video, bool head = true) const;
  Shape video_shape(const Shape& latent, bool head = true) const;

  // Reconstruction MSE + kl_weight * KL with a reparameterized sample.
  Tensor training_loss(const Tensor& video, Rng& rng, double* recon_mse = nullptr) const;
  // Sets the latent normalization from the posterior means of `clips`.
  void fit_latent_stats(const std::vector<Tensor>& clips);

  ParamStore& params() { return params_; }
  const ParamStore& params() const { return params_; }
  const VaeConfig& config() const { return cfg_; }
  double latent_shift() const { return shift_; }
  double latent_scale() const { return scale_; }

  void save(const std::filesystem::path& dir) const;
  void load(const std::filesystem::path& dir);
  // Reads the architecture stored alongside a saved VAE.
  static VaeConfig config_from(const std::filesystem::path& dir);

 private:
  Tensor decoder_trunk(const Tensor& z, bool head) const;

  VaeConfig cfg_;
  ParamStore params_;
  std::array<Conv3d, 3> enc_down_;
  Conv3d enc_temporal_, enc_out_;
  Conv3d dec_in_, dec_expand_;
  std::array<Conv3d, 3> dec_up_;
  Conv3d dec_out_;
  Conv3d enc_linear_, dec_linear_;
  double shift_ = 0.0;
  double scale_ = 1.0;
};

Tensor crop_pix(const Tensor& video, const CropWindow& window);
Tensor crop_lat(const Tensor& latent, const CropWindow& window);
// Validates the window (and halo) against a latent of extent h x w.
void check_window(const CropWindow& window, int64_t h, int64_t w, bool require_halo_inside);

}  // namespace arvsr
