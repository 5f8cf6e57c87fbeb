#pragma once

#include <span>
#include <vector>

#include "arvsr/core/tensor.hpp"
#include "arvsr/degrade/degrade.hpp"

namespace arvsr {

// Videos are [1, 3, T, H, W] or [3, T, H, W] with values in [0, 1].

inline constexpr double kPsnrCap = 99.0;

// Mean over frames of 10 log10(1 / MSE), each frame capped at 99 dB.
double psnr(const Tensor& a, const Tensor& b);
// Windowed SSIM (11x11 Gaussian, sigma 1.5, K1 0.01, K2 0.03, valid region),
// averaged over channels and frames.
double ssim(const Tensor& a, const Tensor& b);

// Exhaustive integer block matching between consecutive frames, in both
// directions; `valid` keeps pixels whose forward and backward vectors agree
// within one pixel.
MotionField block_matching_flow(const Tensor& video, int block = 8, int range = 4);

// Bilinear backward warp of frame [3, H, W] by flow [2, H, W]: out(p) = frame(p - flow(p)).
// inside[p] is 1 where the sample point lies within the frame.
Tensor warp_frame(const Tensor& frame, const Tensor& flow, std::vector<double>* inside = nullptr);

// Masked MSE between frame t+1 and frame t warped forward, averaged over frame
// pairs and reported in units of 1e-3.
double warp_error(const Tensor& video, const MotionField& motion);
double warp_error(const Tensor& video);  // block-matching flow

// Pixel frame indices at which a new chunk starts, for chunks of `chunk_latent`
// latent frames (first chunk 4N-3 pixel frames, then 4N).
std::vector<int64_t> chunk_seams(int64_t frames, int64_t chunk_latent);
// Mean absolute difference between the frames on either side of each seam.
double boundary_drift(const Tensor& video, std::span<const int64_t> seams);

// Row `row` of every frame stacked top to bottom: [3, T, W].
Tensor temporal_profile(const Tensor& video, int64_t row);
// Mean absolute difference between consecutive profile rows.
double profile_roughness(const Tensor& profile);

}  // namespace arvsr
