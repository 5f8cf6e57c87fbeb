#include "arvsr/vae/vae.hpp"

#include <cmath>
#include <fstream>

#include "arvsr/core/errors.hpp"

namespace arvsr {

namespace {

void check_video_shape(const Shape& v, bool head) {
  if (v.size() != 5 || v[1] != 3) throw ShapeError("video must be [B,3,T,H,W], got " + shape_str(v));
  const int64_t t = v[2];
  if (head ? (t < 1 || (t - 1) % kTemporalFactor != 0) : (t < 1 || t % kTemporalFactor != 0)) {
    throw ShapeError("frame count " + std::to_string(t) + (head ? " is not 4n+1" : " is not a multiple of 4"));
  }
  if (v[3] % kSpatialFactor != 0 || v[4] % kSpatialFactor != 0) {
    throw ShapeError("height and width must be multiples of 8, got " + shape_str(v));
  }
}

Conv3dOptions spatial(int stride) {
  Conv3dOptions o;
  o.stride = {1, stride, stride};
  o.pad_h = o.pad_w = 1;
  return o;
}

}  // namespace

int64_t latent_frames_for(int64_t pixel_frames, bool head) {
  return head ? (pixel_frames - 1) / kTemporalFactor + 1 : pixel_frames / kTemporalFactor;
}

int64_t pixel_frames_for(int64_t latent_frames, bool head) {
  return head ? kTemporalFactor * latent_frames - (kTemporalFactor - 1) : kTemporalFactor * latent_frames;
}

Vae::Vae(VaeConfig cfg, uint64_t seed) : cfg_(cfg) {
  Rng rng(seed, 0x7661);
  const DType dt = cfg_.dtype;
  const auto& e = cfg_.enc_channels;
  const auto& d = cfg_.dec_channels;
  const int c = cfg_.latent_channels;
  enc_down_[0] = Conv3d::make(params_, "enc.down0", 3, e[0], {1, 3, 3}, spatial(2), rng, 1.0, dt);
  enc_down_[1] = Conv3d::make(params_, "enc.down1", e[0], e[1], {1, 3, 3}, spatial(2), rng, 1.0, dt);
  enc_down_[2] = Conv3d::make(params_, "enc.down2", e[1], e[2], {1, 3, 3}, spatial(2), rng, 1.0, dt);
  Conv3dOptions temporal = spatial(1);
  temporal.stride[0] = kTemporalFactor;
  enc_temporal_ = Conv3d::make(params_, "enc.temporal", e[2], e[2], {kTemporalFactor, 3, 3}, temporal, rng, 1.0, dt);
  enc_out_ = Conv3d::make(params_, "enc.out", e[2], 2 * c, {1, 1, 1}, {}, rng, 0.5, dt);
  dec_in_ = Conv3d::make(params_, "dec.in", c, d[0], {1, 1, 1}, {}, rng, 1.0, dt);
  dec_expand_ = Conv3d::make(params_, "dec.expand", d[0], kTemporalFactor * d[0], {1, 1, 1}, {}, rng, 1.0, dt);
  dec_up_[0] = Conv3d::make(params_, "dec.up0", d[0], d[0], {1, 3, 3}, spatial(1), rng, 1.0, dt);
  dec_up_[1] = Conv3d::make(params_, "dec.up1", d[0], d[1], {1, 3, 3}, spatial(1), rng, 1.0, dt);
  dec_up_[2] = Conv3d::make(params_, "dec.up2", d[1], d[2], {1, 3, 3}, spatial(1), rng, 1.0, dt);
  dec_out_ = Conv3d::make(params_, "dec.out", d[2], 3, {1, 3, 3}, spatial(1), rng, 0.5, dt);
  assign_values(dec_out_.bias, std::vector<double>(3, 0.5));
  // Linear patch paths: one latent cell <-> one 4x8x8 pixel block.
  Conv3dOptions block;
  block.stride = {kTemporalFactor, kSpatialFactor, kSpatialFactor};
  enc_linear_ = Conv3d::make(params_, "enc.linear", 3, 2 * c, {kTemporalFactor, kSpatialFactor, kSpatialFactor}, block,
                             rng, 0.5, dt);
  dec_linear_ = Conv3d::make(params_, "dec.linear", c, kTemporalFactor * 3 * kSpatialFactor * kSpatialFactor, {1, 1, 1},
                             {}, rng, 0.5, dt);
}

Vae::Moments Vae::encode_moments(const Tensor& video, bool head) const {
  check_video_shape(video.shape(), head);
  Tensor h = video;
  for (const auto& conv : enc_down_) h = silu(conv(h));
  Conv3dOptions topt = enc_temporal_.opt;
  topt.pad_t_front = head ? kTemporalFactor - 1 : 0;
  h = silu(conv3d(h, enc_temporal_.weight, enc_temporal_.bias, topt));
  Conv3dOptions lopt = enc_linear_.opt;
  lopt.pad_t_front = topt.pad_t_front;
  Tensor out = add(enc_out_(h), conv3d(video, enc_linear_.weight, enc_linear_.bias, lopt));
  const int64_t c = cfg_.latent_channels;
  return {slice(out, 1, 0, c), clamp(slice(out, 1, c, 2 * c), -20.0, 10.0)};
}

Tensor Vae::encode(const Tensor& video, bool head) const {
  Tensor mu = encode_moments(video, head).mean;
  return mul_scalar(add_scalar(mu, -shift_), scale_);
}

Tensor Vae::decoder_trunk(const Tensor& z, bool head) const {
  if (z.rank() != 5 || z.size(1) != cfg_.latent_channels) {
    throw ShapeError("latent must be [B," + std::to_string(cfg_.latent_channels) + ",F,h,w], got " + shape_str(z.shape()));
  }
  const int64_t b = z.size(0), f = z.size(2), h = z.size(3), w = z.size(4);
  if (f < 1) throw ShapeError("latent has no frames");
  const int64_t d0 = cfg_.dec_channels[0];
  Tensor x = silu(dec_in_(z));
  x = dec_expand_(x);  // [B, 4*d0, F, h, w]
  x = reshape(x, {b, kTemporalFactor, d0, f, h, w});
  x = permute(x, {0, 2, 3, 1, 4, 5});
  x = reshape(x, {b, d0, kTemporalFactor * f, h, w});
  if (head) x = slice(x, 2, kTemporalFactor - 1, kTemporalFactor * f);
  x = silu(x);
  for (const auto& conv : dec_up_) x = silu(conv(upsample_nearest2d(x, 2)));

  // Linear path: channel (phase, rgb, dy, dx) -> pixel (4f + phase, 8y + dy, 8x + dx).
  const int64_t s = kSpatialFactor;
  Tensor lin = reshape(dec_linear_(z), {b, kTemporalFactor, 3, s, s, f, h, w});
  lin = permute(lin, {0, 2, 5, 1, 6, 3, 7, 4});
  lin = reshape(lin, {b, 3, kTemporalFactor * f, s * h, s * w});
  if (head) lin = slice(lin, 2, kTemporalFactor - 1, kTemporalFactor * f);
  return add(dec_out_(x), lin);
}

Tensor Vae::decode_raw(const Tensor& latent, bool head) const {
  return decoder_trunk(add_scalar(mul_scalar(latent, 1.0 / scale_), shift_), head);
}

Tensor Vae::decode(const Tensor& latent, bool head) const { return clamp(decode_raw(latent, head), 0.0, 1.0); }

void check_window(const CropWindow& win, int64_t h, int64_t w, bool require_halo_inside) {
  if (win.h_c < 1 || win.w_c < 1 || win.halo < 0) throw ShapeError("window extents must be positive");
  if (win.i < 0 || win.j < 0 || win.i + win.h_c > h || win.j + win.w_c > w) {
    throw ShapeError("window (" + std::to_string(win.i) + "," + std::to_string(win.j) + ") " + std::to_string(win.h_c) +
                     "x" + std::to_string(win.w_c) + " outside latent extent " + std::to_string(h) + "x" + std::to_string(w));
  }
  if (require_halo_inside &&
      (win.i < win.halo || win.j < win.halo || win.i + win.h_c + win.halo > h || win.j + win.w_c + win.halo > w)) {
    throw ShapeError("haloed window crosses the latent border");
  }
}

Tensor crop_lat(const Tensor& latent, const CropWindow& win) {
  check_window(win, latent.size(3), latent.size(4), false);
  return slice(slice(latent, 3, win.i, win.i + win.h_c), 4, win.j, win.j + win.w_c);
}

Tensor crop_pix(const Tensor& video, const CropWindow& win) {
  if (video.rank() != 5) throw ShapeError("crop_pix expects [B,3,T,H,W]");
  const int64_t s = kSpatialFactor;
  if (video.size(3) % s != 0 || video.size(4) % s != 0) throw ShapeError("video extent is not a multiple of 8");
  check_window(win, video.size(3) / s, video.size(4) / s, false);
  return slice(slice(video, 3, s * win.i, s * (win.i + win.h_c)), 4, s * win.j, s * (win.j + win.w_c));
}

Tensor Vae::decode_local(const Tensor& latent, const CropWindow& win, bool head, bool clamp_output) const {
  if (win.halo < kDecoderRadius) {
    throw ShapeError("halo " + std::to_string(win.halo) + " is smaller than the decoder radius " +
                     std::to_string(kDecoderRadius));
  }
  const int64_t h = latent.size(3), w = latent.size(4);
  check_window(win, h, w, false);
  // Haloed region, clamped to the latent extent.
  const int64_t r0 = std::max<int64_t>(0, win.i - win.halo), r1 = std::min(h, win.i + win.h_c + win.halo);
  const int64_t c0 = std::max<int64_t>(0, win.j - win.halo), c1 = std::min(w, win.j + win.w_c + win.halo);
  Tensor sub = slice(slice(latent, 3, r0, r1), 4, c0, c1);
  Tensor dec = decode_raw(sub, head);
  const int64_t s = kSpatialFactor;
  const int64_t oy = s * (win.i - r0), ox = s * (win.j - c0);
  Tensor patch = slice(slice(dec, 3, oy, oy + s * win.h_c), 4, ox, ox + s * win.w_c);
  return clamp_output ? clamp(patch, 0.0, 1.0) : patch;
}

Shape Vae::latent_shape(const Shape& v, bool head) const {
  check_video_shape(v, head);
  return {v[0], cfg_.latent_channels, latent_frames_for(v[2], head), v[3] / kSpatialFactor, v[4] / kSpatialFactor};
}

Shape Vae::video_shape(const Shape& z, bool head) const {
  if (z.size() != 5 || z[1] != cfg_.latent_channels || z[2] < 1) throw ShapeError("invalid latent shape " + shape_str(z));
  return {z[0], 3, pixel_frames_for(z[2], head), z[3] * kSpatialFactor, z[4] * kSpatialFactor};
}

Tensor Vae::training_loss(const Tensor& video, Rng& rng, double* recon_mse) const {
  Moments m = encode_moments(video, true);
  Tensor eps = Tensor::randn(m.mean.shape(), rng, 1.0, cfg_.dtype);
  Tensor z = add(m.mean, mul(exp(mul_scalar(m.logvar, 0.5)), eps));
  Tensor rec = mse(decoder_trunk(z, true), video);
  if (recon_mse) *recon_mse = rec.item();
  Tensor kl = mul_scalar(mean(sub(add(square(m.mean), exp(m.logvar)), add_scalar(m.logvar, 1.0))), 0.5);
  return add(rec, mul_scalar(kl, cfg_.kl_weight));
}

void Vae::fit_latent_stats(const std::vector<Tensor>& clips) {
  NoGradGuard guard;
  double s = 0.0, s2 = 0.0;
  int64_t n = 0;
  for (const auto& clip : clips) {
    Tensor mu = encode_moments(clip, true).mean;
    for (double v : mu.data()) {
      s += v;
      s2 += v * v;
      ++n;
    }
  }
  if (n == 0) throw DataError("fit_latent_stats: no clips");
  shift_ = s / static_cast<double>(n);
  const double var = std::max(1e-12, s2 / static_cast<double>(n) - shift_ * shift_);
  scale_ = 1.0 / std::sqrt(var);
}

void Vae::save(const std::filesystem::path& dir) const {
  nlohmann::json meta = {{"kind", "vae"},
                         {"latent_channels", cfg_.latent_channels},
                         {"enc_channels", cfg_.enc_channels},
                         {"dec_channels", cfg_.dec_channels},
                         {"kl_weight", cfg_.kl_weight},
                         {"latent_shift", shift_},
                         {"latent_scale", scale_}};
  params_.save(dir, meta);
}

void Vae::load(const std::filesystem::path& dir) {
  nlohmann::json meta = params_.load(dir);
  if (meta.value("latent_channels", -1) != cfg_.latent_channels) throw DataError("VAE checkpoint latent channel mismatch");
  shift_ = meta.value("latent_shift", 0.0);
  scale_ = meta.value("latent_scale", 1.0);
}

VaeConfig Vae::config_from(const std::filesystem::path& dir) {
  nlohmann::json meta;
  std::ifstream is(dir / "manifest.json");
  if (!is) throw DataError("missing manifest.json in " + dir.string());
  try {
    is >> meta;
    const auto& m = meta.at("meta");
    VaeConfig cfg;
    cfg.latent_channels = m.at("latent_channels").get<int>();
    cfg.enc_channels = m.at("enc_channels").get<std::array<int, 3>>();
    cfg.dec_channels = m.at("dec_channels").get<std::array<int, 3>>();
    cfg.kl_weight = m.value("kl_weight", 1e-6);
    return cfg;
  } catch (const nlohmann::json::exception& e) {
    throw DataError("malformed VAE manifest in " + dir.string() + ": " + e.what());
  }
}

}  // namespace arvsr
