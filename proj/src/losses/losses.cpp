#include "arvsr/losses/losses.hpp"

#include <cmath>
#include <numbers>

#include "arvsr/core/errors.hpp"

namespace arvsr {

nlohmann::json to_json(const LossWeights& w) {
  return {{"mse", w.mse}, {"dists", w.dists}, {"temp", w.temp}, {"dmd", w.dmd}};
}

LossWeights loss_weights_from_json(const nlohmann::json& j) {
  LossWeights w;
  try {
    w.mse = j.value("mse", w.mse);
    w.dists = j.value("dists", w.dists);
    w.temp = j.value("temp", w.temp);
    w.dmd = j.value("dmd", w.dmd);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("bad loss weights: ") + e.what());
  }
  if (w.mse < 0 || w.dists < 0 || w.temp < 0 || w.dmd < 0) throw ConfigError("loss weights must be non-negative");
  return w;
}

CropWindow sample_patch_window(int64_t h, int64_t w, int64_t h_c, int64_t w_c, int64_t halo, Rng& rng) {
  if (h_c < 1 || w_c < 1 || halo < 0) throw ShapeError("window extents must be positive");
  if (h_c + 2 * halo > h || w_c + 2 * halo > w) {
    throw ShapeError("window " + std::to_string(h_c) + "x" + std::to_string(w_c) + " with halo " + std::to_string(halo) +
                     " does not fit latent " + std::to_string(h) + "x" + std::to_string(w));
  }
  CropWindow win;
  win.i = rng.uniform_int(halo, h - halo - h_c);
  win.j = rng.uniform_int(halo, w - halo - w_c);
  win.h_c = h_c;
  win.w_c = w_c;
  win.halo = halo;
  return win;
}

// ---------------------------------------------------------------------------

ToyPerceptual::ToyPerceptual(uint64_t seed, int filters, int scales) {
  Rng rng(seed, 0x7065);
  for (int s = 0; s < scales; ++s) {
    bank_.push_back(Tensor::randn({filters, 3, 1, 3, 3}, rng, std::sqrt(2.0 / 27.0), DType::kF64));
  }
  std::vector<double> pool(3 * 3 * 4, 0.0);
  for (int c = 0; c < 3; ++c)
    for (int k = 0; k < 4; ++k) pool[(c * 3 + c) * 4 + k] = 0.25;
  pool_ = Tensor::from_data({3, 3, 1, 2, 2}, std::move(pool), DType::kF64);
}

namespace {

// Mean over the two spatial dimensions, keeping them as size 1.
Tensor spatial_mean(const Tensor& x) { return mean_dim(mean_dim(x, 4, true), 3, true); }

}  // namespace

Tensor ToyPerceptual::distance(const Tensor& a, const Tensor& b) const {
  if (a.shape() != b.shape()) throw ShapeError("perceptual distance shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  if (a.rank() != 5 || a.size(1) != 3) throw ShapeError("perceptual distance expects [B,3,T,H,W]");
  constexpr double c1 = 1e-6, c2 = 1e-6;
  Conv3dOptions same;
  same.pad_h = same.pad_w = 1;
  Conv3dOptions down;
  down.stride = {1, 2, 2};
  const DType dt = promote(a.dtype(), b.dtype());
  Tensor xa = a, xb = b;
  Tensor total;
  int used = 0;
  for (size_t s = 0; s < bank_.size(); ++s) {
    if (s > 0) {
      if (xa.size(3) % 2 != 0 || xa.size(4) % 2 != 0 || xa.size(3) < 4 || xa.size(4) < 4) break;
      Tensor pool = pool_.to(dt);
      xa = conv3d(xa, pool, Tensor(), down);
      xb = conv3d(xb, pool, Tensor(), down);
    }
    Tensor bank = bank_[s].to(dt);
    Tensor fa = concat({xa, silu(conv3d(xa, bank, Tensor(), same))}, 1);
    Tensor fb = concat({xb, silu(conv3d(xb, bank, Tensor(), same))}, 1);
    Tensor ma = spatial_mean(fa), mb = spatial_mean(fb);
    Tensor da = sub(fa, ma), db = sub(fb, mb);
    Tensor va = spatial_mean(square(da)), vb = spatial_mean(square(db)), cov = spatial_mean(mul(da, db));
    Tensor l = div(add_scalar(mul_scalar(mul(ma, mb), 2.0), c1), add_scalar(add(square(ma), square(mb)), c1));
    Tensor t = div(add_scalar(mul_scalar(cov, 2.0), c2), add_scalar(add(va, vb), c2));
    Tensor d = sub(Tensor::scalar(1.0, dt), mean(add(mul_scalar(l, 0.5), mul_scalar(t, 0.5))));
    total = total.defined() ? add(total, d) : d;
    ++used;
  }
  return mul_scalar(total, 1.0 / used);
}

const PerceptualDistance& default_perceptual() {
  static const ToyPerceptual instance;
  return instance;
}

Tensor perceptual_distance(const Tensor& a, const Tensor& b) { return default_perceptual().distance(a, b); }

Tensor fidelity_loss(const Tensor& sr, const Tensor& gt, const LossWeights& w, const PerceptualDistance& perc) {
  if (sr.shape() != gt.shape()) throw ShapeError("fidelity loss shape mismatch " + shape_str(sr.shape()) + " vs " + shape_str(gt.shape()));
  Tensor loss = mul_scalar(mse(sr, gt), w.mse);
  if (w.dists != 0.0) loss = add(loss, mul_scalar(perc.distance(sr, gt), w.dists));
  return loss;
}

Tensor temporal_loss(const Tensor& sr, const Tensor& gt, const LossWeights& w) {
  if (sr.shape() != gt.shape()) throw ShapeError("temporal loss shape mismatch");
  if (sr.rank() != 5 || sr.size(2) < 2) throw ShapeError("temporal loss needs at least two frames");
  const int64_t t = sr.size(2);
  Tensor dg = sub(slice(gt, 2, 1, t), slice(gt, 2, 0, t - 1));
  Tensor ds = sub(slice(sr, 2, 1, t), slice(sr, 2, 0, t - 1));
  const double per_frame = static_cast<double>(sr.numel() / t);
  return mul_scalar(sum(square(sub(dg, ds))), w.temp / per_frame);
}

// ---------------------------------------------------------------------------

ScoreNet::ScoreNet(ScoreNetConfig cfg, uint64_t seed) : cfg_(cfg) {
  Rng rng(seed, 0x7363);
  Conv3dOptions o;
  o.pad_t_front = o.pad_t_back = 1;
  o.pad_h = o.pad_w = 1;
  in_ = Conv3d::make(params_, "score.in", cfg_.latent_channels, cfg_.width, {3, 3, 3}, o, rng, 1.0, cfg_.dtype);
  mid_ = Conv3d::make(params_, "score.mid", cfg_.width, cfg_.width, {3, 3, 3}, o, rng, 1.0, cfg_.dtype);
  out_ = Conv3d::make(params_, "score.out", cfg_.width, cfg_.latent_channels, {3, 3, 3}, o, rng, 0.0, cfg_.dtype);
  film_ = Linear::make(params_, "score.film", cfg_.time_features, 2 * cfg_.width, rng, 0.1, true, cfg_.dtype);
}

Tensor ScoreNet::predict_x0(const Tensor& x_t, double t) const {
  if (x_t.rank() != 5 || x_t.size(1) != cfg_.latent_channels) throw ShapeError("score net input must be [1,C,F,h,w]");
  std::vector<double> feats(cfg_.time_features);
  for (int k = 0; k < cfg_.time_features / 2; ++k) {
    feats[2 * k] = std::sin(std::numbers::pi * (k + 1) * t);
    feats[2 * k + 1] = std::cos(std::numbers::pi * (k + 1) * t);
  }
  Tensor f = film_(Tensor::from_data({1, cfg_.time_features}, std::move(feats), cfg_.dtype));
  const int64_t w = cfg_.width;
  Tensor scale = reshape(slice(f, 1, 0, w), {1, w, 1, 1, 1});
  Tensor shift = reshape(slice(f, 1, w, 2 * w), {1, w, 1, 1, 1});
  Tensor h = silu(in_(x_t));
  h = add(add(h, mul(h, scale)), shift);
  h = silu(mid_(h));
  return add(x_t, out_(h));
}

Tensor ScoreNet::denoise_loss(const Tensor& x0, Rng& rng, double t_lo, double t_hi) const {
  const double t = rng.uniform(t_lo, t_hi);
  Tensor eps = Tensor::randn(x0.shape(), rng, 1.0, x0.dtype());
  Tensor x_t = add(mul_scalar(x0, 1.0 - t), mul_scalar(eps, t));
  return mse(predict_x0(x_t, t), x0);
}

void ScoreNet::save(const std::filesystem::path& dir) const {
  params_.save(dir, {{"kind", "score"}, {"latent_channels", cfg_.latent_channels}, {"width", cfg_.width}});
}

void ScoreNet::load(const std::filesystem::path& dir) { params_.load(dir); }

ScorePair::ScorePair(ScoreNetConfig cfg, uint64_t seed) : real(cfg, seed), fake(cfg, seed + 1) {}

void ScorePair::init_fake_from_real() {
  fake.params().copy_from(real.params());
  real.params().set_requires_grad(false);
}

Tensor dmd_direction(const Tensor& x, const Tensor& pred_real, const Tensor& pred_fake) {
  NoGradGuard guard;
  const Tensor xd = x.detach();
  const double norm = mean(abs(sub(xd, pred_real))).item();
  return mul_scalar(sub(pred_fake, pred_real), 1.0 / std::max(norm, 1e-12));
}

Tensor dmd_surrogate(const Tensor& x, const Tensor& g) {
  Tensor target;
  {
    NoGradGuard guard;
    target = sub(x.detach(), g.detach());
  }
  return mul_scalar(mean(square(sub(x, target))), 0.5);
}

DmdResult dmd_generator_gradient(std::span<const Tensor> chunks, const ScorePair& scores, Rng& rng) {
  if (chunks.size() != 3) throw ShapeError("distribution matching needs exactly three chunks, got " + std::to_string(chunks.size()));
  Tensor x = concat(chunks, 2);
  DmdResult r;
  r.t = rng.uniform(scores.t_lo, scores.t_hi);
  {
    NoGradGuard guard;
    Tensor xd = x.detach();
    Tensor eps = Tensor::randn(xd.shape(), rng, 1.0, xd.dtype());
    Tensor x_t = add(mul_scalar(xd, 1.0 - r.t), mul_scalar(eps, r.t));
    r.grad = dmd_direction(xd, scores.real.predict_x0(x_t, r.t), scores.fake.predict_x0(x_t, r.t));
  }
  r.loss = dmd_surrogate(x, r.grad);
  return r;
}

double update_fake_score(const Tensor& triplet, ScorePair& scores, AdamW& fake_opt, Rng& rng) {
  Tensor x = triplet.detach();
  fake_opt.zero_grad();
  Tensor loss = scores.fake.denoise_loss(x, rng, scores.t_lo, scores.t_hi);
  loss.backward();
  fake_opt.step();
  return loss.item();
}

double GaussianDmdToy::x0_given(double x_t, double t, double mu, double s) {
  const double var = (1.0 - t) * (1.0 - t) * s * s + t * t;
  return mu + (1.0 - t) * s * s / var * (x_t - (1.0 - t) * mu);
}

void GaussianDmdToy::step(Rng& rng, int batch, double lr) {
  Tensor th = Tensor::scalar(theta, DType::kF64).set_requires_grad();
  std::vector<double> z(batch), pr(batch), pf(batch);
  for (double& v : z) v = rng.normal();
  Tensor x = add(th, Tensor::from_data({batch}, z, DType::kF64) * sigma);
  for (int b = 0; b < batch; ++b) {
    const double t = rng.uniform(t_lo, t_hi);
    const double x_t = (1.0 - t) * x.data()[b] + t * rng.normal();
    pr[b] = x0_given(x_t, t, mu_data, sigma);
    pf[b] = x0_given(x_t, t, theta, sigma);
  }
  Tensor g = dmd_direction(x, Tensor::from_data({batch}, pr, DType::kF64), Tensor::from_data({batch}, pf, DType::kF64));
  // The surrogate averages over the batch; rescale so lr acts per sample.
  mul_scalar(dmd_surrogate(x, g), static_cast<double>(batch)).backward();
  theta -= lr * th.grad()[0] / static_cast<double>(batch);
}

}  // namespace arvsr
