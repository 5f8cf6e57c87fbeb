#include <doctest.h>

#include <cmath>

#include "arvsr/core/errors.hpp"
#include "arvsr/core/optim.hpp"
#include "arvsr/vae/vae.hpp"

using namespace arvsr;

namespace {

Tensor random_video(int64_t t, int64_t h, int64_t w, uint64_t seed) {
  Rng rng(seed);
  return Tensor::uniform({1, 3, t, h, w}, rng, 0.0, 1.0);
}

Tensor random_latent(const Vae& vae, int64_t f, int64_t h, int64_t w, uint64_t seed) {
  Rng rng(seed);
  return Tensor::randn({1, vae.config().latent_channels, f, h, w}, rng);
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  REQUIRE(a.shape() == b.shape());
  double m = 0.0;
  for (int64_t i = 0; i < a.numel(); ++i) m = std::max(m, std::fabs(a.data()[i] - b.data()[i]));
  return m;
}

// Smooth moving stripes; cheap training data for the convergence check.
Tensor stripes(int64_t t, int64_t h, int64_t w, Rng& rng) {
  std::vector<double> v(3 * t * h * w);
  const double fx = rng.uniform(0.05, 0.2), fy = rng.uniform(0.05, 0.2), vx = rng.uniform(-0.5, 0.5);
  for (int c = 0; c < 3; ++c) {
    const double phase = rng.uniform(0.0, 6.28);
    for (int64_t f = 0; f < t; ++f)
      for (int64_t y = 0; y < h; ++y)
        for (int64_t x = 0; x < w; ++x)
          v[((c * t + f) * h + y) * w + x] = 0.5 + 0.4 * std::sin(fx * (x - vx * f) * 6.28 + fy * y * 6.28 + phase);
  }
  return Tensor::from_data({1, 3, t, h, w}, std::move(v));
}

}  // namespace

TEST_CASE("decoder radius is derived from the layer list") {
  CHECK(kDecoderRadius == 1);
}

TEST_CASE("encode shape contract") {
  Vae vae;
  const int64_t c = vae.config().latent_channels;
  CHECK(vae.encode(random_video(9, 64, 64, 1)).shape() == Shape{1, c, 3, 8, 8});
  CHECK(vae.encode(random_video(1, 8, 8, 2)).shape() == Shape{1, c, 1, 1, 1});
  CHECK(vae.latent_shape({1, 3, 33, 720, 1280}) == Shape{1, c, 9, 90, 160});
  CHECK_THROWS_AS(vae.encode(random_video(8, 64, 64, 3)), ShapeError);
  CHECK_THROWS_AS(vae.encode(random_video(9, 60, 64, 3)), ShapeError);
}

TEST_CASE("decode shape contract and range") {
  Vae vae;
  Tensor z = random_latent(vae, 3, 8, 8, 4);
  Tensor v = vae.decode(z);
  CHECK(v.shape() == Shape{1, 3, 9, 64, 64});
  for (double x : v.data()) {
    CHECK(x >= 0.0);
    CHECK(x <= 1.0);
  }
  CHECK(vae.decode(random_latent(vae, 1, 1, 1, 5)).shape() == Shape{1, 3, 1, 8, 8});
  CHECK(vae.decode(random_latent(vae, 2, 1, 1, 5), false).shape() == Shape{1, 3, 8, 8, 8});
}

TEST_CASE("round trip preserves shape for several lengths") {
  Vae vae;
  for (int64_t n : {0, 1, 2, 4}) {
    Tensor v = random_video(4 * n + 1, 16, 24, 10 + n);
    CHECK(vae.decode(vae.encode(v)).shape() == v.shape());
  }
}

TEST_CASE("encoder is temporally causal") {
  Vae vae;
  Tensor v = random_video(13, 16, 16, 6);
  Tensor z = vae.encode(v);
  for (int64_t f = 0; f < 4; ++f) {
    std::vector<double> cut(v.data().begin(), v.data().end());
    for (int64_t c = 0; c < 3; ++c)
      for (int64_t t = 4 * f + 1; t < 13; ++t)
        for (int64_t k = 0; k < 256; ++k) cut[(c * 13 + t) * 256 + k] = 0.0;
    Tensor zc = vae.encode(Tensor::from_data(v.shape(), cut));
    CHECK(max_abs_diff(slice(z, 2, 0, f + 1), slice(zc, 2, 0, f + 1)) == 0.0);
  }
}

TEST_CASE("streaming encode and decode match the whole-clip result exactly") {
  Vae vae;
  Tensor v = random_video(17, 16, 16, 7);
  Tensor z = vae.encode(v);
  Tensor z_head = vae.encode(slice(v, 2, 0, 9));
  Tensor z_tail = vae.encode(slice(v, 2, 9, 17), false);
  CHECK(max_abs_diff(concat({z_head, z_tail}, 2), z) == 0.0);
  Tensor full = vae.decode(z);
  Tensor d_head = vae.decode(slice(z, 2, 0, 3));
  Tensor d_tail = vae.decode(slice(z, 2, 3, 5), false);
  CHECK(max_abs_diff(concat({d_head, d_tail}, 2), full) == 0.0);
}

TEST_CASE("crop_pix alignment and algebra") {
  Tensor v = random_video(1, 64, 64, 8);
  Tensor p = crop_pix(v, {2, 3, 4, 4, 0});
  CHECK(p.shape() == Shape{1, 3, 1, 32, 32});
  CHECK(p.data()[0] == v.data()[16 * 64 + 24]);
  CHECK(max_abs_diff(crop_pix(v, {0, 0, 8, 8, 0}), v) == 0.0);
  Tensor nested = crop_pix(crop_pix(v, {1, 2, 6, 5, 0}), {2, 1, 3, 2, 0});
  CHECK(max_abs_diff(nested, crop_pix(v, {3, 3, 3, 2, 0})) == 0.0);
  CHECK_THROWS_AS(crop_pix(v, {6, 0, 4, 4, 0}), ShapeError);
}

TEST_CASE("decode_local window maps to the aligned pixel region") {
  Vae vae;
  Tensor z = random_latent(vae, 2, 8, 8, 9);
  Tensor full = vae.decode(z);
  CropWindow win{2, 3, 4, 4, kDecoderRadius};
  Tensor local = vae.decode_local(z, win);
  CHECK(local.shape() == Shape{1, 3, 5, 32, 32});
  CHECK(max_abs_diff(local, slice(slice(full, 3, 16, 48), 4, 24, 56)) == 0.0);
}

TEST_CASE("full-extent window equals the full decode") {
  Vae vae;
  Tensor z = random_latent(vae, 2, 4, 6, 10);
  // halo 0 is below the radius; full extent needs no halo, so pass the radius (it clamps away).
  CHECK(max_abs_diff(vae.decode_local(z, {0, 0, 4, 6, kDecoderRadius}), vae.decode(z)) == 0.0);
  CHECK_THROWS_AS(vae.decode_local(z, {0, 0, 4, 6, 0}), ShapeError);
}

TEST_CASE("decode_local is exact on random interior windows") {
  Vae vae;
  Rng rng(12);
  for (int trial = 0; trial < 10; ++trial) {
    const int64_t h = rng.uniform_int(4, 9), w = rng.uniform_int(4, 9);
    Tensor z = random_latent(vae, 2, h, w, 100 + trial);
    Tensor full = vae.decode(z);
    for (int k = 0; k < 5; ++k) {
      const int64_t r = kDecoderRadius;
      const int64_t hc = rng.uniform_int(1, h - 2 * r), wc = rng.uniform_int(1, w - 2 * r);
      const int64_t i = rng.uniform_int(r, h - r - hc), j = rng.uniform_int(r, w - r - wc);
      CropWindow win{i, j, hc, wc, r};
      CHECK(max_abs_diff(vae.decode_local(z, win), crop_pix(full, win)) == 0.0);
    }
  }
}

TEST_CASE("radius is tight: a latent perturbation reaches exactly r cells") {
  Vae vae;
  Tensor z = random_latent(vae, 1, 7, 7, 13);
  Tensor base = vae.decode_raw(z);
  std::vector<double> pz(z.data().begin(), z.data().end());
  const int64_t hw = 49;
  for (int64_t c = 0; c < vae.config().latent_channels; ++c) pz[c * hw + 3 * 7 + 3] += 1.0;
  Tensor moved = vae.decode_raw(Tensor::from_data(z.shape(), pz));
  int64_t reach = 0;
  for (int64_t y = 0; y < 56; ++y)
    for (int64_t x = 0; x < 56; ++x) {
      bool changed = false;
      for (int64_t c = 0; c < 3; ++c) changed |= base.data()[(c * 56 + y) * 56 + x] != moved.data()[(c * 56 + y) * 56 + x];
      if (changed) reach = std::max({reach, std::abs(y / 8 - 3), std::abs(x / 8 - 3)});
    }
  CHECK(reach == kDecoderRadius);
}

TEST_CASE("reconstruction loss decreases over the first 200 steps") {
  VaeConfig cfg;
  cfg.enc_channels = {8, 16, 16};
  cfg.dec_channels = {16, 16, 8};
  Vae vae(cfg, 3);
  AdamW opt(vae.params(), {2e-3, 0.9, 0.999, 1e-8, 0.0});
  Rng data(14);
  std::vector<double> block_means;
  double acc = 0.0;
  for (int step = 0; step < 200; ++step) {
    Tensor clip = stripes(5, 16, 16, data);
    Rng noise = Rng(15).fork(step);
    double rec = 0.0;
    opt.zero_grad();
    vae.training_loss(clip, noise, &rec).backward();
    opt.step();
    CHECK(std::isfinite(rec));
    acc += rec;
    if (step % 50 == 49) {
      block_means.push_back(acc / 50.0);
      acc = 0.0;
    }
  }
  for (size_t k = 1; k < block_means.size(); ++k) {
    INFO("block " << k << ": " << block_means[k - 1] << " -> " << block_means[k]);
    CHECK(block_means[k] < block_means[k - 1]);
  }
}

TEST_CASE("save and load round trip") {
  Vae a(VaeConfig{}, 1), b(VaeConfig{}, 2);
  Tensor clip = random_video(5, 16, 16, 16);
  a.fit_latent_stats({clip});
  const auto dir = std::filesystem::temp_directory_path() / "arvsr_vae_roundtrip";
  a.save(dir);
  CHECK(Vae::config_from(dir).latent_channels == a.config().latent_channels);
  b.load(dir);
  CHECK(max_abs_diff(a.encode(clip), b.encode(clip)) == 0.0);
  std::filesystem::remove_all(dir);
}
