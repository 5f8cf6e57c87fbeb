#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "arvsr/core/errors.hpp"
#include "arvsr/core/ops.hpp"
#include "arvsr/core/image.hpp"
#include "arvsr/degrade/degrade.hpp"
#include "arvsr/pipeline/video_io.hpp"

using namespace arvsr;

namespace {

std::filesystem::path scratch(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("arvsr_test_degrade_" + name);
  std::filesystem::remove_all(p);
  return p;
}

bool same(const Tensor& a, const Tensor& b) {
  return a.shape() == b.shape() && std::equal(a.data().begin(), a.data().end(), b.data().begin());
}

}  // namespace

TEST_CASE("static clips repeat the first frame") {
  for (HrKind k : {HrKind::kMovingPatterns, HrKind::kTextureScroll, HrKind::kShapes}) {
    HrClip c = synthesize_hr(k, 5, 16, 24, 3, SynthOptions{0.0});
    const auto v = c.video.data();
    const int64_t hw = 16 * 24;
    for (int64_t ch = 0; ch < 3; ++ch)
      for (int64_t t = 1; t < 5; ++t)
        for (int64_t i = 0; i < hw; ++i) REQUIRE(v[(ch * 5 + t) * hw + i] == v[(ch * 5) * hw + i]);
    for (double f : c.motion.flow.data()) CHECK(f == 0.0);
  }
}

TEST_CASE("synthesis is deterministic per seed and kind") {
  for (HrKind k : {HrKind::kMovingPatterns, HrKind::kTextureScroll, HrKind::kShapes}) {
    CHECK(same(synthesize_hr(k, 9, 32, 32, 7).video, synthesize_hr(k, 9, 32, 32, 7).video));
    CHECK_FALSE(same(synthesize_hr(k, 9, 32, 32, 7).video, synthesize_hr(k, 9, 32, 32, 8).video));
  }
  CHECK(parse_hr_kind(to_string(HrKind::kTextureScroll)) == HrKind::kTextureScroll);
  CHECK_THROWS_AS(parse_hr_kind("noise"), ConfigError);
}

TEST_CASE("texture scroll shifts by whole pixels each frame") {
  for (uint64_t seed = 0; seed < 6; ++seed) {
    HrClip c = synthesize_hr(HrKind::kTextureScroll, 4, 20, 20, seed, SynthOptions{1.0});
    const auto fl = c.motion.flow.data();
    const int64_t dy = std::lround(fl[0]), dx = std::lround(fl[400]);
    CHECK(std::abs(dx) == 1);
    const auto v = c.video.data();
    for (int64_t ch = 0; ch < 3; ++ch)
      for (int64_t t = 0; t + 1 < 4; ++t)
        for (int64_t y = 1; y < 19; ++y)
          for (int64_t x = 1; x < 19; ++x)
            REQUIRE(v[((ch * 4 + t + 1) * 20 + y) * 20 + x] == v[((ch * 4 + t) * 20 + y - dy) * 20 + x - dx]);
  }
}

TEST_CASE("shapes move and report flow on their pixels") {
  HrClip c = synthesize_hr(HrKind::kShapes, 5, 32, 32, 11);
  double moving = 0.0, valid = 0.0;
  for (double f : c.motion.flow.data()) moving += std::fabs(f);
  for (double v : c.motion.valid.data()) valid += v;
  CHECK(moving > 0.0);
  // Soft edges are excluded, so only a fraction of a small frame is valid.
  CHECK(valid > 0.05 * 4 * 32 * 32);
  for (double v : c.video.data()) REQUIRE((v >= 0.0 && v <= 1.0));
}

TEST_CASE("identity degradation is the exact area downsample") {
  HrClip c = synthesize_hr(HrKind::kShapes, 5, 64, 64, 1);
  Tensor lr = degrade(c.video, identity_degradation(), 4);
  CHECK(lr.shape() == Shape{1, 3, 5, 16, 16});
  CHECK(same(lr, downsample_area(c.video, 4)));
}

TEST_CASE("degradation factor arithmetic and divisibility") {
  Tensor hr = Tensor::full({1, 3, 1, 64, 64}, 0.5, DType::kF64);
  CHECK(degrade(hr, DegradationConfig{}, 1).shape() == Shape{1, 3, 1, 16, 16});
  CHECK_THROWS_AS(degrade(Tensor::full({1, 3, 1, 64, 62}, 0.5, DType::kF64), DegradationConfig{}, 1), ShapeError);
}

TEST_CASE("noise-only degradation has the configured standard deviation") {
  Tensor hr = Tensor::full({1, 3, 9, 128, 128}, 0.5, DType::kF64);
  DegradationConfig cfg = identity_degradation();
  cfg.noise_sigma = {0.05, 0.05};
  Tensor lr = degrade(hr, cfg, 5);
  double s = 0.0, s2 = 0.0;
  for (double v : lr.data()) {
    s += v - 0.5;
    s2 += (v - 0.5) * (v - 0.5);
  }
  const double n = static_cast<double>(lr.numel());
  const double sd = std::sqrt(s2 / n - (s / n) * (s / n));
  CHECK(sd >= 0.045);
  CHECK(sd <= 0.055);
}

TEST_CASE("degradation is deterministic and per-clip") {
  HrClip c = synthesize_hr(HrKind::kMovingPatterns, 9, 32, 32, 2);
  DegradationParams p1, p2;
  CHECK(same(degrade(c.video, DegradationConfig{}, 9, &p1), degrade(c.video, DegradationConfig{}, 9, &p2)));
  CHECK(p1.noise_sigma == p2.noise_sigma);
  CHECK_FALSE(same(degrade(c.video, DegradationConfig{}, 9), degrade(c.video, DegradationConfig{}, 10)));
}

TEST_CASE("blur keeps constants and spreads an impulse symmetrically") {
  Tensor c = Tensor::full({1, 1, 9, 9}, 0.25, DType::kF64);
  const Tensor cb = gaussian_blur(c, 1.3);
  for (double v : cb.data()) CHECK(v == doctest::Approx(0.25).epsilon(1e-12));
  std::vector<double> imp(81, 0.0);
  imp[40] = 1.0;
  Tensor b = gaussian_blur(Tensor::from_data({9, 9}, imp, DType::kF64), 1.0);
  const auto v = b.data();
  double total = 0.0;
  for (double x : v) total += x;
  CHECK(total == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(v[39] == doctest::Approx(v[41]).epsilon(1e-15));
  CHECK(v[31] == doctest::Approx(v[49]).epsilon(1e-15));
  CHECK(v[40] > v[39]);
}

TEST_CASE("block DCT quantization") {
  // Constant blocks survive any quality whose DC step divides them exactly.
  CHECK(quantizer_step(100.0) == 0.0);
  CHECK(quantizer_step(50.0) == doctest::Approx(16.0 / 255.0));
  Rng rng(3);
  Tensor x = Tensor::uniform({1, 3, 2, 16, 12}, rng, 0.0, 1.0, DType::kF64);
  CHECK(same(dct_quantize(x, 100.0), x));
  // Coarser quantization moves the signal further.
  auto dist = [&](double q) {
    const auto a = dct_quantize(x, q).data();
    double s = 0.0;
    for (size_t i = 0; i < a.size(); ++i) s += (a[i] - x.data()[i]) * (a[i] - x.data()[i]);
    return s;
  };
  CHECK(dist(90.0) > 0.0);
  CHECK(dist(20.0) > dist(90.0));
}

TEST_CASE("config json round trip and validation") {
  DegradationConfig c;
  c.noise_sigma = {0.01, 0.03};
  DegradationConfig r = degradation_config_from_json(to_json(c));
  CHECK(r.noise_sigma == c.noise_sigma);
  CHECK(r.quality == c.quality);
  CHECK_THROWS_AS(degradation_config_from_json({{"factor", 2}}), ConfigError);
  CHECK_THROWS_AS(degradation_config_from_json({{"noise_sigma", {0.2, 0.1}}}), ConfigError);
}

TEST_CASE("raw video and PNG round trips") {
  auto dir = scratch("io");
  HrClip c = synthesize_hr(HrKind::kShapes, 3, 16, 24, 9);
  write_raw_video(dir / "a.rgb", c.video, 30.0);
  VideoMeta m = read_raw_meta(dir / "a.rgb");
  CHECK(m.frames == 3);
  CHECK(m.height == 16);
  CHECK(m.width == 24);
  CHECK(m.fps == 30.0);
  Tensor back = read_raw_video(dir / "a.rgb", DType::kF64);
  for (size_t i = 0; i < back.data().size(); ++i)
    REQUIRE(back.data()[i] == static_cast<double>(static_cast<float>(c.video.data()[i])));
  Tensor mid = read_raw_frames(dir / "a.rgb", 1, 1, DType::kF64);
  CHECK(mid.shape() == Shape{1, 3, 1, 16, 24});
  CHECK(mid.data()[0] == back.data()[16 * 24]);
  CHECK_THROWS_AS(read_raw_frames(dir / "a.rgb", 2, 2), DataError);

  write_png_sequence(dir / "png", c.video);
  Tensor seq = read_png_sequence(dir / "png", DType::kF64);
  CHECK(seq.shape() == c.video.shape());
  for (size_t i = 0; i < seq.data().size(); ++i) REQUIRE(std::fabs(seq.data()[i] - c.video.data()[i]) <= 0.5 / 255.0 + 1e-12);
  CHECK_THROWS_AS(read_raw_video(dir / "missing.rgb"), DataError);
  std::filesystem::remove_all(dir);
}

TEST_CASE("dataset synthesis writes a reproducible manifest") {
  auto d1 = scratch("ds1"), d2 = scratch("ds2");
  SynthDataRequest req;
  req.count = 4;
  req.frames = 9;
  req.height = req.width = 32;
  req.seed = 12;
  auto e1 = synthesize_dataset(d1, req);
  auto e2 = synthesize_dataset(d2, req);
  CHECK(e1.size() == 4);
  auto back = read_dataset_manifest(d1 / "manifest.json");
  REQUIRE(back.size() == 4);
  for (size_t i = 0; i < 4; ++i) {
    CHECK(back[i].seed == e2[i].seed);
    CHECK(back[i].hr_path == e1[i].hr_path);
    CHECK(read_raw_meta(d1 / back[i].lr_path).height == 8);
    CHECK(same(read_raw_video(d1 / back[i].lr_path), read_raw_video(d2 / e2[i].lr_path)));
  }
  std::filesystem::remove_all(d1);
  std::filesystem::remove_all(d2);
}
