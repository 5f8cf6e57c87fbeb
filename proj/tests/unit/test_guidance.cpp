#include <doctest.h>

#include <cmath>
#include <cstdlib>
#include <filesystem>

#include "arvsr/core/errors.hpp"
#include "arvsr/core/io.hpp"
#include "arvsr/guidance/guidance.hpp"

using namespace arvsr;

namespace {

Tensor lr_clip(int64_t t, int64_t h, int64_t w, uint64_t seed) {
  Rng rng(seed);
  return Tensor::uniform({1, 3, t, h, w}, rng, 0.0, 1.0);
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  REQUIRE(a.shape() == b.shape());
  double m = 0.0;
  for (int64_t i = 0; i < a.numel(); ++i) m = std::max(m, std::fabs(a.data()[i] - b.data()[i]));
  return m;
}

}  // namespace

TEST_CASE("middle selector on a 9-frame clip picks frame 4") {
  CHECK(KeyframeSelector{}.select(9) == std::vector<int64_t>{4});
  CHECK(KeyframeSelector::parse("first").select(9) == std::vector<int64_t>{0});
  CHECK(KeyframeSelector::parse("last").select(9) == std::vector<int64_t>{8});
  CHECK(KeyframeSelector::parse("0,4,8").select(9) == std::vector<int64_t>{0, 4, 8});
  CHECK_THROWS_AS(KeyframeSelector::parse("0,9").select(9), ShapeError);
  CHECK_THROWS_AS(KeyframeSelector{}.select(0), ShapeError);
}

TEST_CASE("prompt shape and finiteness") {
  GuidanceEncoder enc;
  PromptEmbedding p = enc.extract(lr_clip(9, 16, 16, 1));
  CHECK(p.tokens.shape() == Shape{16, 128});
  CHECK(p.source_frames == std::vector<int64_t>{4});
  for (double v : p.tokens.data()) CHECK(std::isfinite(v));
  // Non-square grids pool to the same token count.
  CHECK(enc.extract(lr_clip(5, 8, 12, 2)).tokens.shape() == Shape{16, 128});
}

TEST_CASE("prompt depends only on the key frame") {
  GuidanceEncoder enc;
  Tensor a = lr_clip(9, 16, 16, 3);
  std::vector<double> v(a.data().begin(), a.data().end());
  const int64_t plane = 16 * 16;
  for (int64_t c = 0; c < 3; ++c)
    for (int64_t t = 0; t < 9; ++t)
      if (t != 4)
        for (int64_t k = 0; k < plane; ++k) v[(c * 9 + t) * plane + k] = 1.0 - v[(c * 9 + t) * plane + k];
  Tensor b = Tensor::from_data(a.shape(), v);
  CHECK(max_abs_diff(enc.extract(a).tokens, enc.extract(b).tokens) == 0.0);
}

TEST_CASE("multi-keyframe selection averages per-frame embeddings") {
  GuidanceEncoder enc(GuidanceConfig{}, 0);
  Tensor clip = lr_clip(9, 16, 16, 4);
  Tensor e0 = enc.encode_frame(slice(clip, 2, 0, 1));
  Tensor e8 = enc.encode_frame(slice(clip, 2, 8, 9));
  Tensor mean = enc.extract(clip, KeyframeSelector::parse("0,8")).tokens;
  CHECK(max_abs_diff(mean, mul_scalar(add(e0, e8), 0.5)) < 1e-6);
}

TEST_CASE("constant-black clip matches the golden prompt") {
  GuidanceEncoder enc(GuidanceConfig{}, 0);
  Tensor black = Tensor::zeros({1, 3, 9, 16, 16});
  Tensor p = enc.extract(black).tokens;
  const auto path = std::filesystem::path(ARVSR_FIXTURE_DIR) / "guidance_black.tnsr";
  if (std::getenv("ARVSR_REGEN_GOLDEN")) save_tensor(path, p);
  REQUIRE(std::filesystem::exists(path));
  CHECK(max_abs_diff(p, load_tensor(path)) == 0.0);
}

TEST_CASE("prompt modes: encoder call counts over 10 chunks") {
  GuidanceEncoder enc;
  Tensor video = lr_clip(37, 8, 8, 5);
  auto chunk = [&](int64_t k) { return slice(video, 2, std::max<int64_t>(0, 4 * k - 3), 4 * k + 1); };
  for (auto [mode, expected] : {std::pair{PromptMode::kJoint, 1}, {PromptMode::kSeparate, 10}, {PromptMode::kNone, 0}}) {
    enc.reset_calls();
    PromptProvider pp(enc, mode, video);
    Tensor first;
    for (int64_t k = 0; k < 10; ++k) {
      const Tensor& p = pp.prompt_for(k, chunk(k));
      if (k == 0) first = p;
      if (mode == PromptMode::kJoint) CHECK(p.node() == first.node());
      if (mode == PromptMode::kNone) CHECK(p.size(0) == 0);
    }
    CHECK(enc.calls() == expected);
  }
}

TEST_CASE("parse prompt modes") {
  CHECK(parse_prompt_mode("joint") == PromptMode::kJoint);
  CHECK(to_string(parse_prompt_mode("separate")) == "separate");
  CHECK_THROWS_AS(parse_prompt_mode("both"), ConfigError);
}
