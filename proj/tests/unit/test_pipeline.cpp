#include <doctest.h>

#include <atomic>
#include <chrono>
#include <cmath>
#include <thread>

#include "arvsr/core/errors.hpp"
#include "arvsr/core/ops.hpp"
#include "arvsr/core/params.hpp"
#include "arvsr/core/queue.hpp"
#include "arvsr/pipeline/pipeline.hpp"

using namespace arvsr;

namespace {

struct Toy {
  Vae vae;
  Dit dit;
  GuidanceEncoder guidance;

  explicit Toy(int cache_len = 3, int chunk_len = 3, uint64_t seed = 7)
      : vae(vae_cfg(), seed), dit(dit_cfg(cache_len, chunk_len), seed + 1), guidance(guide_cfg(), seed + 2) {
    // Zero-initialised gates would make the transformer an identity map.
    Rng rng(seed + 3);
    for (const auto& name : dit.params().names()) {
      if (name.find("gate") != std::string::npos || name == "out.weight") {
        Tensor t = dit.params().get(name);
        std::vector<double> v(t.numel());
        for (double& x : v) x = rng.normal() * 0.5;
        assign_values(t, v);
      }
    }
  }
  Generator gen() const { return {vae, dit, guidance}; }

  static VaeConfig vae_cfg() {
    VaeConfig c;
    c.latent_channels = 4;
    c.enc_channels = {4, 4, 4};
    c.dec_channels = {4, 4, 4};
    return c;
  }
  static DiTConfig dit_cfg(int cache_len, int chunk_len) {
    DiTConfig c;
    c.layers = 2;
    c.heads = 2;
    c.model_dim = 16;
    c.latent_channels = 4;
    c.prompt_tokens = 4;
    c.cache_len = cache_len;
    c.chunk_len = chunk_len;
    c.max_grid = 8;
    return c;
  }
  static GuidanceConfig guide_cfg() {
    GuidanceConfig c;
    c.model_dim = 16;
    c.prompt_tokens = 4;
    c.channels = {4, 4, 4, 4};
    return c;
  }
};

Tensor lr_clip(int64_t frames, uint64_t seed, int64_t h = 4, int64_t w = 4) {
  Rng rng(seed);
  return Tensor::uniform({1, 3, frames, h, w}, rng, 0.0, 1.0);
}

bool same(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) return false;
  for (int64_t i = 0; i < a.numel(); ++i) {
    if (a.data()[i] != b.data()[i]) return false;
  }
  return true;
}

StreamOptions mode(InferMode m, uint64_t seed = 1) {
  StreamOptions o;
  o.mode = m;
  o.seed = seed;
  return o;
}

}  // namespace

TEST_CASE("chunk quotas follow the causal 4n+1 mapping") {
  CHECK(chunk_quota(0, 3) == 9);
  CHECK(chunk_quota(1, 3) == 12);
  CHECK(chunk_quota(5, 3) == 12);
  CHECK(chunk_quota(0, 1) == 1);
  CHECK(chunk_quota(1, 1) == 4);
  CHECK(chunk_count(0, 3) == 0);
  CHECK(chunk_count(1, 3) == 1);
  CHECK(chunk_count(9, 3) == 1);
  CHECK(chunk_count(10, 3) == 2);
  CHECK(chunk_count(33, 3) == 3);
  CHECK(chunk_count(34, 3) == 4);
}

TEST_CASE("ar on 33 frames emits 33 HR frames, one forward per chunk") {
  Toy toy;
  RunReport rep;
  Tensor hr = run_mode(toy.gen(), lr_clip(33, 1), mode(InferMode::kAr), &rep);
  CHECK(hr.shape() == Shape{1, 3, 33, 16, 16});
  CHECK(rep.chunks == 3);
  CHECK(rep.forwards == 3);
  CHECK(rep.frames_out == 33);
}

TEST_CASE("forward count equals chunk count in every mode and length") {
  Toy toy;
  Rng rng(11);
  for (int trial = 0; trial < 12; ++trial) {
    const int64_t frames = rng.uniform_int(1, 40);
    for (InferMode m : {InferMode::kAr, InferMode::kChunking, InferMode::kAggregation}) {
      RunReport rep;
      Tensor hr = run_mode(toy.gen(), lr_clip(frames, trial), mode(m), &rep);
      CAPTURE(frames);
      CAPTURE(to_string(m));
      CHECK(rep.forwards == rep.chunks);
      CHECK(hr.size(2) == frames);
      if (m != InferMode::kAggregation) CHECK(rep.chunks == chunk_count(frames, 3));
    }
  }
}

TEST_CASE("chunking equals ar with an empty cache and per-chunk prompts") {
  Toy toy;
  const Tensor lr = lr_clip(45, 3);
  StreamOptions ar = mode(InferMode::kAr);
  ar.cache_len = 0;
  ar.prompt = PromptMode::kSeparate;
  const Tensor a = run_mode(toy.gen(), lr, ar);
  const Tensor c = run_mode(toy.gen(), lr, mode(InferMode::kChunking));
  CHECK(same(a, c));
  // And the cache matters when it is on.
  StreamOptions full = mode(InferMode::kAr);
  full.prompt = PromptMode::kSeparate;
  CHECK_FALSE(same(run_mode(toy.gen(), lr, full), c));
}

TEST_CASE("blend weights are a partition of unity") {
  for (int64_t n = 1; n <= 64; ++n) {
    const auto w = blend_weights(n);
    REQUIRE(w.size() == static_cast<size_t>(n));
    for (int64_t i = 0; i < n; ++i) {
      CHECK(w[i].first + w[i].second == 1.0);
      CHECK(w[i].first > 0.0);
      CHECK(w[i].second > 0.0);
      if (i > 0) CHECK(w[i].second > w[i - 1].second);
    }
  }
}

TEST_CASE("aggregation blends neighbouring chunks in the overlap") {
  Toy toy;
  const Tensor lr = lr_clip(21, 5);
  StreamOptions o = mode(InferMode::kAggregation);
  StreamEngine eng(toy.gen(), o);
  eng.keep_latents(true);
  Tensor a = eng.push_frames(lr);
  Tensor b = eng.finish();
  Tensor out = concat({a, b}, 2);
  REQUIRE(out.size(2) == 21);
  REQUIRE(eng.latents().size() == 3);
  // Chunk 0 covers HR frames 0..8, chunk 1 frames 5..16; frames 5..8 are blended.
  const Tensor d0 = toy.vae.decode(eng.latents()[0], true);
  const Tensor d1 = toy.vae.decode(eng.latents()[1], false);
  const auto w = blend_weights(4);
  for (int64_t i = 0; i < 4; ++i) {
    Tensor want = add(mul_scalar(slice(d0, 2, 5 + i, 6 + i), w[i].first), mul_scalar(slice(d1, 2, i, i + 1), w[i].second));
    CHECK(same(slice(out, 2, 5 + i, 6 + i), want));
  }
  CHECK(same(slice(out, 2, 0, 5), slice(d0, 2, 0, 5)));
}

TEST_CASE("streaming in arbitrary pieces matches the whole-clip run") {
  Toy toy;
  const Tensor lr = lr_clip(40, 9);
  Rng rng(2);
  for (InferMode m : {InferMode::kAr, InferMode::kChunking, InferMode::kAggregation}) {
    const Tensor whole = run_mode(toy.gen(), lr, mode(m));
    StreamEngine eng(toy.gen(), mode(m));
    std::vector<Tensor> parts;
    int64_t t = 0;
    while (t < 40) {
      const int64_t n = std::min<int64_t>(rng.uniform_int(1, 7), 40 - t);
      Tensor part = eng.push_frames(slice(lr, 2, t, t + n));
      if (part.size(2) > 0) parts.push_back(part);
      t += n;
    }
    Tensor tail = eng.finish();
    if (tail.size(2) > 0) parts.push_back(tail);
    CHECK(same(concat(std::span<const Tensor>(parts), 2), whole));
  }
}

TEST_CASE("emission latency stays within the chunk bound") {
  Toy toy;
  const Tensor lr = lr_clip(60, 4);
  for (InferMode m : {InferMode::kAr, InferMode::kChunking, InferMode::kAggregation}) {
    StreamEngine eng(toy.gen(), mode(m));
    int64_t emitted = 0;
    for (int64_t t = 0; t < 60; ++t) {
      const Tensor hr = eng.push_frames(slice(lr, 2, t, t + 1));
      for (int64_t k = 0; k < hr.size(2); ++k) {
        const int64_t i = emitted + k + 1;  // 1-based HR index
        const int64_t bound = 12 * ((i + 11) / 12) + 9;
        CAPTURE(to_string(m));
        CAPTURE(i);
        CHECK(eng.consumed() <= bound);
      }
      emitted += hr.size(2);
    }
    // Everything up to the last complete chunk has been emitted before finish.
    CHECK(emitted >= 45);
  }
}

TEST_CASE("retained state is constant once the cache is full") {
  Toy toy;
  std::vector<int64_t> peaks;
  for (int64_t frames : {33, 129, 257}) {
    RunReport rep;
    run_mode(toy.gen(), lr_clip(frames, 8), mode(InferMode::kAr), &rep);
    peaks.push_back(rep.ledger.post_warmup_peak);
    CHECK(rep.ledger.post_warmup_peak > 0);
    CHECK(rep.ledger.peak_cache > 0);
  }
  CHECK(peaks[0] == peaks[1]);
  CHECK(peaks[1] == peaks[2]);
  // An unbounded cache keeps growing.
  StreamOptions o = mode(InferMode::kAr);
  o.cache_len = DiTConfig::kUnbounded;
  RunReport a, b;
  run_mode(toy.gen(), lr_clip(33, 8), o, &a);
  run_mode(toy.gen(), lr_clip(129, 8), o, &b);
  CHECK(b.ledger.peak_cache > a.ledger.peak_cache);
}

TEST_CASE("same seed reproduces, another seed does not") {
  Toy toy;
  const Tensor lr = lr_clip(21, 6);
  const Tensor a = run_mode(toy.gen(), lr, mode(InferMode::kAr, 5));
  const Tensor b = run_mode(toy.gen(), lr, mode(InferMode::kAr, 5));
  const Tensor c = run_mode(toy.gen(), lr, mode(InferMode::kAr, 6));
  CHECK(same(a, b));
  CHECK_FALSE(same(a, c));
}

TEST_CASE("bad stream input") {
  Toy toy;
  StreamEngine eng(toy.gen(), mode(InferMode::kAr));
  CHECK_THROWS_AS(eng.push_frames(lr_clip(3, 1, 3, 4)), ShapeError);
  eng.push_frames(lr_clip(3, 1, 4, 4));
  CHECK_THROWS_AS(eng.push_frames(lr_clip(3, 1, 6, 4)), ShapeError);
  CHECK_THROWS_AS(eng.push_frames(Tensor::zeros({3, 2, 4, 4})), ShapeError);
  eng.finish();
  CHECK_THROWS(eng.finish());

  StreamOptions bad = mode(InferMode::kChunking);
  bad.cache_len = 3;
  CHECK_THROWS_AS(StreamEngine(toy.gen(), bad), ConfigError);
  StreamOptions wide = mode(InferMode::kAggregation);
  wide.overlap = 3;
  CHECK_THROWS_AS(StreamEngine(toy.gen(), wide), ConfigError);
  CHECK_THROWS_AS(parse_infer_mode("fast"), ConfigError);
}

TEST_CASE("empty stream finishes cleanly") {
  Toy toy;
  StreamEngine eng(toy.gen(), mode(InferMode::kAr));
  CHECK_FALSE(eng.finish().defined());
  CHECK(eng.chunks() == 0);
}

TEST_CASE("linear fit against a hand-computed line") {
  auto [a, b, r2] = linear_fit({1, 2, 3, 4}, {3, 5, 7, 9});
  CHECK(a == doctest::Approx(2.0).epsilon(1e-12));
  CHECK(b == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(r2 == doctest::Approx(1.0).epsilon(1e-12));
  // y = x + {+1,-1,-1,+1}: slope 1, intercept 0, SSE 4, SST 9.
  auto [a2, b2, r22] = linear_fit({0, 1, 2, 3}, {1, 0, 1, 4});
  CHECK(a2 == doctest::Approx(1.0));
  CHECK(b2 == doctest::Approx(0.0));
  CHECK(r22 == doctest::Approx(5.0 / 9.0).epsilon(1e-12));
}

TEST_CASE("bench reports constant memory and a fit") {
  Toy toy;
  // A 9-frame stream is a single chunk and never reaches steady state, so start at two chunks.
  BenchResult r = bench(toy.gen(), {21, 33, 45, 57}, mode(InferMode::kAr), 4, 4, 1);
  REQUIRE(r.rows.size() == 4);
  CHECK(r.constant_memory);
  CHECK(r.rows[2].chunks == 4);
  CHECK(r.slope > 0.0);
  CHECK(r.to_json().contains("r2"));
}

TEST_CASE("bounded queue blocks producers at capacity") {
  BoundedQueue<int> q(2);
  std::atomic<int> pushed{0};
  std::thread producer([&] {
    for (int i = 0; i < 5; ++i) {
      if (!q.push(i)) return;
      ++pushed;
    }
  });
  std::this_thread::sleep_for(std::chrono::milliseconds(50));
  CHECK(pushed.load() == 2);
  CHECK(q.pop() == 0);
  CHECK(q.pop() == 1);
  for (int i = 2; i < 5; ++i) CHECK(q.pop() == i);
  producer.join();
  q.close();
  CHECK_FALSE(q.pop().has_value());
  CHECK_FALSE(q.push(9));
}
