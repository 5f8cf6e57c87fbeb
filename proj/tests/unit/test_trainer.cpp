#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <map>

#include "arvsr/core/errors.hpp"
#include "arvsr/core/hash.hpp"
#include "arvsr/trainer/trainer.hpp"

using namespace arvsr;
namespace fs = std::filesystem;

namespace {

RunConfig tiny(DType dt = DType::kF32) {
  RunConfig c;
  c.dit.layers = 1;
  c.dit.heads = 2;
  c.dit.model_dim = 16;
  c.dit.latent_channels = 4;
  c.dit.prompt_tokens = 4;
  c.dit.max_grid = 8;
  c.dit.dtype = dt;
  c.vae.enc_channels = {4, 4, 4};
  c.vae.dec_channels = {4, 4, 4};
  c.guidance.channels = {4, 4, 4, 4};
  c.score.width = 8;
  c.vae_training.steps = 4;
  c.vae_training.frames = 5;
  c.vae_training.height = c.vae_training.width = 16;
  c.vae_training.stats_clips = 2;
  c.score_training.steps = 4;
  c.stage1.frames = 9;
  c.stage1.height = c.stage1.width = 32;
  c.stage1.window_h = c.stage1.window_w = 16;
  c.stage1.steps = 4;
  c.stage1.learning_rate = 1e-3;
  c.stage2.frames = 33;
  c.stage2.height = c.stage2.width = 32;
  c.stage2.window_h = c.stage2.window_w = 16;
  c.stage2.steps = 4;
  c.stage2.learning_rate = 1e-3;
  c.validation.clips = 0;
  c.weights.dists = 0.1;
  c.finalize();
  return c;
}

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& name) : path(fs::temp_directory_path() / ("arvsr_trainer_" + name)) {
    fs::remove_all(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

std::vector<Sample> batch_for(const RunConfig& cfg, const StageConfig& st, int64_t step, int n) {
  std::vector<Sample> b;
  for (int i = 0; i < n; ++i) b.push_back(make_sample(cfg, st, 0x99, step, i));
  return b;
}

std::vector<double> values(const ParamStore& p) {
  std::vector<double> v;
  for (const Tensor& t : p.tensors()) v.insert(v.end(), t.data().begin(), t.data().end());
  return v;
}

double max_abs_diff(const std::vector<double>& a, const std::vector<double>& b) {
  REQUIRE(a.size() == b.size());
  double m = 0;
  for (size_t i = 0; i < a.size(); ++i) m = std::max(m, std::fabs(a[i] - b[i]));
  return m;
}

std::map<std::string, std::string> tree_hashes(const fs::path& dir) {
  std::map<std::string, std::string> out;
  for (const auto& e : fs::recursive_directory_iterator(dir)) {
    if (!e.is_regular_file()) continue;
    const std::string rel = fs::relative(e.path(), dir).string();
    if (rel.find("timing") != std::string::npos) continue;
    out[rel] = sha256_file(e.path());
  }
  return out;
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p);
  return {std::istreambuf_iterator<char>(is), {}};
}

}  // namespace

TEST_CASE("stage I with zero learning rate leaves the generator untouched") {
  RunConfig cfg = tiny();
  cfg.stage1.learning_rate = 0.0;
  TempDir dir("zero_lr");
  Trainer t(cfg, dir.path);
  const auto before = values(t.models().dit.params());
  StepLosses l = t.stage1_step(0, batch_for(cfg, cfg.stage1, 0, 1));
  CHECK(std::isfinite(l.total));
  CHECK(l.grad_norm > 0.0);
  CHECK(values(t.models().dit.params()) == before);
}

TEST_CASE("gradient accumulation over micro-batches equals one large batch (f64)") {
  RunConfig a = tiny(DType::kF64), b = tiny(DType::kF64);
  a.stage1.batch_size = 4;
  a.stage1.grad_accum_steps = 1;
  b.stage1.batch_size = 1;
  b.stage1.grad_accum_steps = 4;
  a.stage1.grad_clip = b.stage1.grad_clip = 0.0;
  TempDir da("accum_a"), db("accum_b");
  Trainer ta(a, da.path), tb(b, db.path);
  const auto batch = batch_for(a, a.stage1, 0, 4);
  const StepLosses la = ta.stage1_step(0, batch);
  const StepLosses lb = tb.stage1_step(0, batch);
  CHECK(la.total == doctest::Approx(lb.total).epsilon(1e-12));
  CHECK(max_abs_diff(values(ta.models().dit.params()), values(tb.models().dit.params())) <= 1e-10);
  CHECK_THROWS_AS(ta.stage1_step(1, batch_for(a, a.stage1, 1, 3)), ShapeError);
}

TEST_CASE("loss.dmd = 0 trains the generator exactly as without distribution matching") {
  RunConfig on = tiny(), off = tiny();
  on.weights.dmd = 0.0;
  off.stage2.dmd = false;
  TempDir d1("dmd_on"), d2("dmd_off");
  Trainer t1(on, d1.path), t2(off, d2.path);
  t2.models().scores.real.params().copy_from(t1.models().scores.real.params());
  const auto batch = batch_for(on, on.stage2, 0, 1);
  const auto real_before = values(t1.models().scores.real.params());
  const auto fake_before = values(t1.models().scores.fake.params());
  const StepLosses l1 = t1.stage2_step(0, batch);
  const StepLosses l2 = t2.stage2_step(0, batch);
  CHECK(values(t1.models().dit.params()) == values(t2.models().dit.params()));
  CHECK(l1.l_mse == l2.l_mse);
  CHECK(l1.l_fake_score > 0.0);
  CHECK(l2.l_fake_score == 0.0);
  // The real score is frozen; the fake score tracks the generator.
  CHECK(values(t1.models().scores.real.params()) == real_before);
  CHECK(values(t1.models().scores.fake.params()) != fake_before);
}

TEST_CASE("distribution matching changes the generator update when weighted") {
  RunConfig cfg = tiny(), off = tiny();
  off.weights.dmd = 0.0;
  TempDir d1("dmd_w1"), d2("dmd_w0");
  Trainer t1(cfg, d1.path), t2(off, d2.path);
  // Different real and fake scores, otherwise the DMD gradient is exactly zero.
  t1.models().scores.fake.params().copy_from(ScoreNet(cfg.score, 999).params());
  // Adam's first step is lr * sign(g), so look past it.
  for (int64_t s = 0; s < 3; ++s) {
    const auto batch = batch_for(cfg, cfg.stage2, s, 1);
    t1.stage2_step(s, batch);
    t2.stage2_step(s, batch);
  }
  CHECK(values(t1.models().dit.params()) != values(t2.models().dit.params()));
}

TEST_CASE("same seed gives identical loss curves; the loss CSV has the contract header") {
  RunConfig cfg = tiny();
  TempDir d1("seed_a"), d2("seed_b"), d3("seed_c");
  Trainer(cfg, d1.path).curriculum();
  Trainer(cfg, d2.path).curriculum();
  for (const char* f : {"vae_loss.csv", "stage1_loss.csv", "scores_loss.csv", "stage2_loss.csv"}) {
    CAPTURE(f);
    CHECK(slurp(d1.path / f) == slurp(d2.path / f));
    const std::string text = slurp(d1.path / f);
    CHECK(text.substr(0, text.find('\n')) == "step,l_mse,l_dists,l_temp,l_dmd,l_fake_score");
  }
  CHECK(tree_hashes(d1.path) == tree_hashes(d2.path));
  RunConfig other = cfg;
  other.seed = 1;
  Trainer(other, d3.path).curriculum();
  CHECK(slurp(d1.path / "stage1_loss.csv") != slurp(d3.path / "stage1_loss.csv"));
}

TEST_CASE("interrupted and resumed training matches an uninterrupted run") {
  RunConfig cfg = tiny();
  cfg.vae_training.steps = cfg.stage1.steps = cfg.score_training.steps = cfg.stage2.steps = 5;
  TempDir whole("resume_whole"), parts("resume_parts");
  Trainer(cfg, whole.path).curriculum();
  int runs = 0;
  while (true) {
    Trainer t(cfg, parts.path);
    t.set_stop_after(2);
    const auto rep = t.curriculum();
    ++runs;
    REQUIRE(runs < 20);
    bool interrupted = false;
    for (const auto& p : rep["phases"]) interrupted |= p["extra"].contains("interrupted");
    if (!interrupted) break;
    CHECK(fs::exists(parts.path / (rep["phases"].back()["phase"].get<std::string>() + ".partial")));
  }
  CHECK(runs > 4);
  for (const char* f : {"vae_loss.csv", "stage1_loss.csv", "scores_loss.csv", "stage2_loss.csv"}) {
    CAPTURE(f);
    CHECK(slurp(whole.path / f) == slurp(parts.path / f));
  }
  CHECK(tree_hashes(whole.path / "stage2.ckpt") == tree_hashes(parts.path / "stage2.ckpt"));
}

TEST_CASE("parallel data workers deliver the same samples in step order") {
  RunConfig one = tiny(), three = tiny();
  three.data.workers = 3;
  three.data.queue_capacity = 1;
  TempDir d1("workers_1"), d3("workers_3");
  Trainer t1(one, d1.path), t3(three, d3.path);
  t1.pretrain_vae();
  t3.pretrain_vae();
  CHECK(slurp(d1.path / "vae_loss.csv") == slurp(d3.path / "vae_loss.csv"));
}

TEST_CASE("checkpoints are bound to their config") {
  RunConfig cfg = tiny();
  TempDir dir("bound");
  Trainer(cfg, dir.path).pretrain_vae();
  RunConfig other = cfg;
  other.stage1.learning_rate = 2e-3;
  Trainer t(other, dir.path);
  CHECK_THROWS_AS(t.phase_done("vae"), ConfigError);
  CHECK(Trainer(cfg, dir.path).phase_done("vae"));
  CHECK_FALSE(Trainer(cfg, dir.path).phase_done("stage1"));
  CHECK_THROWS_AS(Trainer(cfg, dir.path).load_phase("stage1"), DataError);
}

TEST_CASE("a diverging phase stops with a numerical error and a failure dump") {
  RunConfig cfg = tiny();
  cfg.vae_training.learning_rate = 1e30;
  cfg.vae_training.steps = 20;
  TempDir dir("diverge");
  Trainer t(cfg, dir.path);
  CHECK_THROWS_AS(t.pretrain_vae(), NumericalError);
  CHECK(fs::exists(dir.path / "failure_dump.json"));
}

TEST_CASE("config resolution: overrides, unknown keys, validation") {
  using nlohmann::json;
  const json base = resolve_config(json(), {});
  CHECK(base == to_json(RunConfig{}));
  CHECK(to_json(run_config_from_json(base)) == base);

  const json j = resolve_config(json{{"stage1", {{"steps", 7}}}}, {"stage2.learning_rate=0.5", "loss.dmd=0", "seed=12"});
  const RunConfig c = run_config_from_json(j);
  CHECK(c.stage1.steps == 7);
  CHECK(c.stage2.learning_rate == 0.5);
  CHECK(c.weights.dmd == 0.0);
  CHECK(c.seed == 12);
  CHECK(config_hash(j) != config_hash(base));
  CHECK(config_hash(j) == config_hash(resolve_config(json{{"stage1", {{"steps", 7}}}}, {"stage2.learning_rate=0.5", "loss.dmd=0", "seed=12"})));

  CHECK_THROWS_AS(resolve_config(json(), {"stage1.stepz=3"}), ConfigError);
  CHECK_THROWS_AS(resolve_config(json{{"trainer", {{"x", 1}}}}, {}), ConfigError);
  CHECK_THROWS_AS(resolve_config(json(), {"stage1.steps"}), ConfigError);
  CHECK_THROWS_AS(resolve_config(json(), {"stage1.steps=many"}), ConfigError);
  // Stage I clips hold exactly one chunk.
  CHECK_THROWS_AS(resolve_config(json(), {"stage1.frames=13"}), ConfigError);
  // Window plus decoder halo must fit inside the clip.
  CHECK_THROWS_AS(resolve_config(json(), {"stage2.window_h=32"}), ConfigError);
  CHECK_NOTHROW(resolve_config(json(), {"stage2.window_h=32", "stage2.patch=false"}));
  CHECK_THROWS_AS(resolve_config(json(), {"stage2.rollout_chunks=2"}), ConfigError);
  CHECK_THROWS_AS(resolve_config(json(), {"dit.chunk_len=0"}), ConfigError);
}

TEST_CASE("desk-scale stage shapes") {
  const RunConfig c;
  CHECK(c.stage1.frames == 9);
  CHECK(c.stage1.height == 64);
  CHECK(c.stage1.width == 64);
  CHECK(c.stage1.window_h == 32);
  CHECK(c.stage2.frames == 33);
  CHECK(c.stage2.height == 32);
  CHECK(c.stage2.width == 48);
  CHECK(c.stage2.window_w == 16);
  CHECK(c.stage2.rollout_chunks == 3);
  const Sample s = make_sample(c, c.stage2, 1, 0, 0);
  CHECK(s.hr.shape() == Shape{1, 3, 33, 32, 48});
  CHECK(s.lr.shape() == Shape{1, 3, 33, 8, 12});
}
