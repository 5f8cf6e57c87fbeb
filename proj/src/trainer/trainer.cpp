#include "arvsr/trainer/trainer.hpp"

#include <chrono>
#include <exception>
#include <fstream>
#include <iomanip>
#include <thread>

#include "arvsr/core/errors.hpp"
#include "arvsr/core/image.hpp"
#include "arvsr/core/ops.hpp"
#include "arvsr/core/queue.hpp"
#include "arvsr/pipeline/eval.hpp"

namespace arvsr {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

// RNG streams. Data and optimisation noise use separate streams so that
// resuming at step s regenerates exactly what an uninterrupted run would see.
constexpr uint64_t kVaeData = 0x7a0, kVaeNoise = 0x7a1;
constexpr uint64_t kStage1Data = 0x510, kStage1Noise = 0x511;
constexpr uint64_t kScoreData = 0x5c0, kScoreNoise = 0x5c1;
constexpr uint64_t kStage2Data = 0x520, kStage2Noise = 0x521;

const char* const kPhases[] = {"vae", "stage1", "scores", "stage2"};

// Samples for steps [first, last), produced by `workers` threads into bounded
// per-worker queues; step s always comes from worker (s - first) % workers.
class Feed {
 public:
  Feed(int workers, int capacity, int64_t first, int64_t last, std::function<std::vector<Sample>(int64_t)> make)
      : first_(first), errors_(workers) {
    for (int w = 0; w < workers; ++w) queues_.push_back(std::make_unique<BoundedQueue<std::vector<Sample>>>(capacity));
    for (int w = 0; w < workers; ++w) {
      threads_.emplace_back([this, w, workers, last, make] {
        try {
          for (int64_t s = first_ + w; s < last; s += workers) {
            if (!queues_[w]->push(make(s))) return;
          }
        } catch (...) {
          errors_[w] = std::current_exception();
        }
        queues_[w]->close();
      });
    }
  }
  ~Feed() {
    for (auto& q : queues_) q->close();
    for (auto& t : threads_) t.join();
  }
  std::vector<Sample> get(int64_t step) {
    const size_t w = static_cast<size_t>((step - first_) % static_cast<int64_t>(queues_.size()));
    auto item = queues_[w]->pop();
    if (!item) {
      if (errors_[w]) std::rethrow_exception(errors_[w]);
      throw Error("data feed ended early");
    }
    return std::move(*item);
  }

 private:
  int64_t first_;
  std::vector<std::unique_ptr<BoundedQueue<std::vector<Sample>>>> queues_;
  std::vector<std::exception_ptr> errors_;
  std::vector<std::thread> threads_;
};

json losses_json(const std::vector<StepLosses>& rows) {
  json a = json::array();
  for (const auto& r : rows) a.push_back({r.step, r.l_mse, r.l_dists, r.l_temp, r.l_dmd, r.l_fake_score, r.total, r.grad_norm});
  return a;
}

std::vector<StepLosses> losses_from(const json& a) {
  std::vector<StepLosses> out;
  for (const auto& r : a) {
    StepLosses l;
    l.step = r.at(0).get<int64_t>();
    l.l_mse = r.at(1).get<double>();
    l.l_dists = r.at(2).get<double>();
    l.l_temp = r.at(3).get<double>();
    l.l_dmd = r.at(4).get<double>();
    l.l_fake_score = r.at(5).get<double>();
    l.total = r.at(6).get<double>();
    l.grad_norm = r.at(7).get<double>();
    out.push_back(l);
  }
  return out;
}

json mean_tail(const std::vector<StepLosses>& rows, size_t n) {
  StepLosses m;
  const size_t k = std::min(n, rows.size());
  for (size_t i = rows.size() - k; i < rows.size(); ++i) {
    m.l_mse += rows[i].l_mse;
    m.l_dists += rows[i].l_dists;
    m.l_temp += rows[i].l_temp;
    m.l_dmd += rows[i].l_dmd;
    m.l_fake_score += rows[i].l_fake_score;
  }
  const double d = k ? static_cast<double>(k) : 1.0;
  return {{"l_mse", m.l_mse / d}, {"l_dists", m.l_dists / d}, {"l_temp", m.l_temp / d},
          {"l_dmd", m.l_dmd / d}, {"l_fake_score", m.l_fake_score / d}, {"window", k}};
}

struct PixTerms {
  Tensor total;
  double mse = 0, dists = 0, temp = 0;
};

// Patch-supervised pixel loss of one generated chunk against HR frames [f0, f0 + T_chunk).
PixTerms pixel_terms(const Vae& vae, const Tensor& latent, const Tensor& hr, int64_t f0, bool head,
                     const StageConfig& st, const LossWeights& w, Rng& rng) {
  const int64_t frames = pixel_frames_for(latent.size(2), head);
  Tensor patch, gt;
  if (st.patch) {
    const CropWindow win = sample_patch_window(latent.size(3), latent.size(4), st.window_h / kSpatialFactor,
                                               st.window_w / kSpatialFactor, kDecoderRadius, rng);
    patch = vae.decode_local(latent, win, head, false);
    gt = crop_pix(slice(hr, 2, f0, f0 + frames), win);
  } else {
    patch = vae.decode_raw(latent, head);
    gt = slice(hr, 2, f0, f0 + frames);
  }
  PixTerms t;
  Tensor l_mse = mse(patch, gt);
  LossWeights unit_temp;
  Tensor l_temp = temporal_loss(patch, gt, unit_temp);
  t.total = add(mul_scalar(l_mse, w.mse), mul_scalar(l_temp, w.temp));
  t.mse = l_mse.item();
  t.temp = l_temp.item();
  if (w.dists > 0.0) {
    Tensor l_d = perceptual_distance(patch, gt);
    t.total = add(t.total, mul_scalar(l_d, w.dists));
    t.dists = l_d.item();
  }
  return t;
}

Tensor encode_lr(const Vae& vae, const Tensor& lr) {
  NoGradGuard guard;
  Tensor up = resize_bilinear(lr, kUpscale * lr.size(3), kUpscale * lr.size(4)).to(vae.config().dtype);
  return vae.encode(up, true);
}

Tensor accumulate(const Tensor& acc, const Tensor& x) { return acc.defined() ? add(acc, x) : x; }

}  // namespace

Models::Models(const RunConfig& cfg)
    : vae(cfg.vae, cfg.seed * 4 + 1),
      dit(cfg.dit, cfg.seed * 4 + 2),
      guidance(cfg.guidance, cfg.seed * 4 + 3),
      scores(cfg.score, cfg.seed * 4 + 4) {}

void Models::save(const fs::path& dir) const {
  vae.save(dir / "vae");
  dit.save(dir / "dit");
  guidance.save(dir / "guidance");
  scores.real.save(dir / "score_real");
  scores.fake.save(dir / "score_fake");
}

void Models::load(const fs::path& dir) {
  vae.load(dir / "vae");
  dit.load(dir / "dit");
  guidance.load(dir / "guidance");
  scores.real.load(dir / "score_real");
  scores.fake.load(dir / "score_fake");
}

Sample make_sample(const RunConfig& cfg, const StageConfig& st, uint64_t stream, int64_t step, int index) {
  Rng r = Rng(cfg.seed, stream).fork(static_cast<uint64_t>(step)).fork(static_cast<uint64_t>(index));
  const uint64_t s = r.next_u64();
  const HrKind kind = dataset_kind(r.uniform_int(0, 3));
  Tensor hr = synthesize_hr(kind, st.frames, st.height, st.width, s, cfg.data.synth).video;
  Sample out;
  if (st.stage > 0) out.lr = degrade(hr, cfg.data.degradation, s ^ 0x9e3779b97f4a7c15ULL).to(cfg.dit.dtype);
  out.hr = hr.to(cfg.dit.dtype);
  return out;
}

json PhaseReport::to_json() const {
  return {{"phase", phase},
          {"steps", steps},
          {"seed", seed},
          {"config_hash", config_hash},
          {"resumed", resumed},
          {"final_losses", mean_tail(losses, 50)},
          {"extra", extra}};
}

void write_loss_csv(const fs::path& path, const std::vector<StepLosses>& rows) {
  std::ofstream os(path);
  if (!os) throw DataError("cannot write " + path.string());
  os << kLossCsvHeader << '\n' << std::setprecision(17);
  for (const auto& r : rows) {
    os << r.step << ',' << r.l_mse << ',' << r.l_dists << ',' << r.l_temp << ',' << r.l_dmd << ',' << r.l_fake_score << '\n';
  }
}

Trainer::Trainer(RunConfig cfg, fs::path out_dir) : cfg_(std::move(cfg)), out_(std::move(out_dir)) {
  cfg_.finalize();
  cfg_json_ = to_json(cfg_);
  cfg_hash_ = config_hash(cfg_json_);
  models_ = std::make_unique<Models>(cfg_);
  fs::create_directories(out_);
}

Trainer::~Trainer() = default;

bool Trainer::phase_done(const std::string& phase) const {
  const fs::path state = out_ / (phase + ".ckpt") / "state.json";
  if (!fs::exists(state)) return false;
  std::ifstream is(state);
  json j;
  try {
    is >> j;
  } catch (const json::exception& e) {
    throw DataError("corrupt checkpoint state " + state.string());
  }
  if (j.value("config_hash", std::string()) != cfg_hash_) {
    throw ConfigError(state.string() + " belongs to a run with a different config");
  }
  return true;
}

void Trainer::save_checkpoint(const fs::path& dir, const std::string& phase, int64_t step,
                              const std::vector<StepLosses>& losses, const AdamW* opt, const AdamW* extra_opt) const {
  // Write to a sibling and rename so an interrupted save never leaves a half checkpoint.
  const fs::path tmp = dir.string() + ".tmp";
  fs::remove_all(tmp);
  fs::create_directories(tmp);
  models_->save(tmp / "models");
  if (opt) save_manifest(tmp / "optimizer", opt->state());
  if (extra_opt) save_manifest(tmp / "optimizer_extra", extra_opt->state());
  std::ofstream os(tmp / "state.json");
  os << json{{"phase", phase}, {"step", step}, {"config_hash", cfg_hash_}, {"losses", losses_json(losses)}}.dump(1);
  os.close();
  std::ofstream(tmp / "config.json") << cfg_json_.dump(1);
  fs::remove_all(dir);
  fs::rename(tmp, dir);
}

int64_t Trainer::load_checkpoint(const fs::path& dir, std::vector<StepLosses>* losses, AdamW* opt, AdamW* extra_opt) {
  std::ifstream is(dir / "state.json");
  if (!is) throw DataError("missing checkpoint state in " + dir.string());
  json j;
  try {
    is >> j;
    if (j.at("config_hash").get<std::string>() != cfg_hash_) throw ConfigError(dir.string() + " belongs to a different config");
    models_->load(dir / "models");
    if (opt) opt->load_state(load_manifest(dir / "optimizer"));
    if (extra_opt) extra_opt->load_state(load_manifest(dir / "optimizer_extra"));
    if (losses) *losses = losses_from(j.at("losses"));
    return j.at("step").get<int64_t>();
  } catch (const json::exception& e) {
    throw DataError("corrupt checkpoint " + dir.string() + ": " + e.what());
  }
}

void Trainer::load_phase(const std::string& phase) {
  if (!phase_done(phase)) throw DataError("no completed " + phase + " checkpoint in " + out_.string());
  load_checkpoint(out_ / (phase + ".ckpt"), nullptr, nullptr, nullptr);
}

void Trainer::freeze_for_generator_training() {
  models_->vae.params().set_requires_grad(false);
  models_->guidance.params().set_requires_grad(false);
  models_->scores.real.params().set_requires_grad(false);
  models_->dit.params().set_requires_grad(true);
}

double Trainer::generator_update(AdamW& opt, const StageConfig& st) {
  double norm = 0.0;
  if (st.grad_clip > 0.0) norm = clip_grad_norm(models_->dit.params(), st.grad_clip);
  opt.step();
  opt.zero_grad();
  return norm;
}

PhaseReport Trainer::run_phase(const std::string& name, int64_t steps, uint64_t stream, int samples_per_step,
                               const StageConfig* stage, AdamW* opt, AdamW* extra_opt,
                               const std::function<StepLosses(int64_t, std::span<const Sample>)>& step_fn) {
  const auto t0 = std::chrono::steady_clock::now();
  PhaseReport rep;
  rep.phase = name;
  rep.seed = cfg_.seed;
  rep.config_hash = cfg_hash_;
  const fs::path partial = out_ / (name + ".partial");
  int64_t start = 0;
  if (fs::exists(partial / "state.json")) {
    start = load_checkpoint(partial, &rep.losses, opt, extra_opt);
    rep.resumed = true;
  }
  {
    Feed feed(cfg_.data.workers, cfg_.data.queue_capacity, start, steps, [&](int64_t s) {
      std::vector<Sample> v;
      for (int i = 0; i < samples_per_step; ++i) v.push_back(make_sample(cfg_, *stage, stream, s, i));
      return v;
    });
    for (int64_t s = start; s < steps; ++s) {
      if (stop_after_ && s - start >= *stop_after_) {
        save_checkpoint(partial, name, s, rep.losses, opt, extra_opt);
        rep.steps = s;
        rep.extra["interrupted"] = true;
        rep.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        return rep;
      }
      std::vector<Sample> batch = feed.get(s);
      StepLosses l;
      try {
        l = step_fn(s, batch);
        if (!std::isfinite(l.total)) throw NumericalError("non-finite loss");
      } catch (const NumericalError& e) {
        std::ofstream dump(out_ / "failure_dump.json");
        dump << json{{"phase", name},
                     {"step", s},
                     {"error", e.what()},
                     {"config_hash", cfg_hash_},
                     {"recent_losses", losses_json(std::vector<StepLosses>(
                                           rep.losses.end() - std::min<size_t>(rep.losses.size(), 20), rep.losses.end()))}}
                    .dump(1);
        throw;
      }
      rep.losses.push_back(l);
      if (progress_) progress_(name, l);
      if (cfg_.checkpoint_every > 0 && (s + 1) % cfg_.checkpoint_every == 0 && s + 1 < steps) {
        save_checkpoint(partial, name, s + 1, rep.losses, opt, extra_opt);
      }
    }
  }
  rep.steps = steps;
  save_checkpoint(out_ / (name + ".ckpt"), name, steps, rep.losses, opt, extra_opt);
  fs::remove_all(partial);
  write_loss_csv(out_ / (name + "_loss.csv"), rep.losses);
  rep.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return rep;
}

PhaseReport Trainer::pretrain_vae() {
  Vae& vae = models_->vae;
  vae.params().set_requires_grad(true);
  AdamW opt(vae.params(), AdamWConfig{cfg_.vae_training.learning_rate});
  StageConfig st;
  st.stage = 0;
  st.frames = cfg_.vae_training.frames;
  st.height = cfg_.vae_training.height;
  st.width = cfg_.vae_training.width;
  PhaseReport rep = run_phase("vae", cfg_.vae_training.steps, kVaeData, 1, &st, &opt, nullptr,
                              [&](int64_t s, std::span<const Sample> batch) {
                                Rng rng = Rng(cfg_.seed, kVaeNoise).fork(static_cast<uint64_t>(s));
                                StepLosses l;
                                l.step = s;
                                opt.zero_grad();
                                Tensor loss = vae.training_loss(batch[0].hr, rng, &l.l_mse);
                                loss.backward();
                                l.grad_norm = clip_grad_norm(vae.params(), 1.0);
                                opt.step();
                                l.total = loss.item();
                                return l;
                              });
  if (rep.extra.contains("interrupted")) return rep;
  // Latent normalisation from HR clips of the Stage I shape.
  std::vector<Tensor> clips;
  for (int i = 0; i < cfg_.vae_training.stats_clips; ++i) clips.push_back(make_sample(cfg_, st, kVaeData ^ 0xff, 0, i).hr);
  StageConfig s1 = cfg_.stage1;
  s1.stage = 0;
  for (int i = 0; i < cfg_.vae_training.stats_clips; ++i) clips.push_back(make_sample(cfg_, s1, kVaeData ^ 0xfe, 0, i).hr);
  vae.fit_latent_stats(clips);
  vae.params().set_requires_grad(false);
  save_checkpoint(out_ / "vae.ckpt", "vae", rep.steps, rep.losses, nullptr, nullptr);
  rep.extra["latent_shift"] = vae.latent_shift();
  rep.extra["latent_scale"] = vae.latent_scale();
  return rep;
}

StepLosses Trainer::stage1_step(int64_t step, std::span<const Sample> batch) {
  const StageConfig& st = cfg_.stage1;
  Models& m = *models_;
  const size_t want = static_cast<size_t>(st.batch_size) * st.grad_accum_steps;
  if (batch.size() != want) throw ShapeError("stage I step expects " + std::to_string(want) + " samples");
  if (!gen_opt1_) gen_opt1_ = std::make_unique<AdamW>(m.dit.params(), AdamWConfig{st.learning_rate, 0.9, 0.999, 1e-8, st.weight_decay});
  freeze_for_generator_training();
  const Rng base = Rng(cfg_.seed, kStage1Noise).fork(static_cast<uint64_t>(step));
  const double scale = 1.0 / static_cast<double>(want);
  StepLosses out;
  out.step = step;
  for (int a = 0; a < st.grad_accum_steps; ++a) {
    Tensor micro;
    for (int b = 0; b < st.batch_size; ++b) {
      const size_t i = static_cast<size_t>(a) * st.batch_size + b;
      const Sample& smp = batch[i];
      Rng rng = base.fork(i);
      Rng noise = rng.fork(0), win = rng.fork(1);
      Tensor z = encode_lr(m.vae, smp.lr);
      Tensor prompt;
      {
        NoGradGuard g;
        prompt = m.guidance.extract(smp.lr).tokens;
      }
      // Stage I: a single chunk per clip, no cache, no distribution matching.
      ChunkContext ctx = m.dit.new_context(0);
      m.dit.set_prompt(ctx, prompt);
      Tensor gen = m.dit.generate_chunk(z, ctx, noise);
      PixTerms t = pixel_terms(m.vae, gen, smp.hr, 0, true, st, cfg_.weights, win);
      out.l_mse += t.mse * scale;
      out.l_dists += t.dists * scale;
      out.l_temp += t.temp * scale;
      out.total += t.total.item() * scale;
      micro = accumulate(micro, t.total);
    }
    mul_scalar(micro, scale).backward();
  }
  out.grad_norm = generator_update(*gen_opt1_, st);
  return out;
}

PhaseReport Trainer::stage1() {
  const StageConfig& st = cfg_.stage1;
  if (!gen_opt1_) gen_opt1_ = std::make_unique<AdamW>(models_->dit.params(), AdamWConfig{st.learning_rate, 0.9, 0.999, 1e-8, st.weight_decay});
  PhaseReport rep = run_phase("stage1", st.steps, kStage1Data, st.batch_size * st.grad_accum_steps, &st, gen_opt1_.get(),
                              nullptr, [&](int64_t s, std::span<const Sample> b) { return stage1_step(s, b); });
  if (!rep.extra.contains("interrupted") && cfg_.validation.clips > 0) rep.extra["validation"] = validate_models();
  return rep;
}

PhaseReport Trainer::pretrain_scores() {
  Models& m = *models_;
  ScoreNet& real = m.scores.real;
  real.params().set_requires_grad(true);
  AdamW opt(real.params(), AdamWConfig{cfg_.score_training.learning_rate});
  StageConfig st = cfg_.stage2;
  st.stage = 0;
  PhaseReport rep = run_phase("scores", cfg_.score_training.steps, kScoreData, 1, &st, &opt, nullptr,
                              [&](int64_t s, std::span<const Sample> batch) {
                                Rng rng = Rng(cfg_.seed, kScoreNoise).fork(static_cast<uint64_t>(s));
                                Tensor x0;
                                {
                                  NoGradGuard g;
                                  x0 = m.vae.encode(batch[0].hr, true);
                                }
                                opt.zero_grad();
                                Tensor loss = real.denoise_loss(x0, rng, m.scores.t_lo, m.scores.t_hi);
                                loss.backward();
                                StepLosses l;
                                l.step = s;
                                l.grad_norm = clip_grad_norm(real.params(), 1.0);
                                opt.step();
                                l.l_fake_score = l.total = loss.item();
                                return l;
                              });
  if (rep.extra.contains("interrupted")) return rep;
  m.scores.init_fake_from_real();
  save_checkpoint(out_ / "scores.ckpt", "scores", rep.steps, rep.losses, nullptr, nullptr);
  return rep;
}

StepLosses Trainer::stage2_step(int64_t step, std::span<const Sample> batch) {
  const StageConfig& st = cfg_.stage2;
  Models& m = *models_;
  const size_t want = static_cast<size_t>(st.batch_size) * st.grad_accum_steps;
  if (batch.size() != want) throw ShapeError("stage II step expects " + std::to_string(want) + " samples");
  if (!gen_opt2_) gen_opt2_ = std::make_unique<AdamW>(m.dit.params(), AdamWConfig{st.learning_rate, 0.9, 0.999, 1e-8, st.weight_decay});
  if (st.dmd && !fake_opt_) fake_opt_ = std::make_unique<AdamW>(m.scores.fake.params(), AdamWConfig{cfg_.score_training.fake_learning_rate});
  freeze_for_generator_training();
  const int n = m.dit.config().chunk_len;
  const Rng base = Rng(cfg_.seed, kStage2Noise).fork(static_cast<uint64_t>(step));
  const double scale = 1.0 / static_cast<double>(want);
  const double per_chunk = 1.0 / static_cast<double>(st.rollout_chunks);
  StepLosses out;
  out.step = step;
  std::vector<Tensor> triplets;
  for (int a = 0; a < st.grad_accum_steps; ++a) {
    Tensor micro;
    for (int b = 0; b < st.batch_size; ++b) {
      const size_t i = static_cast<size_t>(a) * st.batch_size + b;
      const Sample& smp = batch[i];
      Rng rng = base.fork(i);
      Rng noise = rng.fork(0), win = rng.fork(1), dmd_rng = rng.fork(2);
      Tensor z = encode_lr(m.vae, smp.lr);
      Tensor prompt;
      {
        NoGradGuard g;
        prompt = m.guidance.extract(smp.lr).tokens;
      }
      // Self-forcing rollout: the cache holds this generator's own activations.
      ChunkContext ctx = m.dit.new_context();
      m.dit.set_prompt(ctx, prompt);
      std::vector<Tensor> outs;
      Tensor loss;
      for (int k = 0; k < st.rollout_chunks; ++k) {
        Tensor gen = m.dit.generate_chunk(slice(z, 2, static_cast<int64_t>(k) * n, static_cast<int64_t>(k + 1) * n), ctx, noise);
        const int64_t f0 = k == 0 ? 0 : pixel_frames_for(static_cast<int64_t>(k) * n, true);
        PixTerms t = pixel_terms(m.vae, gen, smp.hr, f0, k == 0, st, cfg_.weights, win);
        out.l_mse += t.mse * scale * per_chunk;
        out.l_dists += t.dists * scale * per_chunk;
        out.l_temp += t.temp * scale * per_chunk;
        loss = accumulate(loss, mul_scalar(t.total, per_chunk));
        outs.push_back(gen);
      }
      if (st.dmd) {
        DmdResult d = dmd_generator_gradient(outs, m.scores, dmd_rng);
        out.l_dmd += d.loss.item() * scale;
        if (cfg_.weights.dmd > 0.0) loss = add(loss, mul_scalar(d.loss, cfg_.weights.dmd));
        triplets.push_back(concat(std::span<const Tensor>(outs), 2).detach());
      }
      out.total += loss.item() * scale;
      micro = accumulate(micro, loss);
    }
    mul_scalar(micro, scale).backward();
  }
  out.grad_norm = generator_update(*gen_opt2_, st);
  if (st.dmd && st.fake_updates > 0) {
    double fl = 0.0;
    for (size_t i = 0; i < triplets.size(); ++i) {
      Rng fake_rng = base.fork(i).fork(3);
      for (int u = 0; u < st.fake_updates; ++u) fl += update_fake_score(triplets[i], m.scores, *fake_opt_, fake_rng);
    }
    out.l_fake_score = fl / static_cast<double>(triplets.size() * st.fake_updates);
  }
  return out;
}

PhaseReport Trainer::stage2() {
  const StageConfig& st = cfg_.stage2;
  Models& m = *models_;
  if (!gen_opt2_) gen_opt2_ = std::make_unique<AdamW>(m.dit.params(), AdamWConfig{st.learning_rate, 0.9, 0.999, 1e-8, st.weight_decay});
  if (st.dmd && !fake_opt_) fake_opt_ = std::make_unique<AdamW>(m.scores.fake.params(), AdamWConfig{cfg_.score_training.fake_learning_rate});
  PhaseReport rep = run_phase("stage2", st.steps, kStage2Data, st.batch_size * st.grad_accum_steps, &st, gen_opt2_.get(),
                              st.dmd ? fake_opt_.get() : nullptr,
                              [&](int64_t s, std::span<const Sample> b) { return stage2_step(s, b); });
  if (!rep.extra.contains("interrupted") && cfg_.validation.clips > 0) {
    rep.extra["validation"] = validate_models({InferMode::kAr, InferMode::kChunking, InferMode::kAggregation});
  }
  return rep;
}

json Trainer::validate_models(const std::vector<InferMode>& modes) {
  const ValidationConfig& v = cfg_.validation;
  auto clips = make_eval_set(v.clips, v.frames, v.height, v.width, cfg_.data.degradation,
                             cfg_.data.synth, v.seed);
  json out = json::object();
  for (InferMode mode : modes) {
    StreamOptions opt;
    opt.mode = mode;
    opt.seed = cfg_.seed;
    out[to_string(mode)] = evaluate(models_->generator(), clips, opt).to_json();
  }
  return out;
}

json Trainer::curriculum() {
  json reports = json::array(), timing = json::object();
  // Resume after the last completed phase.
  int first = 0;
  for (int p = 3; p >= 0; --p) {
    if (phase_done(kPhases[p])) {
      load_phase(kPhases[p]);
      first = p + 1;
      break;
    }
  }
  for (int p = first; p < 4; ++p) {
    PhaseReport r;
    switch (p) {
      case 0: r = pretrain_vae(); break;
      case 1: r = stage1(); break;
      case 2: r = pretrain_scores(); break;
      case 3: r = stage2(); break;
    }
    reports.push_back(r.to_json());
    timing[r.phase] = r.seconds;
    if (r.extra.contains("interrupted")) break;
  }
  json summary = {{"config_hash", cfg_hash_}, {"seed", cfg_.seed}, {"phases", reports}};
  std::ofstream(out_ / "report.json") << summary.dump(1);
  // Wall-clock numbers live apart from the report so reruns hash identically.
  std::ofstream(out_ / "timing.json") << json{{"seconds", timing}}.dump(1);
  return summary;
}

}  // namespace arvsr
