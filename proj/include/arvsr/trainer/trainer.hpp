#pragma once

#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "arvsr/core/optim.hpp"
#include "arvsr/pipeline/pipeline.hpp"
#include "arvsr/trainer/config.hpp"

namespace arvsr {

struct Models {
  Vae vae;
  Dit dit;
  GuidanceEncoder guidance;
  ScorePair scores;

  explicit Models(const RunConfig& cfg);
  Generator generator() const { return {vae, dit, guidance}; }
  void save(const std::filesystem::path& dir) const;
  void load(const std::filesystem::path& dir);
};

// One LQ-HQ training pair.
struct Sample {
  Tensor hr, lr;  // [1,3,T,H,W] and [1,3,T,H/4,W/4]
};

// Deterministic sample for (phase stream, step, index within the step).
Sample make_sample(const RunConfig& cfg, const StageConfig& stage, uint64_t stream, int64_t step, int index);

struct StepLosses {
  int64_t step = 0;
  double l_mse = 0, l_dists = 0, l_temp = 0, l_dmd = 0, l_fake_score = 0;
  double total = 0;
  double grad_norm = 0;
};

inline constexpr const char* kLossCsvHeader = "step,l_mse,l_dists,l_temp,l_dmd,l_fake_score";

struct PhaseReport {
  std::string phase;
  int64_t steps = 0;
  uint64_t seed = 0;
  std::string config_hash;
  double seconds = 0.0;
  bool resumed = false;
  std::vector<StepLosses> losses;
  nlohmann::json extra;  // validation metrics and similar
  nlohmann::json to_json() const;
};

// Owns models and optimizers for a run rooted at `out_dir`. Phases write
// <phase>.ckpt when done; with checkpoint_every > 0 they also keep a
// <phase>.partial checkpoint that a later call resumes from.
class Trainer {
 public:
  Trainer(RunConfig cfg, std::filesystem::path out_dir);
  ~Trainer();

  const RunConfig& config() const { return cfg_; }
  Models& models() { return *models_; }
  const std::filesystem::path& out_dir() const { return out_; }

  PhaseReport pretrain_vae();
  PhaseReport stage1();
  // Pretrains the real score on HR latents, then copies it into the fake score.
  PhaseReport pretrain_scores();
  PhaseReport stage2();
  // Runs every phase not yet completed; writes report.json.
  nlohmann::json curriculum();

  // Single optimizer steps over explicit batches (batch_size * grad_accum_steps samples).
  StepLosses stage1_step(int64_t step, std::span<const Sample> batch);
  StepLosses stage2_step(int64_t step, std::span<const Sample> batch);

  // Loads a completed phase checkpoint (vae, stage1, scores, stage2).
  void load_phase(const std::string& phase);
  bool phase_done(const std::string& phase) const;

  // Stops the running phase after the given number of steps (simulated interruption).
  void set_stop_after(std::optional<int64_t> steps) { stop_after_ = steps; }
  // Called after every step; used for progress output.
  void set_progress(std::function<void(const std::string&, const StepLosses&)> fn) { progress_ = std::move(fn); }

  nlohmann::json validate_models(const std::vector<InferMode>& modes = {InferMode::kAr});

 private:
  struct Phase;
  PhaseReport run_phase(const std::string& name, int64_t steps, uint64_t stream, int samples_per_step,
                        const StageConfig* stage, AdamW* opt, AdamW* extra_opt,
                        const std::function<StepLosses(int64_t, std::span<const Sample>)>& step_fn);
  void save_checkpoint(const std::filesystem::path& dir, const std::string& phase, int64_t step,
                       const std::vector<StepLosses>& losses, const AdamW* opt, const AdamW* extra_opt) const;
  int64_t load_checkpoint(const std::filesystem::path& dir, std::vector<StepLosses>* losses, AdamW* opt, AdamW* extra_opt);
  void freeze_for_generator_training();
  double generator_update(AdamW& opt, const StageConfig& stage);

  RunConfig cfg_;
  nlohmann::json cfg_json_;
  std::string cfg_hash_;
  std::filesystem::path out_;
  std::unique_ptr<Models> models_;
  std::unique_ptr<AdamW> gen_opt1_, gen_opt2_, fake_opt_;
  std::optional<int64_t> stop_after_;
  std::function<void(const std::string&, const StepLosses&)> progress_;
};

void write_loss_csv(const std::filesystem::path& path, const std::vector<StepLosses>& rows);

}  // namespace arvsr
