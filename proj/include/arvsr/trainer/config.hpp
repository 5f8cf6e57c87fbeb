#pragma once

#include <string>
#include <vector>

#include <json.hpp>

#include "arvsr/degrade/degrade.hpp"
#include "arvsr/dit/dit.hpp"
#include "arvsr/guidance/guidance.hpp"
#include "arvsr/losses/losses.hpp"
#include "arvsr/vae/vae.hpp"

namespace arvsr {

struct StageConfig {
  int stage = 1;
  int frames = 9, height = 64, width = 64;  // HR clip
  int window_h = 32, window_w = 32;         // pixel-space patch window
  int batch_size = 1;
  int grad_accum_steps = 1;
  int steps = 500;
  double learning_rate = 5e-5;
  double weight_decay = 0.0;
  double grad_clip = 1.0;  // global norm; 0 disables
  int rollout_chunks = 3;  // Stage II
  int fake_updates = 1;    // fake-score steps per generator step (Stage II)
  bool dmd = true;         // Stage II; false skips the score networks entirely
  bool patch = true;       // false: supervise the full decode instead of a window
};

struct VaeTraining {
  int steps = 1500;
  double learning_rate = 1e-3;
  int frames = 9, height = 32, width = 32;
  int stats_clips = 16;
};

struct ScoreTraining {
  int steps = 300;
  double learning_rate = 1e-3;
  double fake_learning_rate = 1e-3;
};

struct DataConfig {
  DegradationConfig degradation;
  SynthOptions synth;
  int workers = 1;
  int queue_capacity = 4;
};

struct ValidationConfig {
  int clips = 4;
  int frames = 33, height = 64, width = 64;
  uint64_t seed = 0x7a11;
};

// Everything a training run depends on. The DiT section owns the shared
// latent_channels / model_dim / prompt_tokens; the other models take them from it.
struct RunConfig {
  uint64_t seed = 0;
  DiTConfig dit;
  VaeConfig vae;
  VaeTraining vae_training;
  GuidanceConfig guidance;
  ScoreNetConfig score;
  ScoreTraining score_training;
  LossWeights weights;
  DataConfig data;
  StageConfig stage1, stage2;
  ValidationConfig validation;
  int checkpoint_every = 0;  // steps between partial checkpoints; 0 disables

  RunConfig();
  // Propagates shared fields and checks cross-section constraints.
  void finalize();
};

nlohmann::json to_json(const RunConfig& c);
RunConfig run_config_from_json(const nlohmann::json& j);

// Defaults, then `file` (every key must exist in the defaults), then dotted
// key=value overrides. Values parse as JSON, falling back to plain strings.
nlohmann::json resolve_config(const nlohmann::json& file, const std::vector<std::string>& overrides);
void apply_override(nlohmann::json& j, const std::string& assignment);

// SHA-256 of the compact JSON dump.
std::string config_hash(const nlohmann::json& j);

}  // namespace arvsr
