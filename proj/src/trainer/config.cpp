#include "arvsr/trainer/config.hpp"

#include <sstream>

#include "arvsr/core/errors.hpp"
#include "arvsr/core/hash.hpp"

namespace arvsr {

namespace {

using nlohmann::json;

json stage_json(const StageConfig& s) {
  return {{"frames", s.frames},
          {"height", s.height},
          {"width", s.width},
          {"window_h", s.window_h},
          {"window_w", s.window_w},
          {"batch_size", s.batch_size},
          {"grad_accum_steps", s.grad_accum_steps},
          {"steps", s.steps},
          {"learning_rate", s.learning_rate},
          {"weight_decay", s.weight_decay},
          {"grad_clip", s.grad_clip},
          {"rollout_chunks", s.rollout_chunks},
          {"fake_updates", s.fake_updates},
          {"dmd", s.dmd},
          {"patch", s.patch}};
}

StageConfig stage_from(const json& j, StageConfig s) {
  s.frames = j.value("frames", s.frames);
  s.height = j.value("height", s.height);
  s.width = j.value("width", s.width);
  s.window_h = j.value("window_h", s.window_h);
  s.window_w = j.value("window_w", s.window_w);
  s.batch_size = j.value("batch_size", s.batch_size);
  s.grad_accum_steps = j.value("grad_accum_steps", s.grad_accum_steps);
  s.steps = j.value("steps", s.steps);
  s.learning_rate = j.value("learning_rate", s.learning_rate);
  s.weight_decay = j.value("weight_decay", s.weight_decay);
  s.grad_clip = j.value("grad_clip", s.grad_clip);
  s.rollout_chunks = j.value("rollout_chunks", s.rollout_chunks);
  s.fake_updates = j.value("fake_updates", s.fake_updates);
  s.dmd = j.value("dmd", s.dmd);
  s.patch = j.value("patch", s.patch);
  return s;
}

void check_stage(const StageConfig& s, const DiTConfig& dit) {
  const std::string name = "stage" + std::to_string(s.stage);
  if (s.batch_size < 1 || s.grad_accum_steps < 1 || s.steps < 0) throw ConfigError(name + ": batch, accumulation and steps must be positive");
  if (s.learning_rate < 0 || s.weight_decay < 0 || s.grad_clip < 0) throw ConfigError(name + ": negative optimizer setting");
  if (s.height % kSpatialFactor || s.width % kSpatialFactor) throw ConfigError(name + ": clip extent must be a multiple of 8");
  if (s.window_h % kSpatialFactor || s.window_w % kSpatialFactor || s.window_h < kSpatialFactor || s.window_w < kSpatialFactor) {
    throw ConfigError(name + ": window must be a positive multiple of 8");
  }
  const int halo = 2 * kDecoderRadius * kSpatialFactor;
  if (s.patch && (s.window_h + halo > s.height || s.window_w + halo > s.width)) {
    throw ConfigError(name + ": window plus decoder halo does not fit in the clip");
  }
  const int chunks = s.stage == 1 ? 1 : s.rollout_chunks;
  if (chunks < 1) throw ConfigError(name + ": rollout_chunks must be positive");
  const int64_t want = pixel_frames_for(static_cast<int64_t>(chunks) * dit.chunk_len, true);
  if (s.frames != want) {
    throw ConfigError(name + ": clip must hold exactly " + std::to_string(chunks) + " chunk(s) = " + std::to_string(want) + " frames");
  }
  if (s.stage == 2 && s.dmd && s.rollout_chunks != 3) throw ConfigError("stage2: distribution matching uses three-chunk rollouts");
  if (s.fake_updates < 0) throw ConfigError(name + ": fake_updates must be non-negative");
}

// Every key of `over` must already exist in `base`; objects merge recursively.
void merge_known(json& base, const json& over, const std::string& path) {
  if (!over.is_object()) throw ConfigError("config section '" + path + "' must be an object");
  for (auto it = over.begin(); it != over.end(); ++it) {
    const std::string key = path.empty() ? it.key() : path + "." + it.key();
    if (!base.contains(it.key())) throw ConfigError("unknown config key '" + key + "'");
    json& slot = base[it.key()];
    if (slot.is_object()) {
      merge_known(slot, it.value(), key);
    } else {
      slot = it.value();
    }
  }
}

}  // namespace

RunConfig::RunConfig() {
  dit.latent_channels = 16;
  stage1.stage = 1;
  stage1.frames = 9;
  stage1.height = stage1.width = 64;
  stage1.window_h = stage1.window_w = 32;
  stage1.learning_rate = 5e-5;
  stage2.stage = 2;
  stage2.frames = 33;
  stage2.height = 32;
  stage2.width = 48;
  stage2.window_h = stage2.window_w = 16;
  // Batch 1 at desk scale: 1e-5 leaves the cache paths almost untouched in 200 steps.
  stage2.learning_rate = 1e-4;
  stage2.steps = 200;
  // The toy real score is a weak denoiser; at weight 1 DMD costs ~6 dB of fidelity.
  weights.dmd = 0.15;
  finalize();
}

void RunConfig::finalize() {
  dit.validate();
  vae.latent_channels = dit.latent_channels;
  vae.dtype = dit.dtype;
  guidance.model_dim = dit.model_dim;
  guidance.prompt_tokens = dit.prompt_tokens;
  guidance.dtype = dit.dtype;
  score.latent_channels = dit.latent_channels;
  score.dtype = dit.dtype;
  stage1.stage = 1;
  stage2.stage = 2;
  check_stage(stage1, dit);
  check_stage(stage2, dit);
  if (vae_training.steps < 0 || vae_training.learning_rate < 0) throw ConfigError("vae_training: negative setting");
  if (vae_training.height % kSpatialFactor || vae_training.width % kSpatialFactor ||
      (vae_training.frames - 1) % kTemporalFactor != 0) {
    throw ConfigError("vae_training: clip must be 4n+1 frames with extents divisible by 8");
  }
  if (score_training.steps < 0) throw ConfigError("score_training.steps must be non-negative");
  if (data.workers < 1 || data.queue_capacity < 1) throw ConfigError("data.workers and data.queue_capacity must be positive");
  if (data.synth.max_speed < 0) throw ConfigError("data.max_speed must be non-negative");
  if (validation.clips < 0 || validation.height % kSpatialFactor || validation.width % kSpatialFactor) {
    throw ConfigError("validation: extents must be multiples of 8");
  }
  if (checkpoint_every < 0) throw ConfigError("checkpoint_every must be non-negative");
}

json to_json(const RunConfig& c) {
  json dit = to_json(c.dit);
  return {
      {"seed", c.seed},
      {"dit", dit},
      {"vae",
       {{"enc_channels", c.vae.enc_channels}, {"dec_channels", c.vae.dec_channels}, {"kl_weight", c.vae.kl_weight}}},
      {"vae_training",
       {{"steps", c.vae_training.steps},
        {"learning_rate", c.vae_training.learning_rate},
        {"frames", c.vae_training.frames},
        {"height", c.vae_training.height},
        {"width", c.vae_training.width},
        {"stats_clips", c.vae_training.stats_clips}}},
      {"guidance", {{"channels", c.guidance.channels}, {"encode_scale", c.guidance.encode_scale}}},
      {"score", {{"width", c.score.width}, {"time_features", c.score.time_features}}},
      {"score_training",
       {{"steps", c.score_training.steps},
        {"learning_rate", c.score_training.learning_rate},
        {"fake_learning_rate", c.score_training.fake_learning_rate}}},
      {"loss", to_json(c.weights)},
      {"data",
       {{"degradation", to_json(c.data.degradation)},
        {"max_speed", c.data.synth.max_speed},
        {"workers", c.data.workers},
        {"queue_capacity", c.data.queue_capacity}}},
      {"stage1", stage_json(c.stage1)},
      {"stage2", stage_json(c.stage2)},
      {"validation",
       {{"clips", c.validation.clips},
        {"frames", c.validation.frames},
        {"height", c.validation.height},
        {"width", c.validation.width},
        {"seed", c.validation.seed}}},
      {"checkpoint_every", c.checkpoint_every},
  };
}

RunConfig run_config_from_json(const json& j) {
  RunConfig c;
  try {
    c.seed = j.value("seed", c.seed);
    if (j.contains("dit")) c.dit = dit_config_from_json(j.at("dit"));
    if (j.contains("vae")) {
      const json& v = j.at("vae");
      c.vae.enc_channels = v.value("enc_channels", c.vae.enc_channels);
      c.vae.dec_channels = v.value("dec_channels", c.vae.dec_channels);
      c.vae.kl_weight = v.value("kl_weight", c.vae.kl_weight);
    }
    if (j.contains("vae_training")) {
      const json& v = j.at("vae_training");
      c.vae_training.steps = v.value("steps", c.vae_training.steps);
      c.vae_training.learning_rate = v.value("learning_rate", c.vae_training.learning_rate);
      c.vae_training.frames = v.value("frames", c.vae_training.frames);
      c.vae_training.height = v.value("height", c.vae_training.height);
      c.vae_training.width = v.value("width", c.vae_training.width);
      c.vae_training.stats_clips = v.value("stats_clips", c.vae_training.stats_clips);
    }
    if (j.contains("guidance")) {
      const json& g = j.at("guidance");
      c.guidance.channels = g.value("channels", c.guidance.channels);
      c.guidance.encode_scale = g.value("encode_scale", c.guidance.encode_scale);
    }
    if (j.contains("score")) {
      const json& s = j.at("score");
      c.score.width = s.value("width", c.score.width);
      c.score.time_features = s.value("time_features", c.score.time_features);
    }
    if (j.contains("score_training")) {
      const json& s = j.at("score_training");
      c.score_training.steps = s.value("steps", c.score_training.steps);
      c.score_training.learning_rate = s.value("learning_rate", c.score_training.learning_rate);
      c.score_training.fake_learning_rate = s.value("fake_learning_rate", c.score_training.fake_learning_rate);
    }
    if (j.contains("loss")) c.weights = loss_weights_from_json(j.at("loss"));
    if (j.contains("data")) {
      const json& d = j.at("data");
      if (d.contains("degradation")) c.data.degradation = degradation_config_from_json(d.at("degradation"));
      c.data.synth.max_speed = d.value("max_speed", c.data.synth.max_speed);
      c.data.workers = d.value("workers", c.data.workers);
      c.data.queue_capacity = d.value("queue_capacity", c.data.queue_capacity);
    }
    if (j.contains("stage1")) c.stage1 = stage_from(j.at("stage1"), c.stage1);
    if (j.contains("stage2")) c.stage2 = stage_from(j.at("stage2"), c.stage2);
    if (j.contains("validation")) {
      const json& v = j.at("validation");
      c.validation.clips = v.value("clips", c.validation.clips);
      c.validation.frames = v.value("frames", c.validation.frames);
      c.validation.height = v.value("height", c.validation.height);
      c.validation.width = v.value("width", c.validation.width);
      c.validation.seed = v.value("seed", c.validation.seed);
    }
    c.checkpoint_every = j.value("checkpoint_every", c.checkpoint_every);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("bad run config: ") + e.what());
  }
  c.finalize();
  return c;
}

void apply_override(json& j, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError("override '" + assignment + "' is not key=value");
  const std::string path = assignment.substr(0, eq), text = assignment.substr(eq + 1);
  json* node = &j;
  std::stringstream ss(path);
  std::string part;
  std::vector<std::string> parts;
  while (std::getline(ss, part, '.')) parts.push_back(part);
  for (size_t i = 0; i < parts.size(); ++i) {
    if (!node->is_object() || !node->contains(parts[i])) throw ConfigError("unknown config key '" + path + "'");
    node = &(*node)[parts[i]];
  }
  json value = json::parse(text, nullptr, false);
  if (value.is_discarded()) value = text;
  *node = value;
}

json resolve_config(const json& file, const std::vector<std::string>& overrides) {
  json j = to_json(RunConfig{});
  if (!file.is_null()) merge_known(j, file, "");
  for (const auto& o : overrides) apply_override(j, o);
  // Round trip so the snapshot holds every derived default and passes validation.
  return to_json(run_config_from_json(j));
}

std::string config_hash(const json& j) { return sha256_hex(j.dump()); }

}  // namespace arvsr
