#pragma once

#include <atomic>
#include <deque>
#include <filesystem>
#include <vector>

#include <json.hpp>

#include "arvsr/core/nn.hpp"

namespace arvsr {

struct DiTConfig {
  int layers = 4;
  int heads = 4;
  int model_dim = 128;
  int chunk_len = 3;    // N, latent frames per chunk
  int cache_len = 3;    // M, latent frames retained; kUnbounded keeps everything
  double t_star = 0.25;  // fixed noise level of the one-step mapping
  int patch_size = 2;
  int latent_channels = 8;
  int prompt_tokens = 16;
  int mlp_ratio = 2;
  double rope_base = 10000.0;
  int max_grid = 128;  // spatial embedding table size, in patches
  bool cache_pre_rotation = false;  // cache raw keys and rotate on every read
  DType dtype = DType::kF32;

  static constexpr int kUnbounded = -1;
  void validate() const;
};

nlohmann::json to_json(const DiTConfig& cfg);
DiTConfig dit_config_from_json(const nlohmann::json& j);

// Rolling per-layer key/value store. Blocks are per latent frame and carry the
// absolute frame index they were computed at.
class KVCache {
 public:
  struct Frame {
    int64_t pos;
    Tensor k, v;  // [tokens_per_frame, heads, head_dim]
  };

  KVCache() = default;
  KVCache(int layers, int max_frames);

  bool empty() const { return layers_.empty() || layers_[0].empty(); }
  int max_frames() const { return max_frames_; }
  int layers() const { return static_cast<int>(layers_.size()); }
  int64_t frames() const { return layers_.empty() ? 0 : static_cast<int64_t>(layers_[0].size()); }
  std::vector<int64_t> positions() const;
  // Concatenated keys/values of one layer, oldest first; undefined when empty.
  std::pair<Tensor, Tensor> gather(int layer) const;
  std::vector<int64_t> token_positions(int layer, int64_t tokens_per_frame) const;
  // Appends frames [pos_first, pos_first + frames) and evicts the oldest beyond capacity.
  void append(int layer, int64_t pos_first, int64_t frames, const Tensor& k, const Tensor& v);
  int64_t elements() const;
  void clear();

 private:
  std::vector<std::deque<Frame>> layers_;
  int max_frames_ = 0;
};

// Per-layer cross-attention keys/values for one prompt.
struct PromptKV {
  std::vector<Tensor> k, v;  // [P, heads, head_dim] per layer
  int64_t tokens = 0;
  int64_t elements() const;
};

struct ChunkContext {
  KVCache cache;
  PromptKV prompt;
  bool has_prompt = false;
  int64_t next_chunk = 0;
  int64_t next_frame = 0;  // absolute latent index of the next chunk's first frame
  std::vector<int64_t> last_attended;  // cache positions seen by the most recent chunk
};

class Dit {
 public:
  explicit Dit(DiTConfig cfg = {}, uint64_t seed = 0);

  const DiTConfig& config() const { return cfg_; }
  ParamStore& params() { return params_; }
  const ParamStore& params() const { return params_; }

  ChunkContext new_context() const;
  // Context with a cache capacity other than the configured M (0 disables the cache).
  ChunkContext new_context(int cache_len) const;
  // prompt: [P, model_dim]; P may be zero (no guidance).
  PromptKV project_prompt(const Tensor& prompt) const;
  void set_prompt(ChunkContext& ctx, const Tensor& prompt) const;

  // x_t = (1 - t*) z + t* eps.
  Tensor noisy_input(const Tensor& lr_latent, Rng& rng) const;

  // One denoising forward over a chunk [1, C, n, h, w] whose first frame has
  // absolute index ctx.next_frame. Attends to ctx.cache, then rolls it forward.
  // The prediction is skip + residual; skip defaults to x_t.
  Tensor forward_chunk(const Tensor& x_t, ChunkContext& ctx, const Tensor* skip = nullptr) const;
  // noisy_input + forward_chunk for an N-frame LR latent chunk, skipping from
  // the clean LR latent so that an untrained model returns its conditioning.
  Tensor generate_chunk(const Tensor& lr_latent, ChunkContext& ctx, Rng& rng) const;

  // Whole sequence in one pass under a block-causal mask over chunks of
  // `chunk_len` frames; `window` limits each chunk to that many earlier frames
  // (kUnbounded for all). Positions match the streaming path.
  Tensor forward_full(const Tensor& x_t, const PromptKV& prompt, int chunk_len, int window = DiTConfig::kUnbounded,
                      int64_t first_frame = 0) const;

  int64_t forward_count() const { return forwards_.load(); }
  int64_t prompt_projections() const { return prompt_projections_.load(); }
  void reset_counters() const;

  void save(const std::filesystem::path& dir, const nlohmann::json& extra = {}) const;
  void load(const std::filesystem::path& dir);
  // Like load, but the checkpoint may differ in chunk_len / cache_len. Weights
  // do not depend on the chunk schedule, so one set serves every (M, N).
  void load_any_schedule(const std::filesystem::path& dir);

 private:
  struct Block {
    Linear q, k, v, o;
    Linear cq, ck, cv, co;
    Tensor gate;  // [D], zero-init
    Linear fc1, fc2;
  };

  Tensor embed(const Tensor& x_t, int64_t* grid_h, int64_t* grid_w) const;
  Tensor unembed(const Tensor& tokens, int64_t frames, int64_t gh, int64_t gw) const;
  Tensor cross(const Block& b, int layer, const Tensor& h, const PromptKV& prompt) const;
  Tensor mlp(const Block& b, const Tensor& h) const;

  DiTConfig cfg_;
  ParamStore params_;
  Linear patch_in_;
  Tensor row_embed_, col_embed_;  // [max_grid, D]
  std::vector<Block> blocks_;
  Linear out_;
  mutable std::atomic<int64_t> forwards_{0};
  mutable std::atomic<int64_t> prompt_projections_{0};
};

// Multi-head scaled dot-product attention. q: [Tq, H, dh]; k, v: [Tk, H, dh];
// bias: additive [Tq, Tk] or undefined.
Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v, const Tensor& bias = Tensor());

// Self-attention of the current chunk over [cache || current]. `cache_bias`
// ([Tq, Tcache]) can down-weight or mask cached keys.
Tensor attention_block_causal(const Tensor& q, const Tensor& k_cur, const Tensor& v_cur, const Tensor& cache_k,
                              const Tensor& cache_v, const Tensor& cache_bias = Tensor());

inline constexpr double kMaskedLogit = -1e9;

}  // namespace arvsr
