#pragma once

#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "arvsr/dit/dit.hpp"
#include "arvsr/guidance/guidance.hpp"
#include "arvsr/vae/vae.hpp"

namespace arvsr {

inline constexpr int kUpscale = 4;

enum class InferMode { kAr, kChunking, kAggregation };
InferMode parse_infer_mode(const std::string& s);
std::string to_string(InferMode m);

// Read-only model bundle used at inference. Several engines may share one.
struct Generator {
  const Vae& vae;
  const Dit& dit;
  const GuidanceEncoder& guidance;
};

struct StreamOptions {
  InferMode mode = InferMode::kAr;
  int overlap = 1;                   // aggregation: shared latent frames between neighbours
  std::optional<PromptMode> prompt;  // default: joint for ar, separate otherwise
  std::optional<int> cache_len;      // ar only; default: the model's M
  KeyframeSelector keyframes;        // joint prompt, over the first chunk's LR frames
  uint64_t seed = 0;
};

// Retained floating-point elements by category. Model weights are not counted.
struct MemoryLedger {
  int64_t cache = 0, buffers = 0, prompt = 0;
  int64_t peak_cache = 0, peak_buffers = 0, peak_prompt = 0;
  int64_t peak_total = 0;         // over every sample
  int64_t post_warmup_peak = 0;   // over samples once the cache is at capacity
  int64_t samples = 0;

  int64_t total() const { return cache + buffers + prompt; }
  void sample(bool warm);
  nlohmann::json to_json() const;
};

// Pixel-frame quota of chunk k under the causal 4n+1 -> n+1 mapping.
int64_t chunk_quota(int64_t chunk, int chunk_len);
// Number of chunks an ar/chunking run over `frames` LR frames performs.
int64_t chunk_count(int64_t frames, int chunk_len);

// Cross-fade weights over `frames` blended frames: (old, new) per frame, summing to 1.
std::vector<std::pair<double, double>> blend_weights(int64_t frames);

// Incremental LR -> HR engine. Frames go in as [1, 3, n, h, w] (h, w even) in
// temporal order; HR frames come out as [1, 3, m, 4h, 4w] as soon as their
// chunk is generated (m may be 0).
class StreamEngine {
 public:
  StreamEngine(Generator gen, StreamOptions opt);

  Tensor push_frames(const Tensor& lr);
  // Pads a trailing partial chunk with its last LR frame and flushes held frames.
  Tensor finish();

  const StreamOptions& options() const { return opt_; }
  int64_t consumed() const { return consumed_; }
  int64_t emitted() const { return emitted_; }
  int64_t chunks() const { return chunk_; }
  const MemoryLedger& ledger() const { return ledger_; }
  // Latent chunk outputs of the last run, kept only when requested.
  void keep_latents(bool keep) { keep_latents_ = keep; }
  const std::vector<Tensor>& latents() const { return latents_; }

 private:
  int64_t next_quota() const;
  int64_t retained_lr() const;  // LR frames a chunk keeps from its predecessor
  Tensor run_chunk(const Tensor& lr_chunk);
  Tensor emit(Tensor hr);
  void account(bool warm);

  Generator gen_;
  StreamOptions opt_;
  PromptMode prompt_mode_;
  int cache_len_;
  ChunkContext ctx_;
  std::optional<PromptProvider> prompts_;
  std::vector<Tensor> pending_;  // LR frames [1,3,1,h,w]
  Tensor held_;                  // aggregation: HR tail awaiting its blend partner
  int64_t h_ = -1, w_ = -1;
  int64_t consumed_ = 0, emitted_ = 0, chunk_ = 0;
  bool finished_ = false;
  MemoryLedger ledger_;
  bool keep_latents_ = false;
  std::vector<Tensor> latents_;
};

struct RunReport {
  InferMode mode = InferMode::kAr;
  int64_t frames_in = 0, frames_out = 0, chunks = 0, forwards = 0;
  double seconds = 0.0;
  MemoryLedger ledger;
  nlohmann::json to_json() const;
};

// Whole-video convenience wrapper over StreamEngine.
Tensor run_mode(Generator gen, const Tensor& lr_video, const StreamOptions& opt, RunReport* report = nullptr);

struct BenchRow {
  int64_t frames = 0;
  double seconds = 0.0;
  int64_t peak_elements = 0;
  int64_t chunks = 0;
};

struct BenchResult {
  std::vector<BenchRow> rows;
  double slope = 0.0, intercept = 0.0, r2 = 0.0;
  bool constant_memory = false;
  nlohmann::json to_json() const;
};

// Times run_mode on random LR clips of each length (best of `repeats`).
BenchResult bench(Generator gen, const std::vector<int64_t>& frame_counts, const StreamOptions& opt, int64_t lr_h,
                  int64_t lr_w, int repeats = 3);

// Least-squares fit y = a x + b; returns {a, b, r2}.
std::array<double, 3> linear_fit(const std::vector<double>& x, const std::vector<double>& y);

}  // namespace arvsr
