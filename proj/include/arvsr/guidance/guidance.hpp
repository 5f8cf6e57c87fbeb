#pragma once

#include <atomic>
#include <filesystem>
#include <string>
#include <vector>

#include "arvsr/core/nn.hpp"

namespace arvsr {

struct PromptEmbedding {
  Tensor tokens;  // [P, model_dim]
  std::vector<int64_t> source_frames;
};

struct KeyframeSelector {
  enum class Kind { kMiddle, kFirst, kLast, kIndices } kind = Kind::kMiddle;
  std::vector<int64_t> indices;  // for kIndices

  std::vector<int64_t> select(int64_t frames) const;
  static KeyframeSelector parse(const std::string& s);  // "middle", "first", "last", "0,4,8"
};

enum class PromptMode { kJoint, kSeparate, kNone };
PromptMode parse_prompt_mode(const std::string& s);
std::string to_string(PromptMode m);

struct GuidanceConfig {
  int model_dim = 128;
  int prompt_tokens = 16;  // a perfect square, or zero
  std::array<int, 4> channels{8, 16, 32, 32};
  int encode_scale = 4;  // LR frames are bilinearly upscaled by this factor first
  DType dtype = DType::kF32;
};

// Toy convolutional stand-in for a pretrained prompt encoder.
class GuidanceEncoder {
 public:
  explicit GuidanceEncoder(GuidanceConfig cfg = {}, uint64_t seed = 0);

  // frame: [1, 3, 1, h, w] LR frame in [0, 1] -> [P, model_dim].
  Tensor encode_frame(const Tensor& frame) const;
  // lr_video: [1, 3, T, h, w]. Mean over the selected key frames.
  PromptEmbedding extract(const Tensor& lr_video, const KeyframeSelector& selector = {}) const;
  Tensor empty_prompt() const;

  int64_t calls() const { return calls_.load(); }
  void reset_calls() const { calls_ = 0; }

  const GuidanceConfig& config() const { return cfg_; }
  ParamStore& params() { return params_; }
  const ParamStore& params() const { return params_; }
  void save(const std::filesystem::path& dir) const;
  void load(const std::filesystem::path& dir);

 private:
  GuidanceConfig cfg_;
  ParamStore params_;
  std::array<Conv3d, 4> convs_;
  Linear proj_;
  mutable std::atomic<int64_t> calls_{0};
};

// Serves the prompt for each chunk under a PromptMode, encoding lazily.
class PromptProvider {
 public:
  // `lr_video` is the full LR clip (joint mode reads its key frame); may be
  // undefined in separate/none modes.
  PromptProvider(const GuidanceEncoder& enc, PromptMode mode, const Tensor& lr_video, KeyframeSelector selector = {});

  // lr_chunk: the LR frames of chunk k ([1,3,n,h,w]); used in separate mode.
  const Tensor& prompt_for(int64_t chunk, const Tensor& lr_chunk);
  PromptMode mode() const { return mode_; }
  // True when prompt_for() returned a different tensor than for the previous chunk.
  bool changed() const { return changed_; }

 private:
  const GuidanceEncoder& enc_;
  PromptMode mode_;
  Tensor lr_video_;
  KeyframeSelector selector_;
  Tensor current_;
  int64_t current_chunk_ = -1;
  bool changed_ = false;
};

}  // namespace arvsr
