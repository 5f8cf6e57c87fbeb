#include "arvsr/guidance/guidance.hpp"

#include <cmath>
#include <sstream>

#include "arvsr/core/errors.hpp"
#include "arvsr/core/image.hpp"

namespace arvsr {

namespace {

// Adaptive average pooling from a gh x gw grid to an og x og grid, as a matrix [og*og, gh*gw].
Tensor pool_matrix(int64_t gh, int64_t gw, int64_t og, DType dt) {
  std::vector<double> m(og * og * gh * gw, 0.0);
  for (int64_t oy = 0; oy < og; ++oy) {
    const int64_t y0 = oy * gh / og, y1 = std::max(y0 + 1, ((oy + 1) * gh + og - 1) / og);
    for (int64_t ox = 0; ox < og; ++ox) {
      const int64_t x0 = ox * gw / og, x1 = std::max(x0 + 1, ((ox + 1) * gw + og - 1) / og);
      const double w = 1.0 / static_cast<double>((y1 - y0) * (x1 - x0));
      for (int64_t y = y0; y < y1; ++y)
        for (int64_t x = x0; x < x1; ++x) m[(oy * og + ox) * gh * gw + y * gw + x] = w;
    }
  }
  return Tensor::from_data({og * og, gh * gw}, std::move(m), dt);
}

int64_t grid_side(int tokens) {
  const auto s = static_cast<int64_t>(std::llround(std::sqrt(static_cast<double>(tokens))));
  if (s * s != tokens) throw ConfigError("prompt_tokens must be a perfect square");
  return s;
}

}  // namespace

std::vector<int64_t> KeyframeSelector::select(int64_t frames) const {
  if (frames < 1) throw ShapeError("cannot select key frames from an empty video");
  switch (kind) {
    case Kind::kMiddle: return {frames / 2};
    case Kind::kFirst: return {0};
    case Kind::kLast: return {frames - 1};
    case Kind::kIndices: {
      if (indices.empty()) throw ConfigError("empty key frame list");
      for (int64_t i : indices) {
        if (i < 0 || i >= frames) throw ShapeError("key frame index " + std::to_string(i) + " out of range");
      }
      return indices;
    }
  }
  return {};
}

KeyframeSelector KeyframeSelector::parse(const std::string& s) {
  KeyframeSelector k;
  if (s == "middle") return k;
  if (s == "first") {
    k.kind = Kind::kFirst;
    return k;
  }
  if (s == "last") {
    k.kind = Kind::kLast;
    return k;
  }
  k.kind = Kind::kIndices;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      k.indices.push_back(std::stoll(item));
    } catch (const std::exception&) {
      throw ConfigError("bad key frame selector '" + s + "'");
    }
  }
  if (k.indices.empty()) throw ConfigError("bad key frame selector '" + s + "'");
  return k;
}

PromptMode parse_prompt_mode(const std::string& s) {
  if (s == "joint") return PromptMode::kJoint;
  if (s == "separate") return PromptMode::kSeparate;
  if (s == "none") return PromptMode::kNone;
  throw ConfigError("prompt mode must be joint, separate or none, got '" + s + "'");
}

std::string to_string(PromptMode m) {
  switch (m) {
    case PromptMode::kJoint: return "joint";
    case PromptMode::kSeparate: return "separate";
    case PromptMode::kNone: return "none";
  }
  return "?";
}

GuidanceEncoder::GuidanceEncoder(GuidanceConfig cfg, uint64_t seed) : cfg_(cfg) {
  if (cfg_.prompt_tokens > 0) grid_side(cfg_.prompt_tokens);
  Rng rng(seed, 0x6775);
  Conv3dOptions o;
  o.stride = {1, 2, 2};
  o.pad_h = o.pad_w = 1;
  int64_t cin = 3;
  for (int i = 0; i < 4; ++i) {
    convs_[i] = Conv3d::make(params_, "enc.conv" + std::to_string(i), cin, cfg_.channels[i], {1, 3, 3}, o, rng, 1.0, cfg_.dtype);
    cin = cfg_.channels[i];
  }
  proj_ = Linear::make(params_, "enc.proj", cin, cfg_.model_dim, rng, 1.0, true, cfg_.dtype);
}

Tensor GuidanceEncoder::empty_prompt() const { return Tensor::zeros({0, cfg_.model_dim}, cfg_.dtype); }

Tensor GuidanceEncoder::encode_frame(const Tensor& frame) const {
  if (frame.rank() != 5 || frame.size(0) != 1 || frame.size(1) != 3 || frame.size(2) != 1) {
    throw ShapeError("key frame must be [1,3,1,h,w], got " + shape_str(frame.shape()));
  }
  if (cfg_.prompt_tokens == 0) return empty_prompt();
  Tensor x = resize_bilinear(frame, frame.size(3) * cfg_.encode_scale, frame.size(4) * cfg_.encode_scale);
  for (const auto& conv : convs_) x = silu(conv(x));
  const int64_t c = x.size(1), gh = x.size(3), gw = x.size(4);
  Tensor feats = transpose(reshape(x, {c, gh * gw}), 0, 1);  // [S, C]
  Tensor pooled = matmul(pool_matrix(gh, gw, grid_side(cfg_.prompt_tokens), x.dtype()), feats);
  return proj_(layer_norm(pooled));
}

PromptEmbedding GuidanceEncoder::extract(const Tensor& lr_video, const KeyframeSelector& selector) const {
  if (!lr_video.defined() || lr_video.rank() != 5 || lr_video.size(2) < 1) throw ShapeError("extract_prompt: empty LR video");
  ++calls_;
  PromptEmbedding p;
  p.source_frames = selector.select(lr_video.size(2));
  Tensor acc;
  for (int64_t f : p.source_frames) {
    Tensor e = encode_frame(slice(lr_video, 2, f, f + 1));
    acc = acc.defined() ? add(acc, e) : e;
  }
  p.tokens = p.source_frames.size() == 1 ? acc : mul_scalar(acc, 1.0 / static_cast<double>(p.source_frames.size()));
  return p;
}

void GuidanceEncoder::save(const std::filesystem::path& dir) const {
  params_.save(dir, {{"kind", "guidance"},
                     {"model_dim", cfg_.model_dim},
                     {"prompt_tokens", cfg_.prompt_tokens},
                     {"channels", cfg_.channels},
                     {"encode_scale", cfg_.encode_scale}});
}

void GuidanceEncoder::load(const std::filesystem::path& dir) {
  nlohmann::json meta = params_.load(dir);
  if (meta.value("prompt_tokens", -1) != cfg_.prompt_tokens || meta.value("model_dim", -1) != cfg_.model_dim) {
    throw DataError("guidance checkpoint does not match the configuration");
  }
}

PromptProvider::PromptProvider(const GuidanceEncoder& enc, PromptMode mode, const Tensor& lr_video, KeyframeSelector selector)
    : enc_(enc), mode_(mode), lr_video_(lr_video), selector_(std::move(selector)) {
  if (mode_ == PromptMode::kJoint && !lr_video_.defined()) throw ConfigError("joint prompt mode needs the LR video");
}

const Tensor& PromptProvider::prompt_for(int64_t chunk, const Tensor& lr_chunk) {
  changed_ = false;
  switch (mode_) {
    case PromptMode::kJoint:
      if (!current_.defined()) {
        current_ = enc_.extract(lr_video_, selector_).tokens;
        changed_ = true;
      }
      break;
    case PromptMode::kNone:
      if (!current_.defined()) {
        current_ = enc_.empty_prompt();
        changed_ = true;
      }
      break;
    case PromptMode::kSeparate:
      if (chunk != current_chunk_) {
        current_ = enc_.extract(lr_chunk, KeyframeSelector{}).tokens;
        changed_ = true;
      }
      break;
  }
  current_chunk_ = chunk;
  return current_;
}

}  // namespace arvsr
