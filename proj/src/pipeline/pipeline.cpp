#include "arvsr/pipeline/pipeline.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>

#include "arvsr/core/errors.hpp"
#include "arvsr/core/image.hpp"
#include "arvsr/core/ops.hpp"

namespace arvsr {

namespace {

constexpr uint64_t kNoiseStream = 0x57e4;

int64_t elements_of(const std::vector<Tensor>& ts) {
  int64_t n = 0;
  for (const Tensor& t : ts) n += t.numel();
  return n;
}

}  // namespace

InferMode parse_infer_mode(const std::string& s) {
  if (s == "ar") return InferMode::kAr;
  if (s == "chunking") return InferMode::kChunking;
  if (s == "aggregation") return InferMode::kAggregation;
  throw ConfigError("unknown inference mode '" + s + "' (ar, chunking, aggregation)");
}

std::string to_string(InferMode m) {
  switch (m) {
    case InferMode::kAr: return "ar";
    case InferMode::kChunking: return "chunking";
    case InferMode::kAggregation: return "aggregation";
  }
  return "?";
}

void MemoryLedger::sample(bool warm) {
  peak_cache = std::max(peak_cache, cache);
  peak_buffers = std::max(peak_buffers, buffers);
  peak_prompt = std::max(peak_prompt, prompt);
  peak_total = std::max(peak_total, total());
  if (warm) post_warmup_peak = std::max(post_warmup_peak, total());
  ++samples;
}

nlohmann::json MemoryLedger::to_json() const {
  return {{"peak_cache", peak_cache},   {"peak_buffers", peak_buffers}, {"peak_prompt", peak_prompt},
          {"peak_total", peak_total},   {"post_warmup_peak", post_warmup_peak}, {"samples", samples}};
}

int64_t chunk_quota(int64_t chunk, int chunk_len) {
  return chunk == 0 ? pixel_frames_for(chunk_len, true) : pixel_frames_for(chunk_len, false);
}

int64_t chunk_count(int64_t frames, int chunk_len) {
  if (frames <= 0) return 0;
  const int64_t first = chunk_quota(0, chunk_len), rest = chunk_quota(1, chunk_len);
  if (frames <= first) return 1;
  return 1 + (frames - first + rest - 1) / rest;
}

std::vector<std::pair<double, double>> blend_weights(int64_t frames) {
  std::vector<std::pair<double, double>> w(frames);
  for (int64_t i = 0; i < frames; ++i) {
    const double wn = static_cast<double>(i + 1) / static_cast<double>(frames + 1);
    w[i] = {1.0 - wn, wn};
  }
  return w;
}

StreamEngine::StreamEngine(Generator gen, StreamOptions opt) : gen_(gen), opt_(std::move(opt)) {
  const int n = gen_.dit.config().chunk_len;
  if (opt_.mode == InferMode::kAggregation && (opt_.overlap < 1 || opt_.overlap >= n)) {
    throw ConfigError("aggregation overlap must be in [1, chunk_len)");
  }
  prompt_mode_ = opt_.prompt.value_or(opt_.mode == InferMode::kAr ? PromptMode::kJoint : PromptMode::kSeparate);
  if (opt_.mode == InferMode::kAr) {
    cache_len_ = opt_.cache_len.value_or(gen_.dit.config().cache_len);
  } else {
    if (opt_.cache_len && *opt_.cache_len != 0) throw ConfigError(to_string(opt_.mode) + " mode runs without a cache");
    cache_len_ = 0;
  }
  ctx_ = gen_.dit.new_context(cache_len_);
}

int64_t StreamEngine::retained_lr() const {
  return opt_.mode == InferMode::kAggregation ? kTemporalFactor * opt_.overlap : 0;
}

int64_t StreamEngine::next_quota() const {
  // Aggregation chunks re-read the overlapping LR frames of their predecessor.
  return chunk_quota(chunk_, gen_.dit.config().chunk_len);
}

Tensor StreamEngine::push_frames(const Tensor& lr) {
  if (finished_) throw Error("stream already finished");
  if (lr.rank() != 5 || lr.size(0) != 1 || lr.size(1) != 3) throw ShapeError("LR frames must be [1,3,n,h,w], got " + shape_str(lr.shape()));
  if (h_ < 0) {
    const int64_t h = lr.size(3), w = lr.size(4);
    if (h < 1 || w < 1 || (kUpscale * h) % kSpatialFactor != 0 || (kUpscale * w) % kSpatialFactor != 0) {
      throw ShapeError("LR frame size must be even, got " + std::to_string(h) + "x" + std::to_string(w));
    }
    h_ = h;
    w_ = w;
  } else if (lr.size(3) != h_ || lr.size(4) != w_) {
    throw ShapeError("frame size changed mid-stream");
  }
  std::vector<Tensor> out;
  for (int64_t t = 0; t < lr.size(2); ++t) {
    pending_.push_back(slice(lr, 2, t, t + 1));
    ++consumed_;
    if (static_cast<int64_t>(pending_.size()) == next_quota()) {
      Tensor hr = run_chunk(concat(std::span<const Tensor>(pending_), 2));
      const int64_t keep = retained_lr();
      pending_.erase(pending_.begin(), pending_.end() - keep);
      out.push_back(emit(hr));
    }
  }
  out.erase(std::remove_if(out.begin(), out.end(), [](const Tensor& t) { return t.size(2) == 0; }), out.end());
  if (out.empty()) return Tensor::zeros({1, 3, 0, kUpscale * h_, kUpscale * w_}, DType::kF32);
  return out.size() == 1 ? out[0] : concat(std::span<const Tensor>(out), 2);
}

Tensor StreamEngine::finish() {
  if (finished_) throw Error("stream already finished");
  finished_ = true;
  std::vector<Tensor> out;
  const int64_t fresh = static_cast<int64_t>(pending_.size()) - (chunk_ > 0 ? retained_lr() : 0);
  if (fresh > 0) {
    const int64_t quota = next_quota(), real = static_cast<int64_t>(pending_.size());
    while (static_cast<int64_t>(pending_.size()) < quota) pending_.push_back(pending_.back());
    Tensor hr = run_chunk(concat(std::span<const Tensor>(pending_), 2));
    pending_.clear();
    // Padded frames are generated but never emitted.
    out.push_back(emit(slice(hr, 2, 0, hr.size(2) - (quota - real))));
  }
  pending_.clear();
  if (held_.defined()) {
    out.push_back(held_);
    emitted_ += held_.size(2);
    held_ = Tensor();
  }
  if (h_ < 0) return Tensor();
  out.erase(std::remove_if(out.begin(), out.end(), [](const Tensor& t) { return t.size(2) == 0; }), out.end());
  if (out.empty()) return Tensor::zeros({1, 3, 0, kUpscale * h_, kUpscale * w_}, DType::kF32);
  return out.size() == 1 ? out[0] : concat(std::span<const Tensor>(out), 2);
}

void StreamEngine::account(bool warm) {
  ledger_.cache = ctx_.cache.elements();
  ledger_.prompt = ctx_.has_prompt ? ctx_.prompt.elements() : 0;
  ledger_.buffers = elements_of(pending_) + (held_.defined() ? held_.numel() : 0);
  ledger_.sample(warm);
}

Tensor StreamEngine::run_chunk(const Tensor& lr_chunk) {
  NoGradGuard no_grad;
  const DiTConfig& dc = gen_.dit.config();
  const int n = dc.chunk_len;
  const bool head = chunk_ == 0;
  // Aggregation chunks advance by N - overlap latent frames.
  const int64_t first_latent = chunk_ * (opt_.mode == InferMode::kAggregation ? n - opt_.overlap : n);

  if (!prompts_) {
    // A stream has no future frames, so the joint prompt comes from the first chunk.
    prompts_.emplace(gen_.guidance, prompt_mode_, lr_chunk, opt_.keyframes);
  }
  if (opt_.mode != InferMode::kAr) {
    ctx_ = gen_.dit.new_context(0);
    ctx_.next_chunk = chunk_;
  }
  ctx_.next_frame = first_latent;
  const Tensor& prompt = prompts_->prompt_for(chunk_, lr_chunk);
  if (prompts_->changed() || !ctx_.has_prompt) gen_.dit.set_prompt(ctx_, prompt);

  const bool warm = cache_len_ != DiTConfig::kUnbounded && chunk_ * n >= cache_len_;
  account(warm);

  Tensor up = resize_bilinear(lr_chunk, kUpscale * h_, kUpscale * w_).to(dc.dtype);
  Tensor z = gen_.vae.encode(up, head);
  Rng rng = Rng(opt_.seed, kNoiseStream).fork(static_cast<uint64_t>(chunk_));
  Tensor out = gen_.dit.generate_chunk(z, ctx_, rng);
  if (keep_latents_) latents_.push_back(out);
  Tensor hr = gen_.vae.decode(out, head);
  ++chunk_;
  account(cache_len_ != DiTConfig::kUnbounded && chunk_ * n >= cache_len_);
  return hr;
}

Tensor StreamEngine::emit(Tensor hr) {
  if (opt_.mode != InferMode::kAggregation) {
    emitted_ += hr.size(2);
    return hr;
  }
  const int64_t ov = kTemporalFactor * opt_.overlap;
  std::vector<Tensor> parts;
  Tensor body = hr;
  if (held_.defined()) {
    const int64_t m = std::min(ov, hr.size(2));
    const auto w = blend_weights(ov);
    for (int64_t i = 0; i < m; ++i) {
      Tensor a = slice(held_, 2, i, i + 1), b = slice(hr, 2, i, i + 1);
      parts.push_back(add(mul_scalar(a, w[i].first), mul_scalar(b, w[i].second)));
    }
    body = slice(hr, 2, m, hr.size(2));
    held_ = Tensor();
  }
  // Keep the tail that the next chunk will overlap, unless the stream is done.
  if (!finished_ && body.size(2) >= ov) {
    parts.push_back(slice(body, 2, 0, body.size(2) - ov));
    held_ = slice(body, 2, body.size(2) - ov, body.size(2));
  } else {
    parts.push_back(body);
  }
  Tensor out = parts.size() == 1 ? parts[0] : concat(std::span<const Tensor>(parts), 2);
  emitted_ += out.size(2);
  return out;
}

nlohmann::json RunReport::to_json() const {
  return {{"mode", to_string(mode)}, {"frames_in", frames_in}, {"frames_out", frames_out}, {"chunks", chunks},
          {"forwards", forwards},    {"seconds", seconds},     {"memory", ledger.to_json()}};
}

Tensor run_mode(Generator gen, const Tensor& lr_video, const StreamOptions& opt, RunReport* report) {
  const auto t0 = std::chrono::steady_clock::now();
  const int64_t f0 = gen.dit.forward_count();
  StreamEngine eng(gen, opt);
  Tensor a = eng.push_frames(lr_video);
  Tensor b = eng.finish();
  Tensor out = a.size(2) == 0 ? b : (b.size(2) == 0 ? a : concat({a, b}, 2));
  if (report) {
    report->mode = opt.mode;
    report->frames_in = lr_video.size(2);
    report->frames_out = out.size(2);
    report->chunks = eng.chunks();
    report->forwards = gen.dit.forward_count() - f0;
    report->seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    report->ledger = eng.ledger();
  }
  return out;
}

std::array<double, 3> linear_fit(const std::vector<double>& x, const std::vector<double>& y) {
  if (x.size() != y.size() || x.size() < 2) throw ShapeError("linear_fit needs at least two matching points");
  const double n = static_cast<double>(x.size());
  double sx = 0, sy = 0;
  for (size_t i = 0; i < x.size(); ++i) {
    sx += x[i];
    sy += y[i];
  }
  const double mx = sx / n, my = sy / n;
  double sxx = 0, sxy = 0, syy = 0;
  for (size_t i = 0; i < x.size(); ++i) {
    sxx += (x[i] - mx) * (x[i] - mx);
    sxy += (x[i] - mx) * (y[i] - my);
    syy += (y[i] - my) * (y[i] - my);
  }
  if (sxx == 0.0) throw ShapeError("linear_fit over a single x value");
  const double a = sxy / sxx, b = my - a * mx;
  double ss_res = 0;
  for (size_t i = 0; i < x.size(); ++i) ss_res += std::pow(y[i] - (a * x[i] + b), 2);
  return {a, b, syy == 0.0 ? 1.0 : 1.0 - ss_res / syy};
}

nlohmann::json BenchResult::to_json() const {
  nlohmann::json rs = nlohmann::json::array();
  for (const auto& r : rows) {
    rs.push_back({{"frames", r.frames}, {"seconds", r.seconds}, {"peak_elements", r.peak_elements}, {"chunks", r.chunks}});
  }
  return {{"rows", rs}, {"slope", slope}, {"intercept", intercept}, {"r2", r2}, {"constant_memory", constant_memory}};
}

BenchResult bench(Generator gen, const std::vector<int64_t>& frame_counts, const StreamOptions& opt, int64_t lr_h,
                  int64_t lr_w, int repeats) {
  if (frame_counts.size() < 2) throw ConfigError("bench needs at least two frame counts");
  BenchResult res;
  std::vector<double> xs, ys;
  for (int64_t frames : frame_counts) {
    Rng rng(opt.seed, 0xbe4c);
    Tensor lr = Tensor::uniform({1, 3, frames, lr_h, lr_w}, rng, 0.0, 1.0, gen.dit.config().dtype);
    BenchRow row;
    row.frames = frames;
    row.seconds = 1e300;
    for (int r = 0; r < std::max(1, repeats); ++r) {
      RunReport rep;
      run_mode(gen, lr, opt, &rep);
      row.seconds = std::min(row.seconds, rep.seconds);
      row.peak_elements = rep.ledger.post_warmup_peak;
      row.chunks = rep.chunks;
    }
    xs.push_back(static_cast<double>(frames));
    ys.push_back(row.seconds);
    res.rows.push_back(row);
  }
  const auto fit = linear_fit(xs, ys);
  res.slope = fit[0];
  res.intercept = fit[1];
  res.r2 = fit[2];
  res.constant_memory = true;
  for (const auto& r : res.rows) res.constant_memory = res.constant_memory && r.peak_elements == res.rows[0].peak_elements;
  return res;
}

}  // namespace arvsr
