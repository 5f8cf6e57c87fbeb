#include "arvsr/dit/dit.hpp"

#include <cmath>
#include <fstream>

#include "arvsr/core/errors.hpp"

namespace arvsr {

void DiTConfig::validate() const {
  if (layers < 1 || heads < 1 || model_dim < 1 || model_dim % heads != 0) throw ConfigError("model_dim must divide into heads");
  if ((model_dim / heads) % 2 != 0) throw ConfigError("head_dim must be even for rotary embeddings");
  if (chunk_len < 1) throw ConfigError("chunk_len must be >= 1");
  if (cache_len < 0 && cache_len != kUnbounded) throw ConfigError("cache_len must be >= 0 or unbounded");
  if (t_star < 0.0 || t_star >= 1.0) throw ConfigError("t_star must lie in [0, 1)");
  if (patch_size < 1 || latent_channels < 1 || prompt_tokens < 0 || mlp_ratio < 1 || max_grid < 1) {
    throw ConfigError("invalid DiT config");
  }
}

nlohmann::json to_json(const DiTConfig& c) {
  return {{"layers", c.layers},
          {"heads", c.heads},
          {"model_dim", c.model_dim},
          {"chunk_len", c.chunk_len},
          {"cache_len", c.cache_len},
          {"t_star", c.t_star},
          {"patch_size", c.patch_size},
          {"latent_channels", c.latent_channels},
          {"prompt_tokens", c.prompt_tokens},
          {"mlp_ratio", c.mlp_ratio},
          {"rope_base", c.rope_base},
          {"max_grid", c.max_grid},
          {"cache_pre_rotation", c.cache_pre_rotation},
          {"dtype", c.dtype == DType::kF32 ? "f32" : "f64"}};
}

DiTConfig dit_config_from_json(const nlohmann::json& j) {
  DiTConfig c;
  try {
    c.layers = j.value("layers", c.layers);
    c.heads = j.value("heads", c.heads);
    c.model_dim = j.value("model_dim", c.model_dim);
    c.chunk_len = j.value("chunk_len", c.chunk_len);
    if (j.contains("cache_len") && j["cache_len"].is_string()) {
      if (j["cache_len"] != "inf") throw ConfigError("cache_len must be an integer or \"inf\"");
      c.cache_len = DiTConfig::kUnbounded;
    } else {
      c.cache_len = j.value("cache_len", c.cache_len);
    }
    c.t_star = j.value("t_star", c.t_star);
    c.patch_size = j.value("patch_size", c.patch_size);
    c.latent_channels = j.value("latent_channels", c.latent_channels);
    c.prompt_tokens = j.value("prompt_tokens", c.prompt_tokens);
    c.mlp_ratio = j.value("mlp_ratio", c.mlp_ratio);
    c.rope_base = j.value("rope_base", c.rope_base);
    c.max_grid = j.value("max_grid", c.max_grid);
    c.cache_pre_rotation = j.value("cache_pre_rotation", c.cache_pre_rotation);
    const std::string dt = j.value("dtype", std::string("f32"));
    if (dt != "f32" && dt != "f64") throw ConfigError("dtype must be f32 or f64");
    c.dtype = dt == "f64" ? DType::kF64 : DType::kF32;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("bad DiT config: ") + e.what());
  }
  c.validate();
  return c;
}

// ---------------------------------------------------------------------------

KVCache::KVCache(int layers, int max_frames) : layers_(layers), max_frames_(max_frames) {}

std::vector<int64_t> KVCache::positions() const {
  std::vector<int64_t> out;
  if (!layers_.empty()) {
    for (const auto& f : layers_[0]) out.push_back(f.pos);
  }
  return out;
}

std::pair<Tensor, Tensor> KVCache::gather(int layer) const {
  const auto& frames = layers_.at(layer);
  if (frames.empty()) return {};
  if (frames.size() == 1) return {frames[0].k, frames[0].v};
  std::vector<Tensor> ks, vs;
  for (const auto& f : frames) {
    ks.push_back(f.k);
    vs.push_back(f.v);
  }
  return {concat(ks, 0), concat(vs, 0)};
}

std::vector<int64_t> KVCache::token_positions(int layer, int64_t tokens_per_frame) const {
  std::vector<int64_t> out;
  for (const auto& f : layers_.at(layer)) out.insert(out.end(), tokens_per_frame, f.pos);
  return out;
}

void KVCache::append(int layer, int64_t pos_first, int64_t frames, const Tensor& k, const Tensor& v) {
  auto& dq = layers_.at(layer);
  if (!dq.empty() && dq.back().pos + 1 != pos_first) throw Error("cache positions must stay contiguous");
  if (k.size(0) % frames != 0) throw ShapeError("token count is not a multiple of the frame count");
  const int64_t per = k.size(0) / frames;
  for (int64_t f = 0; f < frames; ++f) {
    if (max_frames_ == 0) break;
    dq.push_back({pos_first + f, slice(k, 0, f * per, (f + 1) * per), slice(v, 0, f * per, (f + 1) * per)});
  }
  if (max_frames_ != DiTConfig::kUnbounded) {
    while (static_cast<int64_t>(dq.size()) > max_frames_) dq.pop_front();
  }
}

int64_t KVCache::elements() const {
  int64_t n = 0;
  for (const auto& dq : layers_)
    for (const auto& f : dq) n += f.k.numel() + f.v.numel();
  return n;
}

void KVCache::clear() {
  for (auto& dq : layers_) dq.clear();
}

int64_t PromptKV::elements() const {
  int64_t n = 0;
  for (size_t i = 0; i < k.size(); ++i) n += k[i].numel() + v[i].numel();
  return n;
}

// ---------------------------------------------------------------------------

Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v, const Tensor& bias) {
  if (q.rank() != 3 || k.rank() != 3 || v.rank() != 3 || q.size(1) != k.size(1) || q.size(2) != k.size(2) ||
      k.shape() != v.shape()) {
    throw ShapeError("attention shape mismatch: q " + shape_str(q.shape()) + " k " + shape_str(k.shape()) + " v " +
                     shape_str(v.shape()));
  }
  const double scale = 1.0 / std::sqrt(static_cast<double>(q.size(2)));
  Tensor qh = permute(q, {1, 0, 2});   // [H, Tq, dh]
  Tensor kt = permute(k, {1, 2, 0});   // [H, dh, Tk]
  Tensor vh = permute(v, {1, 0, 2});   // [H, Tk, dh]
  Tensor s = mul_scalar(matmul(qh, kt), scale);
  if (bias.defined()) {
    if (bias.shape() != Shape{q.size(0), k.size(0)}) throw ShapeError("attention bias shape mismatch");
    s = add(s, bias);
  }
  return permute(matmul(softmax(s), vh), {1, 0, 2});
}

Tensor attention_block_causal(const Tensor& q, const Tensor& k_cur, const Tensor& v_cur, const Tensor& cache_k,
                              const Tensor& cache_v, const Tensor& cache_bias) {
  if (!cache_k.defined()) return attention(q, k_cur, v_cur);
  Tensor k = concat({cache_k, k_cur}, 0);
  Tensor v = concat({cache_v, v_cur}, 0);
  Tensor bias;
  if (cache_bias.defined()) {
    bias = concat({cache_bias, Tensor::zeros({q.size(0), k_cur.size(0)}, cache_bias.dtype())}, 1);
  }
  return attention(q, k, v, bias);
}

// ---------------------------------------------------------------------------

Dit::Dit(DiTConfig cfg, uint64_t seed) : cfg_(cfg) {
  cfg_.validate();
  Rng rng(seed, 0x6469);
  const int64_t d = cfg_.model_dim, p = cfg_.patch_size;
  const DType dt = cfg_.dtype;
  patch_in_ = Linear::make(params_, "patch_in", cfg_.latent_channels * p * p, d, rng, 1.0, true, dt);
  row_embed_ = params_.add("row_embed", Tensor::randn({cfg_.max_grid, d}, rng, 0.1, dt));
  col_embed_ = params_.add("col_embed", Tensor::randn({cfg_.max_grid, d}, rng, 0.1, dt));
  for (int l = 0; l < cfg_.layers; ++l) {
    const std::string n = "block" + std::to_string(l) + ".";
    Block b;
    b.q = Linear::make(params_, n + "attn.q", d, d, rng, 1.0, true, dt);
    b.k = Linear::make(params_, n + "attn.k", d, d, rng, 1.0, true, dt);
    b.v = Linear::make(params_, n + "attn.v", d, d, rng, 1.0, true, dt);
    b.o = Linear::make(params_, n + "attn.o", d, d, rng, 0.5, true, dt);
    b.cq = Linear::make(params_, n + "cross.q", d, d, rng, 1.0, true, dt);
    b.ck = Linear::make(params_, n + "cross.k", d, d, rng, 1.0, true, dt);
    b.cv = Linear::make(params_, n + "cross.v", d, d, rng, 1.0, true, dt);
    b.co = Linear::make(params_, n + "cross.o", d, d, rng, 0.5, true, dt);
    b.gate = params_.add(n + "cross.gate", Tensor::zeros({d}, dt));
    b.fc1 = Linear::make(params_, n + "mlp.fc1", d, cfg_.mlp_ratio * d, rng, 1.0, true, dt);
    b.fc2 = Linear::make(params_, n + "mlp.fc2", cfg_.mlp_ratio * d, d, rng, 0.5, true, dt);
    blocks_.push_back(std::move(b));
  }
  out_ = Linear::make(params_, "out", d, cfg_.latent_channels * p * p, rng, 0.0, true, dt);
}

ChunkContext Dit::new_context() const { return new_context(cfg_.cache_len); }

ChunkContext Dit::new_context(int cache_len) const {
  if (cache_len < 0 && cache_len != DiTConfig::kUnbounded) throw ConfigError("invalid cache length");
  ChunkContext ctx;
  ctx.cache = KVCache(cfg_.layers, cache_len);
  return ctx;
}

PromptKV Dit::project_prompt(const Tensor& prompt) const {
  if (prompt.rank() != 2 || prompt.size(1) != cfg_.model_dim) {
    throw ShapeError("prompt must be [P, " + std::to_string(cfg_.model_dim) + "], got " + shape_str(prompt.shape()));
  }
  ++prompt_projections_;
  PromptKV kv;
  kv.tokens = prompt.size(0);
  if (kv.tokens == 0) return kv;
  const int64_t dh = cfg_.model_dim / cfg_.heads;
  for (const auto& b : blocks_) {
    kv.k.push_back(reshape(b.ck(prompt), {kv.tokens, cfg_.heads, dh}));
    kv.v.push_back(reshape(b.cv(prompt), {kv.tokens, cfg_.heads, dh}));
  }
  return kv;
}

void Dit::set_prompt(ChunkContext& ctx, const Tensor& prompt) const {
  ctx.prompt = project_prompt(prompt);
  ctx.has_prompt = true;
}

Tensor Dit::noisy_input(const Tensor& lr_latent, Rng& rng) const {
  Tensor eps = Tensor::randn(lr_latent.shape(), rng, 1.0, lr_latent.dtype());
  return add(mul_scalar(lr_latent, 1.0 - cfg_.t_star), mul_scalar(eps, cfg_.t_star));
}

Tensor Dit::embed(const Tensor& x_t, int64_t* grid_h, int64_t* grid_w) const {
  if (x_t.rank() != 5 || x_t.size(0) != 1 || x_t.size(1) != cfg_.latent_channels) {
    throw ShapeError("latent chunk must be [1," + std::to_string(cfg_.latent_channels) + ",n,h,w], got " +
                     shape_str(x_t.shape()));
  }
  const int64_t p = cfg_.patch_size, c = x_t.size(1), n = x_t.size(2), h = x_t.size(3), w = x_t.size(4);
  if (h % p != 0 || w % p != 0) throw ShapeError("latent extent must be a multiple of the patch size");
  const int64_t gh = h / p, gw = w / p;
  if (gh > cfg_.max_grid || gw > cfg_.max_grid) throw ShapeError("latent grid exceeds the spatial embedding table");
  Tensor t = reshape(x_t, {c, n, gh, p, gw, p});
  t = permute(t, {1, 2, 4, 0, 3, 5});
  t = reshape(t, {n * gh * gw, c * p * p});
  Tensor x = reshape(patch_in_(t), {n, gh, gw, cfg_.model_dim});
  x = add(x, reshape(slice(row_embed_, 0, 0, gh), {gh, 1, cfg_.model_dim}));
  x = add(x, slice(col_embed_, 0, 0, gw));
  *grid_h = gh;
  *grid_w = gw;
  return reshape(x, {n * gh * gw, cfg_.model_dim});
}

Tensor Dit::unembed(const Tensor& tokens, int64_t n, int64_t gh, int64_t gw) const {
  const int64_t p = cfg_.patch_size, c = cfg_.latent_channels;
  Tensor t = reshape(out_(layer_norm(tokens)), {n, gh, gw, c, p, p});
  t = permute(t, {3, 0, 1, 4, 2, 5});
  return reshape(t, {1, c, n, gh * p, gw * p});
}

Tensor Dit::cross(const Block& b, int layer, const Tensor& h, const PromptKV& prompt) const {
  const int64_t t = h.size(0), dh = cfg_.model_dim / cfg_.heads;
  Tensor q = reshape(b.cq(layer_norm(h)), {t, cfg_.heads, dh});
  Tensor att = reshape(attention(q, prompt.k.at(layer), prompt.v.at(layer)), {t, cfg_.model_dim});
  return mul(b.co(att), b.gate);
}

Tensor Dit::mlp(const Block& b, const Tensor& h) const { return b.fc2(silu(b.fc1(layer_norm(h)))); }

Tensor Dit::forward_chunk(const Tensor& x_t, ChunkContext& ctx, const Tensor* skip) const {
  if (!ctx.has_prompt) throw Error("prompt missing: call set_prompt before generating");
  if (ctx.cache.layers() != cfg_.layers) throw Error("context was not created by this model");
  ++forwards_;
  int64_t gh = 0, gw = 0;
  Tensor x = embed(x_t, &gh, &gw);
  const int64_t n = x_t.size(2), per = gh * gw, t = n * per, dh = cfg_.model_dim / cfg_.heads;
  std::vector<int64_t> pos(t);
  for (int64_t i = 0; i < t; ++i) pos[i] = ctx.next_frame + i / per;
  ctx.last_attended = ctx.cache.positions();
  for (int l = 0; l < cfg_.layers; ++l) {
    const Block& b = blocks_[l];
    Tensor hn = layer_norm(x);
    Tensor q = rotary_embed(reshape(b.q(hn), {t, cfg_.heads, dh}), pos, cfg_.rope_base);
    Tensor k_raw = reshape(b.k(hn), {t, cfg_.heads, dh});
    Tensor k = rotary_embed(k_raw, pos, cfg_.rope_base);
    Tensor v = reshape(b.v(hn), {t, cfg_.heads, dh});
    auto [ck, cv] = ctx.cache.gather(l);
    if (ck.defined() && cfg_.cache_pre_rotation) {
      ck = rotary_embed(ck, ctx.cache.token_positions(l, per), cfg_.rope_base);
    }
    Tensor att = attention_block_causal(q, k, v, ck, cv);
    x = add(x, b.o(reshape(att, {t, cfg_.model_dim})));
    if (ctx.prompt.tokens > 0) x = add(x, cross(b, l, x, ctx.prompt));
    x = add(x, mlp(b, x));
    ctx.cache.append(l, ctx.next_frame, n, cfg_.cache_pre_rotation ? k_raw : k, v);
  }
  ++ctx.next_chunk;
  ctx.next_frame += n;
  return add(skip ? *skip : x_t, unembed(x, n, gh, gw));
}

Tensor Dit::generate_chunk(const Tensor& lr_latent, ChunkContext& ctx, Rng& rng) const {
  if (lr_latent.rank() != 5 || lr_latent.size(2) != cfg_.chunk_len) {
    throw ShapeError("chunk must have exactly " + std::to_string(cfg_.chunk_len) + " latent frames, got " +
                     shape_str(lr_latent.shape()));
  }
  return forward_chunk(noisy_input(lr_latent, rng), ctx, &lr_latent);
}

Tensor Dit::forward_full(const Tensor& x_t, const PromptKV& prompt, int chunk_len, int window, int64_t first_frame) const {
  if (chunk_len < 1) throw ShapeError("chunk_len must be >= 1");
  ++forwards_;
  int64_t gh = 0, gw = 0;
  Tensor x = embed(x_t, &gh, &gw);
  const int64_t n = x_t.size(2), per = gh * gw, t = n * per, dh = cfg_.model_dim / cfg_.heads;
  std::vector<int64_t> pos(t);
  for (int64_t i = 0; i < t; ++i) pos[i] = first_frame + i / per;
  std::vector<double> mask(t * t, 0.0);
  for (int64_t i = 0; i < t; ++i) {
    const int64_t fi = i / per, chunk = fi / chunk_len, start = chunk * chunk_len;
    for (int64_t j = 0; j < t; ++j) {
      const int64_t fj = j / per;
      const bool visible = fj / chunk_len <= chunk && (window == DiTConfig::kUnbounded || fj >= start - window);
      if (!visible) mask[i * t + j] = kMaskedLogit;
    }
  }
  Tensor bias = Tensor::from_data({t, t}, std::move(mask), cfg_.dtype);
  for (int l = 0; l < cfg_.layers; ++l) {
    const Block& b = blocks_[l];
    Tensor hn = layer_norm(x);
    Tensor q = rotary_embed(reshape(b.q(hn), {t, cfg_.heads, dh}), pos, cfg_.rope_base);
    Tensor k = rotary_embed(reshape(b.k(hn), {t, cfg_.heads, dh}), pos, cfg_.rope_base);
    Tensor v = reshape(b.v(hn), {t, cfg_.heads, dh});
    x = add(x, b.o(reshape(attention(q, k, v, bias), {t, cfg_.model_dim})));
    if (prompt.tokens > 0) x = add(x, cross(b, l, x, prompt));
    x = add(x, mlp(b, x));
  }
  return add(x_t, unembed(x, n, gh, gw));
}

void Dit::reset_counters() const {
  forwards_ = 0;
  prompt_projections_ = 0;
}

void Dit::save(const std::filesystem::path& dir, const nlohmann::json& extra) const {
  nlohmann::json meta = {{"kind", "dit"}, {"config", to_json(cfg_)}};
  if (!extra.is_null()) meta["extra"] = extra;
  params_.save(dir, meta);
}

void Dit::load(const std::filesystem::path& dir) {
  nlohmann::json meta = params_.load(dir);
  if (!meta.contains("config") || to_json(dit_config_from_json(meta["config"])) != to_json(cfg_)) {
    throw DataError("DiT checkpoint config does not match the model");
  }
}

void Dit::load_any_schedule(const std::filesystem::path& dir) {
  nlohmann::json meta = params_.load(dir);
  if (!meta.contains("config")) throw DataError("DiT checkpoint has no config");
  DiTConfig saved = dit_config_from_json(meta["config"]);
  saved.chunk_len = cfg_.chunk_len;
  saved.cache_len = cfg_.cache_len;
  if (to_json(saved) != to_json(cfg_)) throw DataError("DiT checkpoint config does not match the model");
}

}  // namespace arvsr
