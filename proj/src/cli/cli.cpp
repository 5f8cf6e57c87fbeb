#include "arvsr/cli/cli.hpp"

#include <chrono>
#include <cstdlib>
#include <exception>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>
#include <thread>

#include <CLI11.hpp>

#include "arvsr/core/errors.hpp"
#include "arvsr/core/ops.hpp"
#include "arvsr/core/queue.hpp"
#include "arvsr/metrics/metrics.hpp"
#include "arvsr/pipeline/eval.hpp"
#include "arvsr/pipeline/video_io.hpp"

namespace arvsr {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

using Clock = std::chrono::steady_clock;

double since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

json read_json(const fs::path& p, bool is_config) {
  std::ifstream is(p);
  if (!is) {
    if (is_config) throw ConfigError("cannot open config " + p.string());
    throw DataError("cannot open " + p.string());
  }
  json j = json::parse(is, nullptr, false);
  if (j.is_discarded()) {
    if (is_config) throw ConfigError("config " + p.string() + " is not valid JSON");
    throw DataError(p.string() + " is not valid JSON");
  }
  return j;
}

void write_json(const fs::path& p, const json& j) {
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  std::ofstream os(p);
  if (!os) throw DataError("cannot write " + p.string());
  os << j.dump(1) << '\n';
}

void make_out_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec || !fs::is_directory(dir)) throw DataError("cannot create output directory " + dir.string());
}

std::vector<int64_t> parse_list(const std::string& s, char sep, const std::string& what) {
  std::vector<int64_t> out;
  std::stringstream ss(s);
  std::string part;
  while (std::getline(ss, part, sep)) {
    try {
      size_t used = 0;
      const long long v = std::stoll(part, &used);
      if (used != part.size() || v <= 0) throw std::invalid_argument(part);
      out.push_back(v);
    } catch (const std::exception&) {
      throw ConfigError("bad " + what + " '" + s + "'");
    }
  }
  if (out.empty()) throw ConfigError("empty " + what);
  return out;
}

// Run config from the checkpoint (when given) or the config file, then overrides and seed.
json resolve_run_config(const std::string& config_path, const std::optional<fs::path>& ckpt,
                        std::vector<std::string> overrides, std::optional<uint64_t> seed) {
  json base;
  if (ckpt) {
    if (!config_path.empty()) throw ConfigError("--config and --model are exclusive; the model carries its config");
    base = checkpoint_config(*ckpt);
  } else if (!config_path.empty()) {
    base = read_json(config_path, true);
  }
  if (seed) overrides.push_back("seed=" + std::to_string(*seed));
  return resolve_config(base, overrides);
}

void snapshot(const fs::path& out, const std::string& command, const json& config, uint64_t seed, const json& extra = {}) {
  json j = {{"command", command}, {"seed", seed}, {"config", config}, {"config_hash", config_hash(config)}};
  if (!extra.is_null()) j["options"] = extra;
  write_json(out / "config.json", j);
}

std::unique_ptr<Models> load_models(const RunConfig& cfg, const std::optional<fs::path>& ckpt) {
  auto m = std::make_unique<Models>(cfg);
  if (ckpt) m->load(*ckpt / "models");
  return m;
}

StreamOptions stream_options(const std::string& mode, int overlap, const std::string& prompt,
                             std::optional<int> cache_len, const std::string& keyframes, uint64_t seed) {
  StreamOptions o;
  o.mode = parse_infer_mode(mode);
  o.overlap = overlap;
  if (!prompt.empty()) o.prompt = parse_prompt_mode(prompt);
  o.cache_len = cache_len;
  o.keyframes = KeyframeSelector::parse(keyframes);
  o.seed = seed;
  return o;
}

json options_json(const StreamOptions& o) {
  return {{"mode", to_string(o.mode)},
          {"overlap", o.overlap},
          {"prompt", o.prompt ? to_string(*o.prompt) : "default"},
          {"cache_len", o.cache_len ? json(*o.cache_len) : json("default")},
          {"seed", o.seed}};
}

void progress_printer(Trainer& t, bool quiet) {
  if (quiet) return;
  t.set_progress([](const std::string& phase, const StepLosses& l) {
    if (l.step % 25 != 0) return;
    std::cerr << '[' << phase << "] step " << l.step << std::setprecision(5) << " total=" << l.total
              << " mse=" << l.l_mse << " temp=" << l.l_temp;
    if (l.l_dmd != 0.0 || l.l_fake_score != 0.0) std::cerr << " dmd=" << l.l_dmd << " fake=" << l.l_fake_score;
    std::cerr << '\n';
  });
}

// ---------------------------------------------------------------------------
// synth-data

struct SynthArgs {
  int64_t count = 8;
  std::string shape = "9x64x64";
  std::string degradation_config;
  double max_speed = 1.0;
  std::string out;
  std::optional<uint64_t> seed;
};

int cmd_synth(const SynthArgs& a) {
  SynthDataRequest req;
  if (a.count < 1) throw ConfigError("--count must be positive");
  const auto shape = parse_list(a.shape, 'x', "shape (want TxHxW)");
  if (shape.size() != 3) throw ConfigError("--shape must be TxHxW");
  req.count = a.count;
  req.frames = shape[0];
  req.height = shape[1];
  req.width = shape[2];
  if (req.height % kDegradeFactor || req.width % kDegradeFactor) throw ConfigError("--shape extents must be multiples of 4");
  if (!a.degradation_config.empty()) req.degradation = degradation_config_from_json(read_json(a.degradation_config, true));
  if (a.max_speed < 0) throw ConfigError("--max-speed must be non-negative");
  req.synth.max_speed = a.max_speed;
  req.seed = resolve_seed(a.seed).value_or(0);
  make_out_dir(a.out);
  const json cfg = {{"count", req.count},
                    {"shape", {req.frames, req.height, req.width}},
                    {"degradation", to_json(req.degradation)},
                    {"max_speed", req.synth.max_speed},
                    {"seed", req.seed}};
  snapshot(a.out, "synth-data", cfg, req.seed);
  const auto entries = synthesize_dataset(a.out, req);
  std::cout << "wrote " << entries.size() << " pairs to " << (fs::path(a.out) / "manifest.json").string() << '\n';
  return kExitOk;
}

// ---------------------------------------------------------------------------
// train

struct TrainArgs {
  std::string stage = "all";
  std::string config;
  std::vector<std::string> set;
  std::string out;
  bool resume = false;
  std::optional<int64_t> stop_after;
  std::optional<uint64_t> seed;
  bool quiet = false;
};

const std::vector<std::string> kAllPhases = {"vae", "stage1", "scores", "stage2"};

PhaseReport run_named_phase(Trainer& t, const std::string& p) {
  if (p == "vae") return t.pretrain_vae();
  if (p == "stage1") return t.stage1();
  if (p == "scores") return t.pretrain_scores();
  return t.stage2();
}

int cmd_train(const TrainArgs& a) {
  std::vector<std::string> phases;
  if (a.stage == "I" || a.stage == "1") {
    phases = {"vae", "stage1"};
  } else if (a.stage == "II" || a.stage == "2") {
    phases = {"scores", "stage2"};
  } else if (a.stage == "all") {
    phases = kAllPhases;
  } else {
    throw ConfigError("--stage must be I, II or all");
  }
  const json cfg_json = resolve_run_config(a.config, std::nullopt, a.set, resolve_seed(a.seed));
  const RunConfig cfg = run_config_from_json(cfg_json);
  make_out_dir(a.out);
  const fs::path out(a.out);
  snapshot(out, "train", cfg_json, cfg.seed, {{"stage", a.stage}, {"resume", a.resume}});

  Trainer t(cfg, out);
  progress_printer(t, a.quiet);
  if (a.stop_after) t.set_stop_after(*a.stop_after);

  if (!a.resume) {
    for (const auto& p : phases) {
      fs::remove_all(out / (p + ".ckpt"));
      fs::remove_all(out / (p + ".partial"));
    }
  }
  // Prerequisite: the latest completed phase before the first one to run.
  size_t first = 0;
  while (first < phases.size() && a.resume && t.phase_done(phases[first])) ++first;
  const auto pos = std::find(kAllPhases.begin(), kAllPhases.end(), first < phases.size() ? phases[first] : phases.back());
  const size_t global = static_cast<size_t>(pos - kAllPhases.begin()) + (first < phases.size() ? 0 : 1);
  if (global > 0) {
    const std::string& prev = kAllPhases[global - 1];
    if (!t.phase_done(prev)) {
      if (prev == "stage1") throw DataError("Stage II needs a completed Stage I checkpoint (stage1.ckpt) in " + out.string());
      throw DataError("missing " + prev + ".ckpt in " + out.string());
    }
    t.load_phase(prev);
  }

  json reports = json::array(), timing = json::object();
  bool interrupted = false;
  for (size_t i = first; i < phases.size(); ++i) {
    PhaseReport r = run_named_phase(t, phases[i]);
    reports.push_back(r.to_json());
    timing[r.phase] = r.seconds;
    if (r.extra.contains("interrupted")) {
      interrupted = true;
      std::cout << r.phase << " interrupted at step " << r.steps << "; rerun with --resume to continue\n";
      break;
    }
    std::cout << r.phase << " done (" << r.steps << " steps)\n";
    if (r.extra.contains("validation")) std::cout << r.extra["validation"].dump() << '\n';
  }
  write_json(out / "report.json", {{"config_hash", config_hash(cfg_json)}, {"seed", cfg.seed}, {"stage", a.stage},
                                   {"interrupted", interrupted}, {"phases", reports}});
  write_json(out / "timing.json", {{"seconds", timing}});
  return kExitOk;
}

// ---------------------------------------------------------------------------
// infer

struct InferArgs {
  std::string mode = "ar";
  std::string model;
  std::string config;
  std::vector<std::string> set;
  std::string in;
  std::string out;
  bool stream = false;
  bool png = false;
  int overlap = 1;
  std::string prompt;
  std::optional<int> cache_len;
  std::string keyframes = "middle";
  std::optional<uint64_t> seed;
  double idle_timeout = 10.0;
  int poll_ms = 20;
};

// Produces LR frames [1, 3, 1, h, w] in arrival order from a growing PNG
// directory (ends at an END marker or after `idle` seconds without a new frame)
// or from a raw stream such as a named pipe (ends at EOF).
class FrameReader {
 public:
  FrameReader(const fs::path& src, DType dtype, double idle, int poll_ms) : queue_(8) {
    thread_ = std::thread([=, this] {
      try {
        if (fs::is_directory(src)) {
          read_dir(src, dtype, idle, poll_ms);
        } else {
          read_raw(src, dtype);
        }
      } catch (...) {
        error_ = std::current_exception();
      }
      queue_.close();
    });
  }
  ~FrameReader() {
    queue_.close();
    thread_.join();
  }
  std::optional<Tensor> next() {
    auto f = queue_.pop();
    if (!f && error_) std::rethrow_exception(error_);
    return f;
  }

 private:
  void read_dir(const fs::path& dir, DType dtype, double idle, int poll_ms) {
    int64_t index = 0;
    auto last = Clock::now();
    while (true) {
      const fs::path f = dir / png_frame_name(index);
      if (fs::exists(f)) {
        Tensor img;
        try {
          img = read_png(f, dtype);
        } catch (const DataError&) {
          // Possibly still being written; retry until the idle timeout.
          if (since(last) > idle) throw;
          std::this_thread::sleep_for(std::chrono::milliseconds(poll_ms));
          continue;
        }
        if (!queue_.push(reshape(img, {1, 3, 1, img.size(1), img.size(2)}))) return;
        ++index;
        last = Clock::now();
        continue;
      }
      if (fs::exists(dir / "END")) return;
      if (since(last) > idle) return;
      std::this_thread::sleep_for(std::chrono::milliseconds(poll_ms));
    }
  }

  void read_raw(const fs::path& path, DType dtype) {
    const VideoMeta meta = read_raw_meta(path);
    std::ifstream is(path, std::ios::binary);
    if (!is) throw DataError("cannot open " + path.string());
    const int64_t plane = meta.height * meta.width;
    std::vector<float> buf(static_cast<size_t>(3 * plane));
    while (is.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size() * sizeof(float)))) {
      std::vector<double> v(buf.begin(), buf.end());
      if (!queue_.push(Tensor::from_data({1, 3, 1, meta.height, meta.width}, std::move(v), dtype))) return;
    }
    if (is.gcount() != 0) throw DataError(path.string() + " ends inside a frame");
  }

  BoundedQueue<Tensor> queue_;
  std::exception_ptr error_;
  std::thread thread_;
};

int cmd_infer(const InferArgs& a) {
  const std::optional<fs::path> ckpt = a.model.empty() ? std::nullopt : std::optional(resolve_checkpoint(a.model));
  const json cfg_json = resolve_run_config(a.config, ckpt, a.set, std::nullopt);
  const RunConfig cfg = run_config_from_json(cfg_json);
  const uint64_t seed = resolve_seed(a.seed).value_or(cfg.seed);
  const StreamOptions opt = stream_options(a.mode, a.overlap, a.prompt, a.cache_len, a.keyframes, seed);
  if (!fs::exists(a.in)) throw DataError("input " + a.in + " does not exist");
  make_out_dir(a.out);
  const fs::path out(a.out);
  json opts = options_json(opt);
  opts["stream"] = a.stream;
  opts["model"] = ckpt ? "checkpoint" : "random-init";
  snapshot(out, "infer", cfg_json, seed, opts);

  auto models = load_models(cfg, ckpt);
  const Generator gen = models->generator();
  const DType dtype = cfg.dit.dtype;
  const auto t0 = Clock::now();
  const int64_t f0 = models->dit.forward_count();
  double fps = 24.0;
  Tensor hr;
  json report;

  if (!a.stream) {
    Tensor lr;
    if (fs::is_directory(a.in)) {
      lr = read_png_sequence(a.in, dtype);
    } else {
      lr = read_raw_video(a.in, dtype);
      fps = read_raw_meta(a.in).fps;
    }
    RunReport rep;
    hr = run_mode(gen, lr, opt, &rep);
    report = rep.to_json();
    report.erase("seconds");
  } else {
    if (!fs::is_directory(a.in)) fps = read_raw_meta(a.in).fps;
    StreamEngine eng(gen, opt);
    FrameReader reader(a.in, dtype, a.idle_timeout, a.poll_ms);
    std::vector<Tensor> parts;
    std::ofstream log(out / "emission.csv");
    log << "hr_frame,lr_consumed\n";
    const fs::path frames_dir = out / "frames";
    fs::create_directories(frames_dir);
    int64_t emitted = 0;
    auto sink = [&](const Tensor& part) {
      if (part.size(2) == 0) return;
      write_png_sequence(frames_dir, part, emitted);
      for (int64_t i = 0; i < part.size(2); ++i) log << emitted + i << ',' << eng.consumed() << '\n';
      log.flush();
      emitted += part.size(2);
      parts.push_back(part);
    };
    while (auto f = reader.next()) sink(eng.push_frames(*f));
    sink(eng.finish());
    if (parts.empty()) throw DataError("stream delivered no frames");
    hr = concat(std::span<const Tensor>(parts), 2);
    report = {{"mode", to_string(opt.mode)}, {"frames_in", eng.consumed()}, {"frames_out", eng.emitted()},
              {"chunks", eng.chunks()},       {"forwards", models->dit.forward_count() - f0},
              {"memory", eng.ledger().to_json()}};
  }
  write_raw_video(out / "hr.rgb", hr, fps);
  if (a.png && !a.stream) write_png_sequence(out / "frames", hr);
  report["stream"] = a.stream;
  report["model_config_hash"] = config_hash(cfg_json);
  write_json(out / "report.json", report);
  write_json(out / "timing.json", {{"seconds", since(t0)}});
  std::cout << report["frames_out"].get<int64_t>() << " HR frames, " << report["chunks"].get<int64_t>() << " chunks, "
            << report["forwards"].get<int64_t>() << " generator forwards\n";
  return kExitOk;
}

// ---------------------------------------------------------------------------
// bench

struct BenchArgs {
  std::string frames = "33,65,129,257";
  std::string mode = "ar";
  std::string model;
  std::string config;
  std::vector<std::string> set;
  std::string lr_size = "16x16";
  int repeats = 3;
  std::string out;
  std::string report;
  std::optional<uint64_t> seed;
};

int cmd_bench(const BenchArgs& a) {
  const std::optional<fs::path> ckpt = a.model.empty() ? std::nullopt : std::optional(resolve_checkpoint(a.model));
  const json cfg_json = resolve_run_config(a.config, ckpt, a.set, std::nullopt);
  const RunConfig cfg = run_config_from_json(cfg_json);
  const uint64_t seed = resolve_seed(a.seed).value_or(cfg.seed);
  const auto frames = parse_list(a.frames, ',', "frame list");
  const auto size = parse_list(a.lr_size, 'x', "LR size (want HxW)");
  if (size.size() != 2) throw ConfigError("--lr-size must be HxW");
  StreamOptions opt;
  opt.mode = parse_infer_mode(a.mode);
  opt.seed = seed;
  make_out_dir(a.out);
  const fs::path out(a.out);
  snapshot(out, "bench", cfg_json, seed, {{"frames", frames}, {"mode", a.mode}, {"lr_size", size}, {"repeats", a.repeats}});

  auto models = load_models(cfg, ckpt);
  const BenchResult res = bench(models->generator(), frames, opt, size[0], size[1], a.repeats);

  json rows = json::array(), timed = json::array();
  for (const auto& r : res.rows) {
    rows.push_back({{"frames", r.frames}, {"chunks", r.chunks}, {"peak_elements", r.peak_elements}});
    timed.push_back({{"frames", r.frames}, {"seconds", r.seconds}});
  }
  const json det = {
      {"mode", a.mode},
      {"lr_size", size},
      {"rows", rows},
      {"constant_memory", res.constant_memory},
      {"config_hash", config_hash(cfg_json)},
      {"reference",
       {{"note", "720p, large model, memory includes weights; not comparable in absolute terms"},
        {"rows", {{{"frames", 33}, {"seconds", 6.82}, {"memory_gb", 20.39}}, {{"frames", 100}, {"seconds", 20.70}, {"memory_gb", 20.39}}}}}}};
  const fs::path report = a.report.empty() ? out / "bench.json" : fs::path(a.report);
  write_json(report, det);
  fs::path timing = report;
  timing.replace_filename(report.stem().string() + "_timing.json");
  write_json(timing, {{"rows", timed}, {"slope", res.slope}, {"intercept", res.intercept}, {"r2", res.r2}});

  std::cout << std::left << std::setw(8) << "frames" << std::setw(10) << "seconds" << std::setw(16) << "peak_elements"
            << "chunks\n";
  for (const auto& r : res.rows) {
    std::cout << std::setw(8) << r.frames << std::setw(10) << std::setprecision(4) << r.seconds << std::setw(16)
              << r.peak_elements << r.chunks << '\n';
  }
  std::cout << "linear fit: " << res.slope << " s/frame, R^2 = " << res.r2
            << "; constant memory: " << (res.constant_memory ? "yes" : "no") << '\n';
  std::cout << "reference (720p, incl. weights): 33 frames 6.82 s / 20.39 GB, 100 frames 20.70 s / 20.39 GB\n";
  return kExitOk;
}

// ---------------------------------------------------------------------------
// eval

struct EvalArgs {
  std::string model;
  std::string config;
  std::vector<std::string> set;
  std::string modes = "ar,chunking,aggregation";
  std::string out;
  std::optional<uint64_t> seed;
};

const char* const kMetricCsvHeader = "psnr,ssim,bilinear_psnr,e_warp,e_warp_bm,boundary_drift,temporal_loss,profile_roughness,chunks,forwards";

void metric_csv(std::ostream& os, const ModeMetrics& m) {
  os << std::setprecision(17) << m.psnr << ',' << m.ssim << ',' << m.bilinear_psnr << ',' << m.e_warp << ',' << m.e_warp_bm
     << ',' << m.boundary_drift << ',' << m.temporal_loss << ',' << m.profile_roughness << ',' << m.chunks << ','
     << m.forwards;
}

std::vector<EvalClip> validation_set(const RunConfig& cfg) {
  const ValidationConfig& v = cfg.validation;
  if (v.clips < 1) throw ConfigError("validation.clips must be positive for evaluation");
  return make_eval_set(v.clips, v.frames, v.height, v.width, cfg.data.degradation, cfg.data.synth, v.seed);
}

int cmd_eval(const EvalArgs& a) {
  const std::optional<fs::path> ckpt = a.model.empty() ? std::nullopt : std::optional(resolve_checkpoint(a.model));
  const json cfg_json = resolve_run_config(a.config, ckpt, a.set, std::nullopt);
  const RunConfig cfg = run_config_from_json(cfg_json);
  const uint64_t seed = resolve_seed(a.seed).value_or(cfg.seed);
  std::vector<InferMode> modes;
  {
    std::stringstream ss(a.modes);
    std::string m;
    while (std::getline(ss, m, ',')) modes.push_back(parse_infer_mode(m));
  }
  if (modes.empty()) throw ConfigError("--modes is empty");
  make_out_dir(a.out);
  const fs::path out(a.out);
  snapshot(out, "eval", cfg_json, seed, {{"modes", a.modes}, {"model", ckpt ? "checkpoint" : "random-init"}});

  auto models = load_models(cfg, ckpt);
  const auto clips = validation_set(cfg);
  json agg = json::object();
  std::ofstream csv(out / "metrics.csv");
  csv << "mode,clip," << kMetricCsvHeader << '\n';
  for (InferMode mode : modes) {
    StreamOptions opt;
    opt.mode = mode;
    opt.seed = seed;
    std::vector<Tensor> outputs;
    std::vector<ModeMetrics> rows;
    const ModeMetrics m = evaluate(models->generator(), clips, opt, &outputs, &rows);
    agg[to_string(mode)] = m.to_json();
    for (size_t i = 0; i < rows.size(); ++i) {
      csv << to_string(mode) << ',' << i << ',';
      metric_csv(csv, rows[i]);
      csv << '\n';
    }
    const Tensor& v = outputs.front();
    write_png(out / ("profile_" + to_string(mode) + ".png"), temporal_profile(v, v.size(3) / 2));
    std::cout << to_string(mode) << ": psnr " << m.psnr << " (bilinear " << m.bilinear_psnr << "), e_warp " << m.e_warp
              << ", boundary_drift " << m.boundary_drift << '\n';
  }
  const Tensor& hr0 = clips.front().hr;
  write_png(out / "profile_gt.png", temporal_profile(hr0, hr0.size(3) / 2));
  write_json(out / "metrics.json", {{"config_hash", config_hash(cfg_json)}, {"clips", clips.size()}, {"modes", agg}});
  return kExitOk;
}

// ---------------------------------------------------------------------------
// ablate

struct AblateArgs {
  std::string which;
  std::string model;
  std::string config;
  std::vector<std::string> set;
  std::string out;
  std::optional<uint64_t> seed;
  bool quiet = false;
};

struct Arm {
  std::string name;
  json settings;
  ModeMetrics metrics;
};

void write_ablation(const fs::path& out, const std::string& which, const json& run_cfg, const std::vector<Arm>& arms) {
  std::ofstream csv(out / ("ablation_" + which + ".csv"));
  csv << "arm,config_hash," << kMetricCsvHeader << '\n';
  json rows = json::array();
  for (const Arm& a : arms) {
    const std::string hash = config_hash({{"run", run_cfg}, {"arm", a.settings}});
    csv << a.name << ',' << hash << ',';
    metric_csv(csv, a.metrics);
    csv << '\n';
    rows.push_back({{"arm", a.name}, {"config_hash", hash}, {"settings", a.settings}, {"metrics", a.metrics.to_json()}});
    std::cout << std::left << std::setw(14) << a.name << " psnr " << std::setprecision(5) << a.metrics.psnr << "  e_warp "
              << a.metrics.e_warp << "  drift " << a.metrics.boundary_drift << '\n';
  }
  write_json(out / ("ablation_" + which + ".json"), {{"which", which}, {"arms", rows}});
}

// Trains (or resumes) one arm's generator in `dir`, starting from `init` models when given.
ModeMetrics train_arm(RunConfig cfg, const fs::path& dir, const std::vector<std::string>& phases,
                      const std::optional<fs::path>& init, const std::vector<EvalClip>& clips, bool quiet) {
  cfg.validation.clips = 0;  // evaluated below on the shared set
  Trainer t(cfg, dir);
  progress_printer(t, quiet);
  if (init) t.models().load(*init);
  for (const auto& p : phases) {
    if (t.phase_done(p)) {
      t.load_phase(p);
      continue;
    }
    run_named_phase(t, p);
  }
  StreamOptions opt;
  opt.seed = cfg.seed;
  return evaluate(t.models().generator(), clips, opt);
}

int cmd_ablate(const AblateArgs& a) {
  const bool needs_model = a.which == "a" || a.which == "b" || a.which == "c";
  if (!needs_model && a.which != "d" && a.which != "e") throw ConfigError("--which must be one of a, b, c, d, e");
  if (needs_model && a.model.empty()) throw ConfigError("ablation " + a.which + " needs --model");
  std::optional<fs::path> ckpt;
  if (!a.model.empty()) ckpt = a.which == "e" ? fs::path(a.model) : resolve_checkpoint(a.model);
  const json cfg_json = resolve_run_config(a.config, needs_model ? ckpt : std::nullopt, a.set, resolve_seed(a.seed));
  const RunConfig cfg = run_config_from_json(cfg_json);
  make_out_dir(a.out);
  const fs::path out(a.out);
  snapshot(out, "ablate", cfg_json, cfg.seed, {{"which", a.which}});
  const auto clips = validation_set(cfg);
  std::vector<Arm> arms;

  if (needs_model) {
    auto models = load_models(cfg, ckpt);
    const Generator gen = models->generator();
    StreamOptions base;
    base.seed = cfg.seed;
    if (a.which == "a") {
      for (InferMode m : {InferMode::kAr, InferMode::kChunking, InferMode::kAggregation}) {
        StreamOptions o = base;
        o.mode = m;
        arms.push_back({to_string(m), options_json(o), evaluate(gen, clips, o)});
      }
    } else if (a.which == "b") {
      for (PromptMode p : {PromptMode::kNone, PromptMode::kSeparate, PromptMode::kJoint}) {
        StreamOptions o = base;
        o.prompt = p;
        arms.push_back({to_string(p), options_json(o), evaluate(gen, clips, o)});
      }
    } else {
      // Same weights, different chunk schedule at inference.
      const std::pair<int, int> grid[] = {{1, 1}, {3, 3}, {5, 5}, {DiTConfig::kUnbounded, 3}};
      for (auto [m, n] : grid) {
        DiTConfig dc = cfg.dit;
        dc.cache_len = m;
        dc.chunk_len = n;
        Dit dit(dc, 0);
        dit.load_any_schedule(*ckpt / "models" / "dit");
        const std::string name = "M" + (m == DiTConfig::kUnbounded ? std::string("inf") : std::to_string(m)) + "_N" + std::to_string(n);
        StreamOptions o = base;
        json s = options_json(o);
        s["M"] = m;
        s["N"] = n;
        arms.push_back({name, s, evaluate(Generator{models->vae, dit, models->guidance}, clips, o)});
      }
    }
  } else if (a.which == "d") {
    RunConfig ours = cfg, no_stage1 = cfg, no_patch = cfg;
    no_stage1.stage1.steps = 0;
    // Without patches the decoder sees whole frames, so clips shrink to the window size.
    for (StageConfig* s : {&no_patch.stage1, &no_patch.stage2}) {
      s->patch = false;
      s->height = s->window_h;
      s->width = s->window_w;
    }
    const fs::path vae_models = out / "ours" / "vae.ckpt" / "models";
    arms.push_back({"ours", to_json(ours), train_arm(ours, out / "ours", kAllPhases, std::nullopt, clips, a.quiet)});
    // The VAE phase is identical across arms; later arms start from the first arm's VAE.
    const std::vector<std::string> gen_phases = {"stage1", "scores", "stage2"};
    arms.push_back({"wo_stage1", to_json(no_stage1), train_arm(no_stage1, out / "wo_stage1", gen_phases, vae_models, clips, a.quiet)});
    arms.push_back({"wo_patch", to_json(no_patch), train_arm(no_patch, out / "wo_patch", gen_phases, vae_models, clips, a.quiet)});
  } else {
    if (cfg.weights.dmd <= 0.0) throw ConfigError("ablation e compares loss.dmd against 0; set loss.dmd > 0");
    // Shared start: VAE, Stage I and score pretraining, from --model (a run
    // directory holding scores.ckpt) or trained here.
    fs::path base = out / "base";
    if (ckpt) {
      base = *ckpt;
      if (!fs::exists(base / "scores.ckpt" / "models")) throw DataError(base.string() + " has no scores.ckpt");
    } else {
      RunConfig bc = cfg;
      bc.validation.clips = 0;
      Trainer t(bc, base);
      progress_printer(t, a.quiet);
      for (const std::string p : {"vae", "stage1", "scores"}) {
        if (t.phase_done(p)) {
          t.load_phase(p);
        } else {
          run_named_phase(t, p);
        }
      }
    }
    RunConfig off = cfg;
    off.weights.dmd = 0.0;
    const fs::path init = base / "scores.ckpt" / "models";
    arms.push_back({"wo_dmd", to_json(off), train_arm(off, out / "wo_dmd", {"stage2"}, init, clips, a.quiet)});
    arms.push_back({"ours", to_json(cfg), train_arm(cfg, out / "ours", {"stage2"}, init, clips, a.quiet)});
  }
  write_ablation(out, a.which, cfg_json, arms);
  return kExitOk;
}

}  // namespace

std::optional<uint64_t> resolve_seed(std::optional<uint64_t> flag) {
  if (flag) return flag;
  const char* env = std::getenv("INFVSR_SEED");
  if (!env || !*env) return std::nullopt;
  try {
    size_t used = 0;
    const unsigned long long v = std::stoull(env, &used);
    if (used != std::string(env).size()) throw std::invalid_argument(env);
    return v;
  } catch (const std::exception&) {
    throw ConfigError(std::string("INFVSR_SEED is not an unsigned integer: '") + env + "'");
  }
}

fs::path resolve_checkpoint(const fs::path& model) {
  if (fs::exists(model / "models") && fs::exists(model / "config.json")) return model;
  for (const char* c : {"stage2.ckpt", "stage1.ckpt"}) {
    if (fs::exists(model / c / "models")) return model / c;
  }
  throw DataError("no trained model at " + model.string() + " (expected a checkpoint or a run with stage1/stage2.ckpt)");
}

json checkpoint_config(const fs::path& ckpt) { return read_json(ckpt / "config.json", false); }

int run_cli(int argc, const char* const* argv) {
  CLI::App app{"Streaming video super-resolution with a causal one-step diffusion transformer"};
  app.require_subcommand(1);

  SynthArgs sa;
  auto* synth = app.add_subcommand("synth-data", "Write synthetic LQ-HQ training pairs and a manifest");
  synth->add_option("--count", sa.count, "Number of pairs")->capture_default_str();
  synth->add_option("--shape", sa.shape, "HR clip shape TxHxW")->capture_default_str();
  synth->add_option("--degradation-config", sa.degradation_config, "JSON degradation ranges");
  synth->add_option("--max-speed", sa.max_speed, "Largest motion in px/frame")->capture_default_str();
  synth->add_option("--out", sa.out, "Output directory")->required();
  synth->add_option("--seed", sa.seed, "Seed (fallback: INFVSR_SEED)");

  TrainArgs ta;
  auto* train = app.add_subcommand("train", "Run the training curriculum");
  train->add_option("--stage", ta.stage, "I, II or all")->capture_default_str();
  train->add_option("--config", ta.config, "JSON run config");
  train->add_option("--set", ta.set, "Override key=value (dotted path), repeatable");
  train->add_option("--out", ta.out, "Run directory")->required();
  train->add_flag("--resume", ta.resume, "Skip finished phases and continue interrupted ones");
  train->add_option("--stop-after", ta.stop_after, "Stop each phase after this many steps (checkpointed)");
  train->add_option("--seed", ta.seed, "Seed (fallback: INFVSR_SEED, then config)");
  train->add_flag("--quiet", ta.quiet, "No per-step progress");

  InferArgs ia;
  auto* infer = app.add_subcommand("infer", "Upscale a clip x4");
  infer->add_option("--mode", ia.mode, "ar, chunking or aggregation")->capture_default_str();
  infer->add_option("--model", ia.model, "Checkpoint or run directory (default: random weights from --config)");
  infer->add_option("--config", ia.config, "JSON run config for random weights");
  infer->add_option("--set", ia.set, "Override key=value");
  infer->add_option("--in", ia.in, "LR input: .rgb file, PNG directory, or (with --stream) a growing directory / pipe")->required();
  infer->add_option("--out", ia.out, "Output directory")->required();
  infer->add_flag("--stream", ia.stream, "Consume frames as they arrive");
  infer->add_flag("--png", ia.png, "Also write HR frames as PNG");
  infer->add_option("--overlap", ia.overlap, "Aggregation overlap in latent frames")->capture_default_str();
  infer->add_option("--prompt", ia.prompt, "none, separate or joint (default depends on mode)");
  infer->add_option("--cache-len", ia.cache_len, "Cache size M in latent frames (ar mode; -1 unbounded)");
  infer->add_option("--keyframes", ia.keyframes, "Joint-prompt keyframes: middle, first, last or indices")->capture_default_str();
  infer->add_option("--seed", ia.seed, "Noise seed (fallback: INFVSR_SEED, then config)");
  infer->add_option("--idle-timeout", ia.idle_timeout, "Stream: seconds without a new frame before finishing")->capture_default_str();
  infer->add_option("--poll-ms", ia.poll_ms, "Stream: directory poll interval")->capture_default_str();

  BenchArgs ba;
  auto* bench_cmd = app.add_subcommand("bench", "Runtime and retained-memory scaling with stream length");
  bench_cmd->add_option("--frames", ba.frames, "Comma-separated LR frame counts")->capture_default_str();
  bench_cmd->add_option("--mode", ba.mode, "Inference mode")->capture_default_str();
  bench_cmd->add_option("--model", ba.model, "Checkpoint or run directory (default: random weights)");
  bench_cmd->add_option("--config", ba.config, "JSON run config for random weights");
  bench_cmd->add_option("--set", ba.set, "Override key=value");
  bench_cmd->add_option("--lr-size", ba.lr_size, "LR frame size HxW")->capture_default_str();
  bench_cmd->add_option("--repeats", ba.repeats, "Timing repeats (best is kept)")->capture_default_str();
  bench_cmd->add_option("--out", ba.out, "Output directory")->required();
  bench_cmd->add_option("--report", ba.report, "Report path (default <out>/bench.json)");
  bench_cmd->add_option("--seed", ba.seed, "Seed");

  EvalArgs ea;
  auto* eval = app.add_subcommand("eval", "Metrics on the synthetic validation set");
  eval->add_option("--model", ea.model, "Checkpoint or run directory (default: random weights)");
  eval->add_option("--config", ea.config, "JSON run config for random weights");
  eval->add_option("--set", ea.set, "Override key=value");
  eval->add_option("--modes", ea.modes, "Comma-separated inference modes")->capture_default_str();
  eval->add_option("--out", ea.out, "Output directory")->required();
  eval->add_option("--seed", ea.seed, "Noise seed");

  AblateArgs aa;
  auto* ablate = app.add_subcommand("ablate", "Toy-scale ablations: a modes, b guidance, c (M,N), d training settings, e DMD");
  ablate->add_option("--which", aa.which, "a, b, c, d or e")->required();
  ablate->add_option("--model", aa.model, "Trained model (a-c); for e, a run directory with scores.ckpt");
  ablate->add_option("--config", aa.config, "JSON run config");
  ablate->add_option("--set", aa.set, "Override key=value");
  ablate->add_option("--out", aa.out, "Output directory")->required();
  ablate->add_option("--seed", aa.seed, "Seed");
  ablate->add_flag("--quiet", aa.quiet, "No per-step progress");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitConfig;
  }

  try {
    if (*synth) return cmd_synth(sa);
    if (*train) return cmd_train(ta);
    if (*infer) return cmd_infer(ia);
    if (*bench_cmd) return cmd_bench(ba);
    if (*eval) return cmd_eval(ea);
    if (*ablate) return cmd_ablate(aa);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << '\n';
    return kExitData;
  } catch (const ShapeError& e) {
    std::cerr << "data error: " << e.what() << '\n';
    return kExitData;
  } catch (const NumericalError& e) {
    std::cerr << "numerical failure: " << e.what() << '\n';
    return kExitNumerical;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return kExitOk;
}

}  // namespace arvsr
