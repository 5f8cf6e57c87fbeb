#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <thread>

#include <json.hpp>

#include "arvsr/cli/cli.hpp"
#include "arvsr/core/hash.hpp"
#include "arvsr/pipeline/video_io.hpp"

using namespace arvsr;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

const fs::path kTiny = fs::path(ARVSR_CONFIG_DIR) / "tiny.json";

int cli(std::vector<std::string> args) {
  args.insert(args.begin(), "arvsr");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  return run_cli(static_cast<int>(argv.size()), argv.data());
}

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& name) : path(fs::temp_directory_path() / ("arvsr_cli_" + name)) {
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
  std::string operator/(const std::string& s) const { return (path / s).string(); }
};

json load(const fs::path& p) {
  std::ifstream is(p);
  return json::parse(is);
}

Tensor lr_video(int64_t frames, uint64_t seed) {
  Rng rng(seed);
  return Tensor::uniform({1, 3, frames, 8, 8}, rng, 0.0, 1.0);
}

}  // namespace

TEST_CASE("synth-data writes a reproducible manifest") {
  TempDir d("synth");
  REQUIRE(cli({"synth-data", "--count", "4", "--shape", "9x64x64", "--out", d / "a", "--seed", "3"}) == 0);
  REQUIRE(cli({"synth-data", "--count", "4", "--shape", "9x64x64", "--out", d / "b", "--seed", "3"}) == 0);
  const json m = load(d.path / "a" / "manifest.json");
  const json entries = m.at("pairs");
  CHECK(entries.size() == 4);
  const VideoMeta lr = read_raw_meta(d.path / "a" / entries[0]["lr_path"].get<std::string>());
  CHECK(lr.frames == 9);
  CHECK(lr.height == 16);
  CHECK(lr.width == 16);
  CHECK(sha256_file(d.path / "a" / "manifest.json") == sha256_file(d.path / "b" / "manifest.json"));
  CHECK(load(d.path / "a" / "config.json")["seed"] == 3);
}

TEST_CASE("INFVSR_SEED is the seed fallback") {
  TempDir d("seed_env");
  setenv("INFVSR_SEED", "41", 1);
  CHECK(cli({"synth-data", "--count", "1", "--shape", "5x16x16", "--out", d / "a"}) == 0);
  CHECK(load(d.path / "a" / "config.json")["seed"] == 41);
  CHECK(cli({"synth-data", "--count", "1", "--shape", "5x16x16", "--out", d / "b", "--seed", "2"}) == 0);
  CHECK(load(d.path / "b" / "config.json")["seed"] == 2);
  setenv("INFVSR_SEED", "forty", 1);
  CHECK(cli({"synth-data", "--count", "1", "--shape", "5x16x16", "--out", d / "c"}) == kExitConfig);
  unsetenv("INFVSR_SEED");
}

TEST_CASE("exit codes") {
  TempDir d("exit");
  CHECK(cli({"no-such-command"}) == kExitConfig);
  CHECK(cli({"train", "--out", d / "r", "--set", "stage1.stepz=2"}) == kExitConfig);
  CHECK(cli({"train", "--out", d / "r", "--config", d / "missing.json"}) == kExitConfig);
  CHECK(cli({"train", "--stage", "III", "--out", d / "r"}) == kExitConfig);
  // Stage II without a Stage I checkpoint.
  CHECK(cli({"train", "--stage", "II", "--config", kTiny.string(), "--out", d / "r", "--quiet"}) == kExitData);
  CHECK(cli({"infer", "--mode", "ar", "--in", d / "nothing.rgb", "--out", d / "o"}) == kExitData);
  write_raw_video(d.path / "in.rgb", lr_video(9, 1));
  CHECK(cli({"infer", "--mode", "fast", "--config", kTiny.string(), "--in", d / "in.rgb", "--out", d / "o"}) == kExitConfig);
  CHECK(cli({"infer", "--model", d / "r", "--in", d / "in.rgb", "--out", d / "o"}) == kExitData);
  CHECK(cli({"synth-data", "--count", "1", "--shape", "9x30x30", "--out", d / "s"}) == kExitConfig);
  CHECK(cli({"ablate", "--which", "q", "--out", d / "a"}) == kExitConfig);
  CHECK(cli({"train", "--config", kTiny.string(), "--set", "vae_training.learning_rate=1e30", "--set",
             "vae_training.steps=30", "--out", d / "nan", "--quiet"}) == kExitNumerical);
  CHECK(fs::exists(d.path / "nan" / "failure_dump.json"));
}

TEST_CASE("infer: 33 frames in, 33 out; chunking equals ar with M = 0") {
  TempDir d("infer");
  write_raw_video(d.path / "in.rgb", lr_video(33, 2));
  const std::string cfg = kTiny.string();
  REQUIRE(cli({"infer", "--mode", "ar", "--config", cfg, "--in", d / "in.rgb", "--out", d / "ar"}) == 0);
  const VideoMeta m = read_raw_meta(d.path / "ar" / "hr.rgb");
  CHECK(m.frames == 33);
  CHECK(m.height == 32);
  CHECK(m.width == 32);
  const json rep = load(d.path / "ar" / "report.json");
  CHECK(rep["forwards"] == rep["chunks"]);
  CHECK_FALSE(rep.contains("seconds"));

  REQUIRE(cli({"infer", "--mode", "chunking", "--config", cfg, "--in", d / "in.rgb", "--out", d / "ch"}) == 0);
  REQUIRE(cli({"infer", "--mode", "ar", "--cache-len", "0", "--prompt", "separate", "--config", cfg, "--in", d / "in.rgb",
               "--out", d / "m0"}) == 0);
  CHECK(sha256_file(d.path / "ch" / "hr.rgb") == sha256_file(d.path / "m0" / "hr.rgb"));
}

TEST_CASE("infer --stream consumes a growing frame directory") {
  TempDir d("stream");
  const Tensor lr = lr_video(21, 5);
  const fs::path src = d.path / "incoming";
  fs::create_directories(src);
  write_png_sequence(d.path / "all", lr);
  std::thread producer([&] {
    for (int64_t i = 0; i < 21; ++i) {
      // Write under a temporary name, then rename, so the reader never sees half a file.
      const fs::path tmp = src / ("tmp_" + std::to_string(i));
      fs::copy_file(d.path / "all" / png_frame_name(i), tmp);
      fs::rename(tmp, src / png_frame_name(i));
      std::this_thread::sleep_for(std::chrono::milliseconds(5));
    }
    std::ofstream(src / "END").put('\n');
  });
  const std::string cfg = kTiny.string();
  const int code = cli({"infer", "--stream", "--config", cfg, "--in", src.string(), "--out", d / "s", "--poll-ms", "2"});
  producer.join();
  REQUIRE(code == 0);
  REQUIRE(cli({"infer", "--config", cfg, "--in", d / "all", "--out", d / "batch"}) == 0);
  CHECK(sha256_file(d.path / "s" / "hr.rgb") == sha256_file(d.path / "batch" / "hr.rgb"));
  CHECK(fs::exists(d.path / "s" / "frames" / png_frame_name(20)));
  // Frames 0..8 leave after the first chunk, long before the stream ends.
  std::ifstream log(d.path / "s" / "emission.csv");
  std::string header, first;
  std::getline(log, header);
  std::getline(log, first);
  CHECK(header == "hr_frame,lr_consumed");
  CHECK(first == "0,9");
}

TEST_CASE("train, resume, and downstream subcommands") {
  TempDir d("train");
  const std::string cfg = kTiny.string();
  REQUIRE(cli({"train", "--stage", "I", "--config", cfg, "--out", d / "run", "--quiet"}) == 0);
  CHECK(fs::exists(d.path / "run" / "stage1.ckpt"));
  CHECK_FALSE(fs::exists(d.path / "run" / "stage2.ckpt"));
  REQUIRE(cli({"train", "--stage", "II", "--config", cfg, "--out", d / "run", "--quiet"}) == 0);
  CHECK(fs::exists(d.path / "run" / "stage2.ckpt"));

  // Interrupted after two steps of every phase, then resumed to completion.
  REQUIRE(cli({"train", "--config", cfg, "--out", d / "parts", "--stop-after", "2", "--quiet"}) == 0);
  CHECK(fs::exists(d.path / "parts" / "vae.partial"));
  for (int i = 0; i < 10 && !fs::exists(d.path / "parts" / "stage2.ckpt"); ++i) {
    REQUIRE(cli({"train", "--config", cfg, "--out", d / "parts", "--resume", "--stop-after", "2", "--quiet"}) == 0);
  }
  for (const char* f : {"vae_loss.csv", "stage1_loss.csv", "scores_loss.csv", "stage2_loss.csv"}) {
    CAPTURE(f);
    CHECK(sha256_file(d.path / "run" / f) == sha256_file(d.path / "parts" / f));
  }

  REQUIRE(cli({"eval", "--model", d / "run", "--out", d / "eval"}) == 0);
  const json metrics = load(d.path / "eval" / "metrics.json");
  CHECK(metrics["modes"].contains("ar"));
  CHECK(metrics["modes"].contains("aggregation"));
  CHECK(fs::exists(d.path / "eval" / "profile_ar.png"));
  CHECK(fs::exists(d.path / "eval" / "metrics.csv"));

  REQUIRE(cli({"bench", "--model", d / "run", "--frames", "21,33,45", "--lr-size", "8x8", "--repeats", "1", "--out", d / "bench"}) == 0);
  const json b = load(d.path / "bench" / "bench.json");
  CHECK(b["constant_memory"] == true);
  CHECK(b["reference"]["rows"][0]["seconds"] == 6.82);
  CHECK(b["reference"]["rows"][1]["memory_gb"] == 20.39);
  CHECK(load(d.path / "bench" / "bench_timing.json").contains("r2"));

  REQUIRE(cli({"ablate", "--which", "c", "--model", d / "run", "--out", d / "abl"}) == 0);
  std::ifstream csv(d.path / "abl" / "ablation_c.csv");
  std::string line;
  std::vector<std::string> arms, hashes;
  std::getline(csv, line);
  CHECK(line.rfind("arm,config_hash,", 0) == 0);
  while (std::getline(csv, line)) {
    arms.push_back(line.substr(0, line.find(',')));
    hashes.push_back(line.substr(line.find(',') + 1, 64));
  }
  CHECK(arms == std::vector<std::string>{"M1_N1", "M3_N3", "M5_N5", "Minf_N3"});
  CHECK(hashes[0] != hashes[1]);
}
