#pragma once

#include <filesystem>
#include <optional>
#include <string>

#include <json.hpp>

#include "arvsr/trainer/trainer.hpp"

namespace arvsr {

// Exit codes.
inline constexpr int kExitOk = 0;
inline constexpr int kExitConfig = 2;
inline constexpr int kExitData = 3;
inline constexpr int kExitNumerical = 4;

// Entry point of the `arvsr` tool. Returns the process exit code.
int run_cli(int argc, const char* const* argv);

// Seed precedence: explicit flag, then INFVSR_SEED, then nothing (config default).
std::optional<uint64_t> resolve_seed(std::optional<uint64_t> flag);

// A trained model directory: either a checkpoint (holding models/ and
// config.json) or a training run directory, in which case the latest of
// stage2.ckpt / stage1.ckpt is used.
std::filesystem::path resolve_checkpoint(const std::filesystem::path& model);
nlohmann::json checkpoint_config(const std::filesystem::path& ckpt);

}  // namespace arvsr
