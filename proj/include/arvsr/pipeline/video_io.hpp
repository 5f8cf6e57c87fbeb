#pragma once

#include <filesystem>
#include <string>

#include "arvsr/core/tensor.hpp"

namespace arvsr {

// Raw clip on disk: `<stem>.rgb` holds float32 little-endian samples, frame by
// frame, each frame as three planes (R, G, B) of H x W; `<stem>.json` carries
// {"frames", "height", "width", "fps"}.
struct VideoMeta {
  int64_t frames = 0;
  int64_t height = 0;
  int64_t width = 0;
  double fps = 24.0;
};

// video: [1, 3, T, H, W] (or [3, T, H, W]).
void write_raw_video(const std::filesystem::path& rgb_path, const Tensor& video, double fps = 24.0);
VideoMeta read_raw_meta(const std::filesystem::path& rgb_path);
// Returns [1, 3, T, H, W].
Tensor read_raw_video(const std::filesystem::path& rgb_path, DType dtype = DType::kF32);
// Frames [first, first + count) only; used by streaming readers.
Tensor read_raw_frames(const std::filesystem::path& rgb_path, int64_t first, int64_t count, DType dtype = DType::kF32);
std::filesystem::path sidecar_path(const std::filesystem::path& rgb_path);

// 8-bit RGB PNG. image: [3, H, W] in [0, 1] (values are clamped and rounded).
void write_png(const std::filesystem::path& path, const Tensor& image);
// Returns [3, H, W] in [0, 1].
Tensor read_png(const std::filesystem::path& path, DType dtype = DType::kF32);

// Directory of frame_00000.png, frame_00001.png, ...
std::string png_frame_name(int64_t index);
void write_png_sequence(const std::filesystem::path& dir, const Tensor& video, int64_t first_index = 0);
// Reads every frame_*.png in index order. Returns [1, 3, T, H, W].
Tensor read_png_sequence(const std::filesystem::path& dir, DType dtype = DType::kF32);

}  // namespace arvsr
