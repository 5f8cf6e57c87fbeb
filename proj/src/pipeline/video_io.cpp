#include "arvsr/pipeline/video_io.hpp"

#include <png.h>

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <memory>
#include <json.hpp>

#include "arvsr/core/errors.hpp"

namespace arvsr {

namespace {

static_assert(std::endian::native == std::endian::little, "raw video IO assumes a little-endian host");

struct Frames {
  int64_t t, h, w;
};

Frames video_dims(const Tensor& video) {
  const Shape& s = video.shape();
  if (s.size() == 5 && s[0] == 1 && s[1] == 3) return {s[2], s[3], s[4]};
  if (s.size() == 4 && s[0] == 3) return {s[1], s[2], s[3]};
  throw ShapeError("expected a [1,3,T,H,W] or [3,T,H,W] video, got " + shape_str(s));
}

uint8_t to_byte(double v) { return static_cast<uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0)); }

}  // namespace

std::filesystem::path sidecar_path(const std::filesystem::path& rgb_path) {
  std::filesystem::path p = rgb_path;
  return p.replace_extension(".json");
}

void write_raw_video(const std::filesystem::path& rgb_path, const Tensor& video, double fps) {
  const auto [t, h, w] = video_dims(video);
  if (rgb_path.has_parent_path()) std::filesystem::create_directories(rgb_path.parent_path());
  std::ofstream os(rgb_path, std::ios::binary);
  if (!os) throw DataError("cannot write " + rgb_path.string());
  const auto v = video.data();
  std::vector<float> frame(3 * h * w);
  for (int64_t f = 0; f < t; ++f) {
    for (int64_t c = 0; c < 3; ++c)
      for (int64_t i = 0; i < h * w; ++i) frame[c * h * w + i] = static_cast<float>(v[(c * t + f) * h * w + i]);
    os.write(reinterpret_cast<const char*>(frame.data()), static_cast<std::streamsize>(frame.size() * sizeof(float)));
  }
  if (!os) throw DataError("short write to " + rgb_path.string());
  nlohmann::json meta = {{"frames", t}, {"height", h}, {"width", w}, {"fps", fps}};
  std::ofstream js(sidecar_path(rgb_path));
  if (!js) throw DataError("cannot write sidecar for " + rgb_path.string());
  js << meta.dump(2) << '\n';
}

VideoMeta read_raw_meta(const std::filesystem::path& rgb_path) {
  std::ifstream js(sidecar_path(rgb_path));
  if (!js) throw DataError("missing sidecar " + sidecar_path(rgb_path).string());
  try {
    nlohmann::json j;
    js >> j;
    VideoMeta m{j.at("frames").get<int64_t>(), j.at("height").get<int64_t>(), j.at("width").get<int64_t>(),
                j.value("fps", 24.0)};
    if (m.frames < 0 || m.height < 1 || m.width < 1) throw DataError("invalid extents in " + sidecar_path(rgb_path).string());
    return m;
  } catch (const nlohmann::json::exception& e) {
    throw DataError("malformed sidecar " + sidecar_path(rgb_path).string() + ": " + e.what());
  }
}

Tensor read_raw_frames(const std::filesystem::path& rgb_path, int64_t first, int64_t count, DType dtype) {
  const VideoMeta m = read_raw_meta(rgb_path);
  if (first < 0 || count < 0 || first + count > m.frames) {
    throw DataError("frames [" + std::to_string(first) + ", " + std::to_string(first + count) + ") outside " +
                    rgb_path.string() + " (" + std::to_string(m.frames) + " frames)");
  }
  std::ifstream is(rgb_path, std::ios::binary);
  if (!is) throw DataError("cannot read " + rgb_path.string());
  const int64_t plane = m.height * m.width;
  const auto need = static_cast<std::uintmax_t>(m.frames * 3 * plane * sizeof(float));
  if (std::filesystem::file_size(rgb_path) != need) throw DataError("size of " + rgb_path.string() + " does not match its sidecar");
  is.seekg(static_cast<std::streamoff>(first * 3 * plane * sizeof(float)));
  std::vector<float> buf(count * 3 * plane);
  is.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size() * sizeof(float)));
  if (!is) throw DataError("truncated " + rgb_path.string());
  std::vector<double> out(buf.size());
  for (int64_t f = 0; f < count; ++f)
    for (int64_t c = 0; c < 3; ++c)
      for (int64_t i = 0; i < plane; ++i) {
        const float v = buf[(f * 3 + c) * plane + i];
        if (!std::isfinite(v)) throw DataError("non-finite sample in " + rgb_path.string());
        out[(c * count + f) * plane + i] = v;
      }
  return Tensor::from_data({1, 3, count, m.height, m.width}, std::move(out), dtype);
}

Tensor read_raw_video(const std::filesystem::path& rgb_path, DType dtype) {
  return read_raw_frames(rgb_path, 0, read_raw_meta(rgb_path).frames, dtype);
}

void write_png(const std::filesystem::path& path, const Tensor& image) {
  if (image.rank() != 3 || image.size(0) != 3) throw ShapeError("write_png expects [3,H,W], got " + shape_str(image.shape()));
  const int64_t h = image.size(1), w = image.size(2);
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::unique_ptr<FILE, int (*)(FILE*)> fp(std::fopen(path.c_str(), "wb"), &std::fclose);
  if (!fp) throw DataError("cannot write " + path.string());
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!info) {
    png_destroy_write_struct(&png, nullptr);
    throw DataError("libpng initialisation failed");
  }
  std::vector<png_byte> rows(3 * h * w);
  const auto v = image.data();
  for (int64_t y = 0; y < h; ++y)
    for (int64_t x = 0; x < w; ++x)
      for (int64_t c = 0; c < 3; ++c) rows[(y * w + x) * 3 + c] = to_byte(v[(c * h + y) * w + x]);
  std::vector<png_bytep> ptrs(h);
  for (int64_t y = 0; y < h; ++y) ptrs[y] = rows.data() + y * w * 3;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw DataError("libpng failed writing " + path.string());
  }
  png_init_io(png, fp.get());
  png_set_IHDR(png, info, static_cast<png_uint_32>(w), static_cast<png_uint_32>(h), 8, PNG_COLOR_TYPE_RGB,
               PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  png_write_image(png, ptrs.data());
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

Tensor read_png(const std::filesystem::path& path, DType dtype) {
  png_image img;
  std::memset(&img, 0, sizeof img);
  img.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&img, path.c_str())) throw DataError("cannot read PNG " + path.string());
  img.format = PNG_FORMAT_RGB;
  std::vector<png_byte> buf(PNG_IMAGE_SIZE(img));
  if (!png_image_finish_read(&img, nullptr, buf.data(), 0, nullptr)) {
    png_image_free(&img);
    throw DataError("cannot decode PNG " + path.string());
  }
  const int64_t h = img.height, w = img.width;
  std::vector<double> out(3 * h * w);
  for (int64_t y = 0; y < h; ++y)
    for (int64_t x = 0; x < w; ++x)
      for (int64_t c = 0; c < 3; ++c) out[(c * h + y) * w + x] = buf[(y * w + x) * 3 + c] / 255.0;
  return Tensor::from_data({3, h, w}, std::move(out), dtype);
}

std::string png_frame_name(int64_t index) {
  char name[32];
  std::snprintf(name, sizeof name, "frame_%05lld.png", static_cast<long long>(index));
  return name;
}

void write_png_sequence(const std::filesystem::path& dir, const Tensor& video, int64_t first_index) {
  const auto [t, h, w] = video_dims(video);
  std::filesystem::create_directories(dir);
  const auto v = video.data();
  for (int64_t f = 0; f < t; ++f) {
    std::vector<double> frame(3 * h * w);
    for (int64_t c = 0; c < 3; ++c) std::copy_n(v.begin() + (c * t + f) * h * w, h * w, frame.begin() + c * h * w);
    write_png(dir / png_frame_name(first_index + f), Tensor::from_data({3, h, w}, std::move(frame), DType::kF64));
  }
}

Tensor read_png_sequence(const std::filesystem::path& dir, DType dtype) {
  if (!std::filesystem::is_directory(dir)) throw DataError("not a directory: " + dir.string());
  std::vector<std::filesystem::path> files;
  for (const auto& e : std::filesystem::directory_iterator(dir)) {
    const std::string n = e.path().filename().string();
    if (n.rfind("frame_", 0) == 0 && e.path().extension() == ".png") files.push_back(e.path());
  }
  if (files.empty()) throw DataError("no frame_*.png files in " + dir.string());
  std::sort(files.begin(), files.end());
  std::vector<Tensor> frames;
  for (const auto& f : files) frames.push_back(read_png(f, DType::kF64));
  const int64_t t = static_cast<int64_t>(frames.size()), h = frames[0].size(1), w = frames[0].size(2);
  std::vector<double> out(3 * t * h * w);
  for (int64_t f = 0; f < t; ++f) {
    if (frames[f].size(1) != h || frames[f].size(2) != w) throw DataError("frame size changes within " + dir.string());
    const auto v = frames[f].data();
    for (int64_t c = 0; c < 3; ++c) std::copy_n(v.begin() + c * h * w, h * w, out.begin() + (c * t + f) * h * w);
  }
  return Tensor::from_data({1, 3, t, h, w}, std::move(out), dtype);
}

}  // namespace arvsr
