#include "arvsr/core/io.hpp"

#include <bit>
#include <cstring>
#include <fstream>

#include "arvsr/core/errors.hpp"

namespace arvsr {

namespace {

static_assert(std::endian::native == std::endian::little, "TNSR1 io assumes a little-endian host");

constexpr char kMagic[5] = {'T', 'N', 'S', 'R', '1'};
constexpr int kMaxRank = 16;

template <class T>
void put(std::ostream& os, T v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <class T>
T get(std::istream& is) {
  T v{};
  if (!is.read(reinterpret_cast<char*>(&v), sizeof(T))) throw DataError("truncated TNSR1 stream");
  return v;
}

}  // namespace

void write_tensor(std::ostream& os, const Tensor& t) {
  os.write(kMagic, sizeof(kMagic));
  put<uint8_t>(os, static_cast<uint8_t>(t.dtype()));
  put<uint8_t>(os, static_cast<uint8_t>(t.rank()));
  for (int64_t d : t.shape()) put<uint64_t>(os, static_cast<uint64_t>(d));
  const auto v = t.data();
  if (t.dtype() == DType::kF32) {
    std::vector<float> buf(v.begin(), v.end());
    os.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size() * sizeof(float)));
  } else {
    os.write(reinterpret_cast<const char*>(v.data()), static_cast<std::streamsize>(v.size() * sizeof(double)));
  }
  if (!os) throw DataError("failed writing TNSR1 stream");
}

Tensor read_tensor(std::istream& is) {
  char magic[5];
  if (!is.read(magic, sizeof(magic)) || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) {
    throw DataError("bad TNSR1 magic");
  }
  const auto code = get<uint8_t>(is);
  if (code > 1) throw DataError("unknown TNSR1 dtype code " + std::to_string(code));
  const auto rank = get<uint8_t>(is);
  if (rank > kMaxRank) throw DataError("TNSR1 rank too large");
  Shape shape(rank);
  for (auto& d : shape) {
    const auto e = get<uint64_t>(is);
    if (e > (uint64_t{1} << 40)) throw DataError("TNSR1 extent too large");
    d = static_cast<int64_t>(e);
  }
  const int64_t n = shape_numel(shape);
  std::vector<double> values(n);
  const DType dtype = code == 0 ? DType::kF32 : DType::kF64;
  if (dtype == DType::kF32) {
    std::vector<float> buf(n);
    if (!is.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(n * sizeof(float)))) {
      throw DataError("truncated TNSR1 payload");
    }
    std::copy(buf.begin(), buf.end(), values.begin());
  } else if (!is.read(reinterpret_cast<char*>(values.data()), static_cast<std::streamsize>(n * sizeof(double)))) {
    throw DataError("truncated TNSR1 payload");
  }
  try {
    return Tensor::from_data(std::move(shape), std::move(values), dtype);
  } catch (const NumericalError&) {
    throw DataError("TNSR1 payload contains non-finite values");
  }
}

void save_tensor(const std::filesystem::path& path, const Tensor& t) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw DataError("cannot open " + path.string() + " for writing");
  write_tensor(os, t);
}

Tensor load_tensor(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot open " + path.string());
  return read_tensor(is);
}

}  // namespace arvsr
