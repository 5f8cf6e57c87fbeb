#pragma once

#include <filesystem>
#include <iosfwd>

#include "arvsr/core/tensor.hpp"

namespace arvsr {

// TNSR1 binary layout: "TNSR1", u8 dtype (0=f32, 1=f64), u8 rank,
// rank x u64 LE extents, then raw LE elements.
void write_tensor(std::ostream& os, const Tensor& t);
Tensor read_tensor(std::istream& is);

void save_tensor(const std::filesystem::path& path, const Tensor& t);
Tensor load_tensor(const std::filesystem::path& path);

}  // namespace arvsr
