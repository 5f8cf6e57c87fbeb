#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "arvsr/core/tensor.hpp"

namespace arvsr {

using NamedTensors = std::vector<std::pair<std::string, Tensor>>;

// Manifest directory: manifest.json lists name, shape, dtype and file of each
// tensor; tensors are TNSR1 files next to it. `meta` is stored verbatim.
void save_manifest(const std::filesystem::path& dir, const NamedTensors& tensors, const nlohmann::json& meta = {});
std::map<std::string, Tensor> load_manifest(const std::filesystem::path& dir, nlohmann::json* meta = nullptr);

// Ordered set of named trainable leaves. Modules keep handles to the same
// nodes, so in-place updates (optimizer, load) are visible everywhere.
class ParamStore {
 public:
  Tensor add(const std::string& name, Tensor init);
  const Tensor& get(const std::string& name) const;
  bool contains(const std::string& name) const { return index_.count(name) != 0; }
  const std::vector<std::string>& names() const { return names_; }
  std::vector<Tensor> tensors() const;
  NamedTensors named() const;
  int64_t numel() const;
  size_t size() const { return names_.size(); }

  void zero_grad();
  void set_requires_grad(bool flag);
  // Copies values by name; names and shapes must match.
  void copy_from(const ParamStore& other);
  void assign(const std::map<std::string, Tensor>& values, const std::string& prefix = "");

  void save(const std::filesystem::path& dir, const nlohmann::json& meta = {}) const;
  nlohmann::json load(const std::filesystem::path& dir);

 private:
  std::vector<std::string> names_;
  std::vector<Tensor> tensors_;
  std::map<std::string, size_t> index_;
};

// Overwrites a leaf's values in place, rounding to its dtype.
void assign_values(Tensor& leaf, std::span<const double> values);

}  // namespace arvsr
