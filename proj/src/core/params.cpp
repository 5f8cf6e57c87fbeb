#include "arvsr/core/params.hpp"

#include <cctype>
#include <fstream>

#include "arvsr/core/errors.hpp"
#include "arvsr/core/io.hpp"

namespace arvsr {

namespace fs = std::filesystem;

namespace {

std::string file_name(const std::string& name) {
  std::string out;
  for (char c : name) out.push_back((std::isalnum(static_cast<unsigned char>(c)) || c == '.' || c == '_' || c == '-') ? c : '_');
  return out + ".tnsr";
}

}  // namespace

void assign_values(Tensor& leaf, std::span<const double> values) {
  auto dst = leaf.mutable_data();
  if (dst.size() != values.size()) throw ShapeError("assign_values size mismatch");
  const bool f32 = leaf.dtype() == DType::kF32;
  for (size_t i = 0; i < dst.size(); ++i) dst[i] = f32 ? static_cast<double>(static_cast<float>(values[i])) : values[i];
}

void save_manifest(const fs::path& dir, const NamedTensors& tensors, const nlohmann::json& meta) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw DataError("cannot create " + dir.string() + ": " + ec.message());
  nlohmann::json entries = nlohmann::json::array();
  for (const auto& [name, t] : tensors) {
    const std::string file = file_name(name);
    save_tensor(dir / file, t);
    entries.push_back({{"name", name}, {"shape", t.shape()}, {"dtype", t.dtype() == DType::kF32 ? "f32" : "f64"}, {"file", file}});
  }
  nlohmann::json doc = {{"format", "TNSR1-manifest"}, {"tensors", entries}, {"meta", meta.is_null() ? nlohmann::json::object() : meta}};
  std::ofstream os(dir / "manifest.json");
  if (!os) throw DataError("cannot write manifest in " + dir.string());
  os << doc.dump(2) << '\n';
}

std::map<std::string, Tensor> load_manifest(const fs::path& dir, nlohmann::json* meta) {
  std::ifstream is(dir / "manifest.json");
  if (!is) throw DataError("missing manifest.json in " + dir.string());
  nlohmann::json doc;
  try {
    is >> doc;
  } catch (const nlohmann::json::exception& e) {
    throw DataError("malformed manifest in " + dir.string() + ": " + e.what());
  }
  std::map<std::string, Tensor> out;
  try {
    for (const auto& e : doc.at("tensors")) {
      Tensor t = load_tensor(dir / e.at("file").get<std::string>());
      if (t.shape() != e.at("shape").get<Shape>()) throw DataError("shape mismatch for " + e.at("name").get<std::string>());
      out.emplace(e.at("name").get<std::string>(), std::move(t));
    }
    if (meta) *meta = doc.value("meta", nlohmann::json::object());
  } catch (const nlohmann::json::exception& e) {
    throw DataError("malformed manifest in " + dir.string() + ": " + e.what());
  }
  return out;
}

Tensor ParamStore::add(const std::string& name, Tensor init) {
  if (contains(name)) throw Error("duplicate parameter " + name);
  Tensor t = init.detach();
  t.set_requires_grad(true);
  index_[name] = names_.size();
  names_.push_back(name);
  tensors_.push_back(t);
  return t;
}

const Tensor& ParamStore::get(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw Error("unknown parameter " + name);
  return tensors_[it->second];
}

std::vector<Tensor> ParamStore::tensors() const { return tensors_; }

NamedTensors ParamStore::named() const {
  NamedTensors out;
  for (size_t i = 0; i < names_.size(); ++i) out.emplace_back(names_[i], tensors_[i]);
  return out;
}

int64_t ParamStore::numel() const {
  int64_t n = 0;
  for (const auto& t : tensors_) n += t.numel();
  return n;
}

void ParamStore::zero_grad() {
  for (auto& t : tensors_) t.zero_grad();
}

void ParamStore::set_requires_grad(bool flag) {
  for (auto& t : tensors_) t.set_requires_grad(flag);
}

void ParamStore::copy_from(const ParamStore& other) {
  if (other.names_ != names_) throw Error("copy_from: parameter sets differ");
  for (size_t i = 0; i < tensors_.size(); ++i) {
    if (tensors_[i].shape() != other.tensors_[i].shape()) throw ShapeError("copy_from: shape mismatch for " + names_[i]);
    assign_values(tensors_[i], other.tensors_[i].data());
  }
}

void ParamStore::assign(const std::map<std::string, Tensor>& values, const std::string& prefix) {
  for (size_t i = 0; i < names_.size(); ++i) {
    auto it = values.find(prefix + names_[i]);
    if (it == values.end()) throw DataError("checkpoint lacks parameter " + prefix + names_[i]);
    if (it->second.shape() != tensors_[i].shape()) {
      throw DataError("checkpoint shape mismatch for " + names_[i] + ": " + shape_str(it->second.shape()) + " vs " +
                      shape_str(tensors_[i].shape()));
    }
    assign_values(tensors_[i], it->second.data());
  }
}

void ParamStore::save(const fs::path& dir, const nlohmann::json& meta) const { save_manifest(dir, named(), meta); }

nlohmann::json ParamStore::load(const fs::path& dir) {
  nlohmann::json meta;
  assign(load_manifest(dir, &meta));
  return meta;
}

}  // namespace arvsr
