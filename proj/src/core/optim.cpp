#include "arvsr/core/optim.hpp"

#include <cmath>

#include "arvsr/core/errors.hpp"

namespace arvsr {

AdamW::AdamW(const ParamStore& params, AdamWConfig cfg) : names_(params.names()), params_(params.tensors()), cfg_(cfg) {
  for (const auto& p : params_) {
    m_.emplace_back(p.numel(), 0.0);
    v_.emplace_back(p.numel(), 0.0);
  }
}

void AdamW::step() {
  ++t_;
  const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
  for (size_t i = 0; i < params_.size(); ++i) {
    Tensor& p = params_[i];
    if (!p.has_grad()) continue;
    const auto g = p.grad();
    auto w = p.mutable_data();
    auto& m = m_[i];
    auto& v = v_[i];
    const bool f32 = p.dtype() == DType::kF32;
    for (size_t k = 0; k < w.size(); ++k) {
      if (!std::isfinite(g[k])) throw NumericalError("non-finite gradient for " + names_[i]);
      m[k] = cfg_.beta1 * m[k] + (1.0 - cfg_.beta1) * g[k];
      v[k] = cfg_.beta2 * v[k] + (1.0 - cfg_.beta2) * g[k] * g[k];
      double nw = w[k] * (1.0 - cfg_.lr * cfg_.weight_decay);
      nw -= cfg_.lr * (m[k] / bc1) / (std::sqrt(v[k] / bc2) + cfg_.eps);
      w[k] = f32 ? static_cast<double>(static_cast<float>(nw)) : nw;
    }
  }
}

void AdamW::zero_grad() {
  for (auto& p : params_) p.zero_grad();
}

NamedTensors AdamW::state() const {
  NamedTensors out;
  out.emplace_back("step", Tensor::scalar(static_cast<double>(t_), DType::kF64));
  for (size_t i = 0; i < params_.size(); ++i) {
    out.emplace_back("m/" + names_[i], Tensor::from_data(params_[i].shape(), m_[i], DType::kF64));
    out.emplace_back("v/" + names_[i], Tensor::from_data(params_[i].shape(), v_[i], DType::kF64));
  }
  return out;
}

void AdamW::load_state(const std::map<std::string, Tensor>& state) {
  auto find = [&](const std::string& key) -> const Tensor& {
    auto it = state.find(key);
    if (it == state.end()) throw DataError("optimizer state lacks " + key);
    return it->second;
  };
  t_ = static_cast<int64_t>(find("step").item());
  for (size_t i = 0; i < params_.size(); ++i) {
    const Tensor& m = find("m/" + names_[i]);
    const Tensor& v = find("v/" + names_[i]);
    if (m.numel() != params_[i].numel() || v.numel() != params_[i].numel()) throw DataError("optimizer state shape mismatch");
    m_[i].assign(m.data().begin(), m.data().end());
    v_[i].assign(v.data().begin(), v.data().end());
  }
}

double clip_grad_norm(const ParamStore& params, double max_norm) {
  double sq = 0.0;
  for (const auto& p : params.tensors()) {
    if (!p.has_grad()) continue;
    for (double g : p.grad()) sq += g * g;
  }
  const double norm = std::sqrt(sq);
  if (norm > max_norm && norm > 0.0) {
    const double s = max_norm / norm;
    for (auto p : params.tensors()) {
      if (!p.has_grad()) continue;
      auto* node = const_cast<detail::Node*>(p.node());
      for (double& g : node->grad) g *= s;
    }
  }
  return norm;
}

}  // namespace arvsr
