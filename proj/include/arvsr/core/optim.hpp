#pragma once

#include <vector>

#include "arvsr/core/params.hpp"

namespace arvsr {

struct AdamWConfig {
  double lr = 5e-5;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
};

// Decoupled weight decay Adam over the leaves of a ParamStore.
class AdamW {
 public:
  AdamW(const ParamStore& params, AdamWConfig cfg);

  // Consumes accumulated leaf gradients; leaves without a gradient are skipped.
  void step();
  void zero_grad();
  void set_lr(double lr) { cfg_.lr = lr; }
  const AdamWConfig& config() const { return cfg_; }
  int64_t steps() const { return t_; }

  NamedTensors state() const;
  void load_state(const std::map<std::string, Tensor>& state);

 private:
  std::vector<std::string> names_;
  std::vector<Tensor> params_;
  std::vector<std::vector<double>> m_, v_;
  AdamWConfig cfg_;
  int64_t t_ = 0;
};

// Scales all leaf gradients so their global L2 norm is at most max_norm. Returns the pre-clip norm.
double clip_grad_norm(const ParamStore& params, double max_norm);

}  // namespace arvsr
