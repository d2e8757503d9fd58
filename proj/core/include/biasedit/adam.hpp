#pragma once

#include <map>
#include <string>

#include "biasedit/tensor.hpp"

namespace biasedit {

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double grad_clip = 0.0;  // global L2 norm clip; 0 disables
};

/// Adaptive moment estimation over a set of named tensors.
class Adam {
 public:
  explicit Adam(AdamConfig cfg) : cfg_(cfg) {}

  /// One update; `lr_scale` multiplies the base rate (schedules), and
  /// `per_param_scale` lets individual tensors run at a different rate.
  void step(std::map<std::string, Tensor>& params, const std::map<std::string, Tensor>& grads,
            double lr_scale = 1.0, const std::map<std::string, double>& per_param_scale = {});

  std::size_t steps() const noexcept { return t_; }
  const AdamConfig& config() const noexcept { return cfg_; }

 private:
  AdamConfig cfg_;
  std::size_t t_ = 0;
  std::map<std::string, Tensor> m_, v_;
};

}  // namespace biasedit
