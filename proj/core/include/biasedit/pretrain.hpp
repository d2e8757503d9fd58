#pragma once

#include <cstdint>
#include <functional>
#include <vector>

#include "biasedit/model.hpp"

namespace biasedit {

struct PretrainOptions {
  std::size_t steps = 3000;
  double lr = 3e-3;
  std::size_t batch_size = 16;
  std::size_t warmup = 100;
  double holdout_fraction = 0.05;
  double grad_clip = 1.0;
  // Called after every optimizer step with (step, mean train loss).
  std::function<void(std::size_t, double)> on_step;
};

struct PretrainResult {
  Model model;
  double heldout_perplexity = 0.0;
  std::vector<double> loss_curve;
};

/// Next-token cross-entropy training with Adam, linear warmup then cosine decay.
/// Deterministic for a fixed config.seed.
PretrainResult pretrain_model(const ModelConfig& config,
                              const std::vector<std::vector<TokenId>>& corpus,
                              const PretrainOptions& options);

Model pretrain(const ModelConfig& config, const std::vector<std::vector<TokenId>>& corpus,
               std::size_t steps, double lr);

}  // namespace biasedit
