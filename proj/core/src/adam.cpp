#include "biasedit/adam.hpp"

#include <cmath>

#include "biasedit/error.hpp"

namespace biasedit {

void Adam::step(std::map<std::string, Tensor>& params, const std::map<std::string, Tensor>& grads,
                double lr_scale, const std::map<std::string, double>& per_param_scale) {
  ++t_;
  double clip = 1.0;
  if (cfg_.grad_clip > 0.0) {
    double sq = 0.0;
    for (const auto& [_, g] : grads)
      for (double v : g.data()) sq += v * v;
    const double norm = std::sqrt(sq);
    if (!std::isfinite(norm)) throw DivergenceError("non-finite gradient norm");
    if (norm > cfg_.grad_clip) clip = cfg_.grad_clip / norm;
  }
  const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
  for (const auto& [name, g] : grads) {
    auto it = params.find(name);
    if (it == params.end()) throw ContractViolation("adam: gradient for unknown tensor " + name);
    Tensor& p = it->second;
    if (!p.same_shape(g)) throw ShapeError("adam: gradient shape mismatch for " + name);
    auto [mit, fresh] = m_.try_emplace(name, g.shape());
    auto vit = v_.try_emplace(name, g.shape()).first;
    (void)fresh;
    double lr = cfg_.lr * lr_scale;
    if (auto s = per_param_scale.find(name); s != per_param_scale.end()) lr *= s->second;
    auto pd = p.data();
    auto md = mit->second.data();
    auto vd = vit->second.data();
    const auto gd = g.data();
    for (std::size_t i = 0; i < pd.size(); ++i) {
      const double gi = gd[i] * clip;
      md[i] = cfg_.beta1 * md[i] + (1.0 - cfg_.beta1) * gi;
      vd[i] = cfg_.beta2 * vd[i] + (1.0 - cfg_.beta2) * gi * gi;
      pd[i] -= lr * (md[i] / bc1) / (std::sqrt(vd[i] / bc2) + cfg_.eps);
    }
  }
}

}  // namespace biasedit
