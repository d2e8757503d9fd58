#include "biasedit/pretrain.hpp"

#include <cmath>
#include <numbers>

#include "biasedit/adam.hpp"
#include "biasedit/error.hpp"
#include "biasedit/eval.hpp"
#include "biasedit/rng.hpp"

namespace biasedit {

PretrainResult pretrain_model(const ModelConfig& config,
                              const std::vector<std::vector<TokenId>>& corpus,
                              const PretrainOptions& options) {
  config.validate();
  if (corpus.empty()) throw ContractViolation("pretrain: empty corpus");
  for (const auto& seq : corpus) {
    if (seq.empty()) throw ContractViolation("pretrain: empty sequence in corpus");
    if (seq.size() > config.max_seq)
      throw ContractViolation("pretrain: sequence of length " + std::to_string(seq.size()) +
                              " exceeds max_seq " + std::to_string(config.max_seq));
  }

  PretrainResult res{Model(config), 0.0, {}};
  Rng rng(Rng::mix(config.seed, 0x7072657472ULL));
  std::vector<std::size_t> order(corpus.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  rng.shuffle(order);
  std::size_t n_hold = static_cast<std::size_t>(options.holdout_fraction *
                                                static_cast<double>(corpus.size()));
  if (corpus.size() < 2) n_hold = 0;
  std::vector<std::size_t> train(order.begin(), order.end() - static_cast<std::ptrdiff_t>(n_hold));
  std::vector<std::vector<TokenId>> held;
  for (std::size_t i = train.size(); i < order.size(); ++i) held.push_back(corpus[order[i]]);

  Adam adam(AdamConfig{options.lr, 0.9, 0.98, 1e-8, options.grad_clip});
  std::size_t cursor = 0;
  for (std::size_t step = 0; step < options.steps; ++step) {
    std::vector<std::vector<TokenId>> batch;
    for (std::size_t b = 0; b < std::min(options.batch_size, train.size()); ++b) {
      if (cursor == train.size()) {
        rng.shuffle(train);
        cursor = 0;
      }
      batch.push_back(corpus[train[cursor++]]);
    }
    ScoringBatch sb = make_scoring_batch(batch);
    ModelGraph mg = build_model_graph(res.model, sb.input);
    Graph& g = mg.graph;
    NodeRef loss = g.scale(g.mean(g.pick(g.log_softmax_rows(mg.logits), sb.targets)), -1.0);
    g.evaluate();
    const double lv = g.value(loss).item();
    auto grads = g.gradients(loss).params();

    double sched;
    if (step < options.warmup) {
      sched = static_cast<double>(step + 1) / static_cast<double>(options.warmup);
    } else {
      const double t = static_cast<double>(step - options.warmup) /
                       static_cast<double>(std::max<std::size_t>(1, options.steps - options.warmup));
      sched = 0.1 + 0.9 * 0.5 * (1.0 + std::cos(std::numbers::pi * t));
    }
    std::map<std::string, Tensor> params = res.model.params();
    adam.step(params, grads, sched);
    for (auto& [name, t] : params) res.model.set_param(name, std::move(t));
    res.loss_curve.push_back(lv);
    if (options.on_step) options.on_step(step, lv);
  }
  res.heldout_perplexity = perplexity(res.model, held.empty() ? corpus : held);
  return res;
}

Model pretrain(const ModelConfig& config, const std::vector<std::vector<TokenId>>& corpus,
               std::size_t steps, double lr) {
  PretrainOptions o;
  o.steps = steps;
  o.lr = lr;
  return pretrain_model(config, corpus, o).model;
}

}  // namespace biasedit
