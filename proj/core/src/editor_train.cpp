#include <cmath>
#include <fstream>
#include <spdlog/spdlog.h>

#include "biasedit/adam.hpp"
#include "biasedit/editor.hpp"
#include "biasedit/error.hpp"
#include "biasedit/eval.hpp"
#include "biasedit/rng.hpp"

namespace biasedit {

namespace {

struct EditedLoss {
  double l_d = 0.0, l_r = 0.0;
  std::map<std::string, Tensor> grad_w;  // dL_E / dW̃ per edited path
};

// L_d and L_r of the edited model, with the edited weights as the only leaves.
EditedLoss edited_losses(const Model& pre, const Model& edited, const Tokenizer& tokenizer,
                         const std::vector<BiasInstance>& batch, const EditTarget& target,
                         double lambda, bool with_grad) {
  EditedLoss out;
  BuildOptions bo;
  bo.trainable = std::set<std::string>(target.paths.begin(), target.paths.end());

  std::vector<std::vector<TokenId>> pairs, mless;
  for (const auto& inst : batch) {
    pairs.push_back(tokenizer.encode(inst.x_stereo()));
    pairs.push_back(tokenizer.encode(inst.x_anti()));
    if (!inst.unrelated)
      throw DataError("editor training: instance " + inst.id + " has no unrelated term");
    mless.push_back(tokenizer.encode(inst.x_mless()));
  }

  ScoringBatch sb = make_scoring_batch(pairs);
  ModelGraph mg = build_model_graph(edited, sb.input, bo);
  NodeRef ld = add_debias_loss_nodes(mg.graph, add_avg_log_prob_nodes(mg, sb.targets));
  mg.graph.evaluate();
  out.l_d = mg.graph.value(ld).item();

  ScoringBatch mb = make_scoring_batch(mless);
  RetentionTarget rt = make_retention_target(pre, mb);
  ModelGraph mr = build_model_graph(edited, mb.input, bo);
  NodeRef lr = add_retention_loss_nodes(mr, rt);
  mr.graph.evaluate();
  out.l_r = mr.graph.value(lr).item();

  if (!std::isfinite(out.l_d + lambda * out.l_r))
    throw DivergenceError("editor training: non-finite editing loss");
  if (!with_grad) return out;

  const Gradients gd = mg.graph.gradients(ld);
  for (const auto& path : target.paths) out.grad_w[path] = gd.param(path);
  if (lambda > 0.0) {
    const Gradients gr = mr.graph.gradients(lr);
    for (const auto& path : target.paths) out.grad_w[path] += gr.param(path) * lambda;
  }
  return out;
}

}  // namespace

MetaStep meta_gradient(const Model& model, const Tokenizer& tokenizer, const EditorNet& editor,
                       const std::vector<BiasInstance>& batch) {
  const EditTarget& target = editor.config().target;
  const double lambda = editor.config().lambda;
  const GradFactors factors = inner_gradients(model, tokenizer, batch, target);
  EditorGraph eg = build_editor_graph(editor, factors);
  eg.graph.evaluate();
  EditShift shift;
  for (const auto& [path, node] : eg.shifts) shift.shifts[path] = eg.graph.value(node);
  const Model edited = apply_edit(model, shift);

  EditedLoss el = edited_losses(model, edited, tokenizer, batch, target, lambda, true);

  // The factors are constants, so dL_E/dφ = Σ_ℓ <dL_E/dW̃_ℓ, d∇̃_ℓ/dφ>: pull the
  // weight gradient back through the editor graph with a linear surrogate.
  Graph& g = eg.graph;
  std::optional<NodeRef> surrogate;
  for (const auto& [path, node] : eg.shifts) {
    NodeRef term = g.sum(g.mul(g.constant(el.grad_w.at(path)), node));
    surrogate = surrogate ? g.add(*surrogate, term) : term;
  }
  g.evaluate();
  MetaStep ms;
  ms.l_d = el.l_d;
  ms.l_r = el.l_r;
  ms.l_e = el.l_d + lambda * el.l_r;
  ms.grads = g.gradients(*surrogate).params();
  return ms;
}

double edit_loss(const Model& model, const Tokenizer& tokenizer, const EditorNet& editor,
                 const std::vector<BiasInstance>& batch) {
  const Model edited = edit_batch(model, editor, tokenizer, batch);
  const auto el = edited_losses(model, edited, tokenizer, batch, editor.config().target,
                                editor.config().lambda, false);
  return el.l_d + editor.config().lambda * el.l_r;
}

nlohmann::json to_json(const TrainLogRecord& r) {
  nlohmann::json j{{"step", r.step}, {"L_d", r.l_d}, {"L_r", r.l_r}, {"L_E", r.l_e}};
  j["dev_SS"] = r.dev_ss ? nlohmann::json(*r.dev_ss) : nlohmann::json(nullptr);
  j["dev_LMS"] = r.dev_lms ? nlohmann::json(*r.dev_lms) : nlohmann::json(nullptr);
  return j;
}

void write_train_log(const std::filesystem::path& path, const std::vector<TrainLogRecord>& log) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw DataError("cannot write training log " + path.string());
  for (const auto& r : log) os << to_json(r).dump() << '\n';
}

TrainResult train_editor(const Model& model, const Tokenizer& tokenizer, const SplitSpec& split,
                         const EditorConfig& config, const TrainOptions& options) {
  config.validate(model.config());
  if (split.train.empty() || split.dev.empty())
    throw DataError("train_editor: train and dev splits must be non-empty");

  EditorNet editor(config, model.config());
  Adam adam(AdamConfig{config.lr, 0.9, 0.999, 1e-8, 0.0});
  std::map<std::string, double> rate;
  for (const auto& path : config.target.paths)
    rate[EditorNet::log_alpha_name(path)] = config.alpha_lr / config.lr;

  // Training batches are drawn the way edits are applied at evaluation time:
  // each epoch shuffles the train set, cuts it into single-type batches and
  // visits them in random order.
  Rng rng(Rng::mix(config.seed, 0x7e417));
  std::vector<std::vector<BiasInstance>> epoch;
  std::size_t cursor = 0;
  auto next_batch = [&] {
    if (cursor == epoch.size()) {
      std::vector<BiasInstance> pool = split.train;
      rng.shuffle(pool);
      epoch = make_edit_batches(pool, config.batch_size);
      rng.shuffle(epoch);
      cursor = 0;
    }
    return epoch[cursor++];
  };

  TrainResult res{editor, {}, 0, 0.0, 0.0};
  bool have_selection = false;
  double best_gap = 0.0;
  // Step 0 is the identity editor; it is logged as the baseline but never selected.
  // Fallback when no trained checkpoint keeps ΔLMS >= -10: the one closest to SS 50.
  std::optional<TrainResult> fallback;
  double fallback_gap = 0.0;

  for (std::size_t step = 0; step <= config.max_steps; ++step) {
    TrainLogRecord rec;
    rec.step = step;
    if (step % config.eval_every == 0 || step == config.max_steps) {
      const MetricsReport dev =
          evaluate_edits(model, editor, tokenizer, split.dev, config.batch_size);
      rec.dev_ss = dev.overall.ss_post;
      rec.dev_lms = dev.overall.lms_post;
      const double gap = std::abs(dev.overall.ss_post - 50.0);
      const double dl = dev.overall.delta_lms;
      if (step == 0) {
      } else if (dl >= -10.0) {
        if (!have_selection || gap < best_gap) {
          have_selection = true;
          best_gap = gap;
          res.editor = editor;
          res.selected_step = step;
          res.selected_dev_ss = dev.overall.ss_post;
          res.selected_dev_delta_lms = dl;
        }
      } else if (!fallback || gap < fallback_gap) {
        fallback = TrainResult{editor, {}, step, dev.overall.ss_post, dl};
        fallback_gap = gap;
      }
    }
    const bool last = step == config.max_steps;
    const auto batch = next_batch();
    MetaStep ms = meta_gradient(model, tokenizer, editor, batch);
    rec.l_d = ms.l_d;
    rec.l_r = ms.l_r;
    rec.l_e = ms.l_e;
    if (!last) adam.step(editor.params(), ms.grads, 1.0, rate);
    res.log.push_back(rec);
    if (options.on_record) options.on_record(rec);
  }

  if (!have_selection && fallback) {
    spdlog::warn("train_editor: no checkpoint kept dev ΔLMS >= -10; using step {} (ΔLMS {:.2f})",
                 fallback->selected_step, fallback->selected_dev_delta_lms);
    res.editor = fallback->editor;
    res.selected_step = fallback->selected_step;
    res.selected_dev_ss = fallback->selected_dev_ss;
    res.selected_dev_delta_lms = fallback->selected_dev_delta_lms;
  }
  return res;
}

}  // namespace biasedit
