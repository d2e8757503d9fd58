#include "biasedit/editor.hpp"

#include <cmath>
#include <set>
#include <spdlog/spdlog.h>

#include "biasedit/checkpoint.hpp"
#include "biasedit/error.hpp"
#include "biasedit/rng.hpp"

namespace biasedit {

// ---------------------------------------------------------------- config

void EditTarget::validate(const ModelConfig& config) const {
  if (paths.empty()) throw ConfigError("edit target is empty");
  std::set<std::string> seen;
  for (const auto& p : paths) {
    const auto block = paths::mlp_out_block(p);
    if (!block) throw ConfigError("edit target '" + p + "' is not a blocks.{i}.mlp.out path");
    if (*block >= config.n_blocks)
      throw ConfigError("edit target '" + p + "' is outside the model's " +
                        std::to_string(config.n_blocks) + " blocks");
    if (!seen.insert(p).second) throw ConfigError("duplicate edit target '" + p + "'");
  }
}

EditTarget EditTarget::last_blocks(std::size_t count, const ModelConfig& config) {
  if (count == 0 || count > config.n_blocks)
    throw ConfigError("cannot edit the last " + std::to_string(count) + " of " +
                      std::to_string(config.n_blocks) + " blocks");
  EditTarget t;
  for (std::size_t b = config.n_blocks - count; b < config.n_blocks; ++b)
    t.paths.push_back(paths::mlp_out(b));
  return t;
}

EditTarget EditTarget::from_blocks(const std::vector<std::size_t>& blocks) {
  EditTarget t;
  for (auto b : blocks) t.paths.push_back(paths::mlp_out(b));
  return t;
}

void EditorConfig::validate(const ModelConfig& model) const {
  target.validate(model);
  if (!(lambda >= 0.0) || !std::isfinite(lambda)) throw ConfigError("editor.lambda must be >= 0");
  if (batch_size == 0) throw ConfigError("editor.batch_size must be positive");
  if (!(lr > 0.0) || !(alpha_lr > 0.0)) throw ConfigError("editor learning rates must be positive");
  if (!(alpha_init > 0.0)) throw ConfigError("editor.alpha_init must be positive");
  if (hidden == 0) throw ConfigError("editor.hidden must be positive");
  if (eval_every == 0) throw ConfigError("editor.eval_every must be positive");
  if (!(init_scale >= 0.0)) throw ConfigError("editor.init_scale must be >= 0");
}

void to_json(nlohmann::json& j, const EditorConfig& c) {
  j = nlohmann::json{{"target", c.target.paths}, {"lambda", c.lambda},
                     {"batch_size", c.batch_size}, {"lr", c.lr},
                     {"alpha_lr", c.alpha_lr},     {"alpha_init", c.alpha_init},
                     {"max_steps", c.max_steps},   {"eval_every", c.eval_every},
                     {"seed", c.seed},             {"hidden", c.hidden},
                     {"init_scale", c.init_scale}, {"residual", c.residual}};
}

void from_json(const nlohmann::json& j, EditorConfig& c) {
  if (!j.is_object()) throw ConfigError("editor config must be an object");
  static const std::set<std::string> kKeys{"target",    "blocks",     "lambda",    "batch_size",
                                           "lr",        "alpha_lr",   "alpha_init", "max_steps",
                                           "eval_every", "seed",      "hidden",    "init_scale",
                                           "residual"};
  for (const auto& [k, _] : j.items())
    if (!kKeys.contains(k)) throw ConfigError("unknown editor config key '" + k + "'");
  try {
    EditorConfig d;
    if (j.contains("target")) d.target.paths = j.at("target").get<std::vector<std::string>>();
    if (j.contains("blocks"))
      d.target = EditTarget::from_blocks(j.at("blocks").get<std::vector<std::size_t>>());
    d.lambda = j.value("lambda", d.lambda);
    d.batch_size = j.value("batch_size", d.batch_size);
    d.lr = j.value("lr", d.lr);
    d.alpha_lr = j.value("alpha_lr", d.alpha_lr);
    d.alpha_init = j.value("alpha_init", d.alpha_init);
    d.max_steps = j.value("max_steps", d.max_steps);
    d.eval_every = j.value("eval_every", d.eval_every);
    d.seed = j.value("seed", d.seed);
    d.hidden = j.value("hidden", d.hidden);
    d.init_scale = j.value("init_scale", d.init_scale);
    d.residual = j.value("residual", d.residual);
    c = std::move(d);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("editor config: ") + e.what());
  }
}

// ---------------------------------------------------------------- editor net

namespace {

constexpr const char* kW1 = "net.w1";
constexpr const char* kB1 = "net.b1";
constexpr const char* kW2 = "net.w2";
constexpr const char* kB2 = "net.b2";
constexpr const char* kW3 = "net.w3";
constexpr const char* kB3 = "net.b3";

std::map<std::string, Tensor> init_editor_params(const EditorConfig& cfg, std::size_t d_in,
                                                 std::size_t d_out) {
  const std::size_t d = d_in + d_out;
  const std::size_t h = cfg.hidden;
  Rng rng(Rng::mix(cfg.seed, 0xed170f));
  auto gauss = [&](Shape shape, double std) {
    Tensor t(std::move(shape));
    for (double& v : t.data()) v = std * rng.normal();
    return t;
  };
  std::map<std::string, Tensor> p;
  p[kW1] = gauss({h, d}, cfg.init_scale * std::sqrt(2.0 / static_cast<double>(d)));
  p[kB1] = Tensor(Shape{h});
  p[kW2] = gauss({h, h}, cfg.init_scale * std::sqrt(2.0 / static_cast<double>(h)));
  p[kB2] = Tensor(Shape{h});
  // Zero output layer: the network starts as the identity (residual) or zero map.
  p[kW3] = Tensor(Shape{d, h});
  p[kB3] = Tensor(Shape{d});
  for (const auto& path : cfg.target.paths) {
    p[EditorNet::scale_name(path)] = Tensor(Shape{d}, 1.0);
    p[EditorNet::offset_name(path)] = Tensor(Shape{d});
    p[EditorNet::log_alpha_name(path)] = Tensor::scalar(std::log(cfg.alpha_init));
  }
  return p;
}

double rms(const Tensor& t) {
  double sq = 0.0;
  for (double v : t.data()) sq += v * v;
  const double r = std::sqrt(sq / static_cast<double>(t.numel()));
  return r > 0.0 ? r : 1.0;
}

constexpr char kEditorMagic[] = "BEDE";

}  // namespace

EditorNet::EditorNet(EditorConfig config, const ModelConfig& model)
    : config_(std::move(config)), d_in_(model.d_ff), d_out_(model.d_model) {
  config_.validate(model);
  params_ = init_editor_params(config_, d_in_, d_out_);
}

double EditorNet::alpha(const std::string& path) const {
  auto it = params_.find(log_alpha_name(path));
  if (it == params_.end()) throw ContractViolation("editor has no layer " + path);
  return std::exp(it->second.item());
}

void save_editor(const std::filesystem::path& path, const EditorNet& editor) {
  NamedArrays na;
  na.header = {{"kind", "editor"},
               {"config", editor.config()},
               {"d_in", editor.d_in()},
               {"d_out", editor.d_out()}};
  na.arrays = editor.params();
  write_named_arrays(path, kEditorMagic, na);
}

EditorNet load_editor(const std::filesystem::path& path) {
  NamedArrays na = read_named_arrays(path, kEditorMagic);
  if (na.header.value("kind", "") != "editor")
    throw DataError(path.string() + " is not an editor checkpoint");
  EditorConfig cfg;
  try {
    cfg = na.header.at("config").get<EditorConfig>();
  } catch (const ConfigError& e) {
    throw DataError(path.string() + ": " + e.what());
  }
  ModelConfig dims;
  dims.d_ff = na.header.at("d_in").get<std::size_t>();
  dims.d_model = na.header.at("d_out").get<std::size_t>();
  dims.n_heads = 1;
  dims.n_blocks = 0;
  for (const auto& p : cfg.target.paths)
    if (auto b = paths::mlp_out_block(p)) dims.n_blocks = std::max(dims.n_blocks, *b + 1);
  EditorNet net(cfg, dims);
  for (auto& [name, t] : net.params_) {
    auto it = na.arrays.find(name);
    if (it == na.arrays.end()) throw DataError(path.string() + ": missing array " + name);
    if (!it->second.same_shape(t)) throw DataError(path.string() + ": bad shape for " + name);
    t = std::move(it->second);
  }
  if (na.arrays.size() != net.params_.size())
    throw DataError(path.string() + ": unexpected arrays in editor checkpoint");
  return net;
}

EditorGraph build_editor_graph(const EditorNet& editor, const GradFactors& factors) {
  if (factors.batch == 0) throw ContractViolation("editor: factors from an empty batch");
  EditorGraph eg;
  Graph& g = eg.graph;
  const auto& p = editor.params();
  std::map<std::string, NodeRef> leaves;
  auto leaf = [&](const std::string& name) {
    auto it = leaves.find(name);
    if (it != leaves.end()) return it->second;
    return leaves[name] = g.leaf(name, p.at(name));
  };
  const std::size_t d_in = editor.d_in(), d_out = editor.d_out();
  for (const auto& path : editor.config().target.paths) {
    auto it = factors.layers.find(path);
    if (it == factors.layers.end()) throw ContractViolation("editor: no factors for " + path);
    const Tensor& u = it->second.u;
    const Tensor& delta = it->second.delta;
    if (u.rank() != 2 || delta.rank() != 2 || u.cols() != d_in || delta.cols() != d_out ||
        u.rows() != delta.rows())
      throw ShapeError("editor: factor dims " + shape_str(u.shape()) + " / " +
                       shape_str(delta.shape()) + " do not match editor (" +
                       std::to_string(d_in) + ", " + std::to_string(d_out) + ")");
    // Normalize each half by its batch RMS; the scales are data, not parameters.
    const double ru = rms(u), rd = rms(delta);
    const std::size_t rows = u.rows();
    Tensor z(Shape{rows, d_in + d_out});
    for (std::size_t r = 0; r < rows; ++r) {
      auto zr = z.row(r);
      const auto ur = u.row(r);
      const auto dr = delta.row(r);
      for (std::size_t j = 0; j < d_in; ++j) zr[j] = ur[j] / ru;
      for (std::size_t j = 0; j < d_out; ++j) zr[d_in + j] = dr[j] / rd;
    }
    NodeRef zc = g.constant(std::move(z));
    NodeRef zs = g.add_bias(g.mul_cols(zc, leaf(EditorNet::scale_name(path))),
                            leaf(EditorNet::offset_name(path)));
    NodeRef h1 = g.relu(g.add_bias(g.matmul_nt(zs, leaf(kW1)), leaf(kB1)));
    NodeRef h2 = g.relu(g.add_bias(g.matmul_nt(h1, leaf(kW2)), leaf(kB2)));
    NodeRef r = g.add_bias(g.matmul_nt(h2, leaf(kW3)), leaf(kB3));
    NodeRef out = editor.config().residual ? g.add(zc, r) : r;
    NodeRef ut = g.scale(g.slice_cols(out, 0, d_in), ru);
    NodeRef dt = g.scale(g.slice_cols(out, d_in, d_out), rd);
    NodeRef alpha = g.exp(leaf(EditorNet::log_alpha_name(path)));
    eg.shifts[path] = g.scale(g.scale_by(g.matmul_tn(dt, ut), alpha),
                              -1.0 / static_cast<double>(factors.batch));
  }
  return eg;
}

// ---------------------------------------------------------------- losses

double debias_loss_value(double s_bar, double a_bar) {
  const double x = s_bar - a_bar;
  return 2.0 * x * std::tanh(0.5 * x);
}

namespace {

std::vector<std::vector<TokenId>> stereo_anti_sequences(const Tokenizer& tok,
                                                        const std::vector<BiasInstance>& batch) {
  std::vector<std::vector<TokenId>> seqs;
  for (const auto& inst : batch) {
    seqs.push_back(tok.encode(inst.x_stereo()));
    seqs.push_back(tok.encode(inst.x_anti()));
  }
  return seqs;
}

std::vector<std::vector<TokenId>> mless_sequences(const Tokenizer& tok,
                                                  const std::vector<BiasInstance>& batch) {
  std::vector<std::vector<TokenId>> seqs;
  for (const auto& inst : batch) {
    if (!inst.unrelated)
      throw DataError("retention loss: instance " + inst.id + " has no unrelated term");
    seqs.push_back(tok.encode(inst.x_mless()));
  }
  return seqs;
}

BuildOptions frozen() {
  BuildOptions bo;
  bo.trainable = std::set<std::string>{};
  return bo;
}

}  // namespace

NodeRef add_debias_loss_nodes(Graph& g, NodeRef avg_lp) {
  const auto& shape = g.shape(avg_lp);
  if (shape.size() != 1 || shape[0] % 2 != 0)
    throw ShapeError("debias loss expects [2B] paired scores, got " + shape_str(shape));
  std::vector<std::size_t> si, ai;
  for (std::size_t i = 0; i < shape[0]; i += 2) {
    si.push_back(i);
    ai.push_back(i + 1);
  }
  NodeRef x = g.sub(g.gather(avg_lp, si), g.gather(avg_lp, ai));
  return g.sum(g.scale(g.mul(x, g.tanh(g.scale(x, 0.5))), 2.0));
}

double debias_loss(const Model& model, const Tokenizer& tokenizer, const BiasInstance& instance) {
  const auto lp = avg_log_probs(model, stereo_anti_sequences(tokenizer, {instance}));
  return debias_loss_value(lp[0], lp[1]);
}

RetentionTarget make_retention_target(const Model& pre, const ScoringBatch& mless) {
  RetentionTarget t{mless, {}, {}};
  ModelGraph mg = build_model_graph(pre, mless.input, frozen());
  NodeRef lp = mg.graph.log_softmax_rows(mg.logits);
  mg.graph.evaluate();
  t.logp_pre = mg.graph.value(lp);
  t.p_pre = t.logp_pre;
  for (double& v : t.p_pre.data()) v = std::exp(v);
  return t;
}

NodeRef add_retention_loss_nodes(ModelGraph& post, const RetentionTarget& target) {
  Graph& g = post.graph;
  NodeRef lp = g.log_softmax_rows(post.logits);
  NodeRef diff = g.sub(g.constant(target.logp_pre), lp);
  NodeRef kl = g.row_sum(g.mul(g.constant(target.p_pre), diff));
  return g.sum(g.segment_mean(kl, post.offsets));
}

double retention_loss(const Model& pre, const Model& post, const Tokenizer& tokenizer,
                      const BiasInstance& instance) {
  if (!(pre.config() == post.config()))
    throw ContractViolation("retention_loss: models have different configs");
  ScoringBatch sb = make_scoring_batch(mless_sequences(tokenizer, {instance}));
  RetentionTarget target = make_retention_target(pre, sb);
  ModelGraph mg = build_model_graph(post, sb.input, frozen());
  NodeRef loss = add_retention_loss_nodes(mg, target);
  mg.graph.evaluate();
  return mg.graph.value(loss).item();
}

// ---------------------------------------------------------------- editing

GradFactors inner_gradients(const Model& model, const Tokenizer& tokenizer,
                            const std::vector<BiasInstance>& batch, const EditTarget& target) {
  if (batch.empty()) throw ContractViolation("inner_gradients: empty batch");
  target.validate(model.config());
  const auto seqs = stereo_anti_sequences(tokenizer, batch);
  ScoringBatch sb = make_scoring_batch(seqs);
  BuildOptions bo;
  bo.trainable = std::set<std::string>(target.paths.begin(), target.paths.end());
  ModelGraph mg = build_model_graph(model, sb.input, bo);
  NodeRef loss = add_debias_loss_nodes(mg.graph, add_avg_log_prob_nodes(mg, sb.targets));
  mg.graph.evaluate();
  const Gradients grads = mg.graph.gradients(loss);

  // Input rows before the first token where x_stereo and x_anti differ carry
  // the same layer input in both sequences. Their deltas are summed into one
  // row, so the pair's opposing terms cancel before the editor sees them.
  std::vector<std::size_t> owner;
  for (std::size_t i = 0; i < seqs.size(); i += 2) {
    const auto& s = seqs[i];
    const auto& a = seqs[i + 1];
    const std::size_t os = owner.size();
    for (std::size_t p = 0; p < s.size(); ++p) owner.push_back(os + p);
    std::size_t d = 0;
    while (d < s.size() && d < a.size() && s[d] == a[d]) ++d;
    const std::size_t shared = std::min({d + 1, s.size(), a.size()});
    const std::size_t oa = owner.size();
    for (std::size_t p = 0; p < a.size(); ++p) owner.push_back(p < shared ? os + p : oa + p);
  }
  std::vector<std::size_t> kept;
  std::vector<std::size_t> slot(owner.size());
  for (std::size_t r = 0; r < owner.size(); ++r)
    if (owner[r] == r) {
      slot[r] = kept.size();
      kept.push_back(r);
    }

  GradFactors f;
  f.batch = batch.size();
  for (const auto& path : target.paths) {
    const std::size_t b = *paths::mlp_out_block(path);
    const Tensor& u = mg.graph.value(mg.mlp_in[b]);
    const Tensor* d = grads.node(mg.mlp_out[b]);
    const Tensor delta = d ? *d : Tensor(mg.graph.shape(mg.mlp_out[b]));
    LayerFactors lf{Tensor(Shape{kept.size(), u.cols()}), Tensor(Shape{kept.size(), delta.cols()})};
    for (std::size_t k = 0; k < kept.size(); ++k) {
      const auto src = u.row(kept[k]);
      std::copy(src.begin(), src.end(), lf.u.row(k).begin());
    }
    for (std::size_t r = 0; r < owner.size(); ++r) {
      auto dst = lf.delta.row(slot[owner[r]]);
      const auto src = delta.row(r);
      for (std::size_t j = 0; j < dst.size(); ++j) dst[j] += src[j];
    }
    f.layers[path] = std::move(lf);
  }
  return f;
}

EditShift editor_forward(const EditorNet& editor, const GradFactors& factors) {
  EditorGraph eg = build_editor_graph(editor, factors);
  eg.graph.evaluate();
  EditShift s;
  for (const auto& [path, node] : eg.shifts) s.shifts[path] = eg.graph.value(node);
  return s;
}

Model apply_edit(const Model& model, const EditShift& shift) {
  Model out = model;
  for (const auto& [path, delta] : shift.shifts) {
    if (!paths::mlp_out_block(path))
      throw ContractViolation("apply_edit: '" + path + "' is not an editable path");
    Tensor w = model.get_param(path);
    if (!w.same_shape(delta))
      throw ShapeError("apply_edit: shift " + shape_str(delta.shape()) + " for " + path +
                       " of shape " + shape_str(w.shape()));
    w += delta;
    if (!w.all_finite()) throw DivergenceError("apply_edit: non-finite edited weights at " + path);
    out.set_param(path, std::move(w));
  }
  return out;
}

Model edit_batch(const Model& model, const EditorNet& editor, const Tokenizer& tokenizer,
                 const std::vector<BiasInstance>& batch) {
  return apply_edit(model, editor_forward(editor, inner_gradients(model, tokenizer, batch,
                                                                  editor.config().target)));
}

std::vector<std::vector<BiasInstance>> make_edit_batches(const std::vector<BiasInstance>& instances,
                                                         std::size_t batch_size) {
  if (batch_size == 0) throw ContractViolation("batch size must be positive");
  std::vector<std::vector<BiasInstance>> out;
  for (BiasType t : kAllBiasTypes) {
    std::vector<BiasInstance> cur;
    for (const auto& inst : instances) {
      if (inst.bias_type != t) continue;
      cur.push_back(inst);
      if (cur.size() == batch_size) out.push_back(std::exchange(cur, {}));
    }
    if (!cur.empty()) out.push_back(std::move(cur));
  }
  return out;
}

std::vector<EditedBatch> batch_edit(const Model& model, const EditorNet& editor,
                                    const Tokenizer& tokenizer,
                                    const std::vector<BiasInstance>& test,
                                    std::size_t batch_size) {
  if (test.empty()) throw DataError("batch_edit: empty test set");
  if (batch_size != editor.config().batch_size)
    spdlog::warn("batch_edit: edit batch size {} differs from the editor's training batch size {}",
                 batch_size, editor.config().batch_size);
  std::vector<EditedBatch> out;
  for (auto& batch : make_edit_batches(test, batch_size)) {
    Model edited = edit_batch(model, editor, tokenizer, batch);
    out.push_back({std::move(batch), std::move(edited)});
  }
  return out;
}

}  // namespace biasedit
