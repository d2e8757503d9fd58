#include "biasedit/model.hpp"

#include <cmath>

#include "biasedit/error.hpp"
#include "biasedit/rng.hpp"

namespace biasedit {

void ModelConfig::validate() const {
  if (n_blocks < 2) throw ConfigError("model needs at least 2 blocks");
  if (d_model < 1 || n_heads < 1 || d_ff < 1 || vocab_size < 1 || max_seq < 1)
    throw ConfigError("model dimensions must be positive");
  if (d_model % n_heads != 0) throw ConfigError("n_heads must divide d_model");
}

void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = nlohmann::json{{"n_blocks", c.n_blocks}, {"d_model", c.d_model}, {"n_heads", c.n_heads},
                     {"d_ff", c.d_ff},         {"vocab_size", c.vocab_size},
                     {"max_seq", c.max_seq},   {"seed", c.seed}};
}

void from_json(const nlohmann::json& j, ModelConfig& c) {
  ModelConfig d;
  c.n_blocks = j.value("n_blocks", d.n_blocks);
  c.d_model = j.value("d_model", d.d_model);
  c.n_heads = j.value("n_heads", d.n_heads);
  c.d_ff = j.value("d_ff", d.d_ff);
  c.vocab_size = j.value("vocab_size", d.vocab_size);
  c.max_seq = j.value("max_seq", d.max_seq);
  c.seed = j.value("seed", d.seed);
}

namespace paths {
std::string mlp_out(std::size_t b) { return "blocks." + std::to_string(b) + ".mlp.out"; }
std::string mlp_in(std::size_t b) { return "blocks." + std::to_string(b) + ".mlp.in"; }
std::string attn_qkv(std::size_t b) { return "blocks." + std::to_string(b) + ".attn.qkv"; }
std::string attn_out(std::size_t b) { return "blocks." + std::to_string(b) + ".attn.out"; }

std::optional<std::size_t> mlp_out_block(const std::string& path) {
  constexpr std::string_view prefix = "blocks.";
  constexpr std::string_view suffix = ".mlp.out";
  if (path.size() <= prefix.size() + suffix.size() || !path.starts_with(prefix) ||
      !path.ends_with(suffix))
    return std::nullopt;
  const std::string mid =
      path.substr(prefix.size(), path.size() - prefix.size() - suffix.size());
  if (mid.empty() || mid.find_first_not_of("0123456789") != std::string::npos) return std::nullopt;
  return static_cast<std::size_t>(std::stoul(mid));
}
}  // namespace paths

namespace {

std::string ln(const std::string& which, const std::string& part) {
  return "ln." + which + "." + part;
}
std::string blk(std::size_t b) { return "blocks." + std::to_string(b); }

}  // namespace

Model::Model(ModelConfig config) : Model(std::move(config), true) {}

Model Model::zeros(ModelConfig config) { return Model(std::move(config), false); }

Model::Model(ModelConfig config, bool randomize) : config_(std::move(config)) {
  config_.validate();
  const auto& c = config_;
  Rng rng(Rng::mix(c.seed, 0x4d6f64656cULL));
  auto normal = [&](Shape s, double stddev) {
    Tensor t(std::move(s));
    if (randomize)
      for (double& v : t.data()) v = stddev * rng.normal();
    return t;
  };
  auto filled = [&](Shape s, double v) { return Tensor(std::move(s), randomize ? v : 0.0); };
  const double w = 0.02;
  // Residual-branch outputs are scaled down with depth (GPT-2 recipe).
  const double w_res = w / std::sqrt(2.0 * static_cast<double>(c.n_blocks));

  params_["embed"] = normal({c.vocab_size, c.d_model}, w);
  params_["embed.pos"] = normal({c.max_seq, c.d_model}, w);
  for (std::size_t b = 0; b < c.n_blocks; ++b) {
    const std::string id = std::to_string(b);
    params_[ln(id + ".attn", "gain")] = filled({c.d_model}, 1.0);
    params_[ln(id + ".attn", "bias")] = Tensor(Shape{c.d_model});
    params_[blk(b) + ".attn.qkv"] = normal({3 * c.d_model, c.d_model}, w);
    params_[blk(b) + ".attn.qkv.bias"] = Tensor(Shape{3 * c.d_model});
    params_[blk(b) + ".attn.out"] = normal({c.d_model, c.d_model}, w_res);
    params_[blk(b) + ".attn.out.bias"] = Tensor(Shape{c.d_model});
    params_[ln(id + ".mlp", "gain")] = filled({c.d_model}, 1.0);
    params_[ln(id + ".mlp", "bias")] = Tensor(Shape{c.d_model});
    params_[blk(b) + ".mlp.in"] = normal({c.d_ff, c.d_model}, w);
    params_[blk(b) + ".mlp.in.bias"] = Tensor(Shape{c.d_ff});
    params_[blk(b) + ".mlp.out"] = normal({c.d_model, c.d_ff}, w_res);
    params_[blk(b) + ".mlp.out.bias"] = Tensor(Shape{c.d_model});
  }
  params_[ln("final", "gain")] = filled({c.d_model}, 1.0);
  params_[ln("final", "bias")] = Tensor(Shape{c.d_model});
  params_["head"] = normal({c.vocab_size, c.d_model}, w);
  params_["head.bias"] = Tensor(Shape{c.vocab_size});
}

const Tensor& Model::param(const std::string& path) const {
  auto it = params_.find(path);
  if (it == params_.end()) throw ContractViolation("unknown parameter path: " + path);
  return it->second;
}

Tensor Model::get_param(const std::string& path) const { return param(path); }

void Model::set_param(const std::string& path, Tensor value) {
  auto it = params_.find(path);
  if (it == params_.end()) throw ContractViolation("unknown parameter path: " + path);
  if (!value.same_shape(it->second))
    throw ShapeError("set_param(" + path + "): shape " + shape_str(value.shape()) +
                     " does not match " + shape_str(it->second.shape()));
  if (!value.all_finite()) throw ContractViolation("set_param(" + path + "): non-finite value");
  it->second = std::move(value);
}

std::size_t Model::parameter_count() const {
  std::size_t n = 0;
  for (const auto& [_, t] : params_) n += t.numel();
  return n;
}

const char* site_name(Site s) {
  switch (s) {
    case Site::kEmbed: return "embed";
    case Site::kAttnOut: return "attn_out";
    case Site::kMlpIn: return "mlp_in";
    case Site::kMlpOut: return "mlp_out";
    case Site::kBlockOut: return "block_out";
  }
  return "?";
}

Site parse_site(const std::string& s) {
  for (Site v : {Site::kEmbed, Site::kAttnOut, Site::kMlpIn, Site::kMlpOut, Site::kBlockOut})
    if (s == site_name(v)) return v;
  throw ConfigError("unknown activation site: " + s);
}

const Tensor& ActivationCache::at(std::size_t position, std::size_t layer, Site site) const {
  auto it = entries_.find(SiteKey{position, layer, site});
  if (it == entries_.end())
    throw ContractViolation("activation cache has no entry for position " +
                            std::to_string(position) + ", layer " + std::to_string(layer) +
                            ", site " + site_name(site));
  return it->second;
}

void PackedInput::append(std::span<const TokenId> seq) {
  if (seq.empty()) throw ContractViolation("cannot pack an empty sequence");
  ids.insert(ids.end(), seq.begin(), seq.end());
  offsets.push_back(ids.size());
}

ModelGraph build_model_graph(const Model& model, const PackedInput& input,
                             const BuildOptions& options) {
  const ModelConfig& c = model.config();
  if (input.sequences() == 0) throw ContractViolation("empty packed input");
  for (std::size_t s = 0; s < input.sequences(); ++s) {
    const std::size_t len = input.offsets[s + 1] - input.offsets[s];
    if (len > c.max_seq)
      throw ContractViolation("sequence length " + std::to_string(len) + " exceeds max_seq " +
                              std::to_string(c.max_seq));
  }
  for (auto id : input.ids)
    if (id >= c.vocab_size) throw ContractViolation("token id outside vocabulary");

  ModelGraph mg;
  mg.offsets = input.offsets;
  Graph& g = mg.graph;
  auto p = [&](const std::string& path) {
    if (!options.trainable || options.trainable->contains(path))
      return g.leaf(path, model.param(path));
    return g.constant(model.param(path));
  };

  std::map<std::pair<std::size_t, Site>, std::map<std::size_t, Tensor>> patches;
  for (const auto& [key, value] : options.overrides) {
    if (key.row >= input.rows()) throw ContractViolation("override row out of range");
    if (key.site == Site::kEmbed ? key.layer != 0 : key.layer >= c.n_blocks)
      throw ContractViolation("override layer out of range");
    patches[{key.layer, key.site}][key.row] = value;
  }
  auto patch = [&](NodeRef n, std::size_t layer, Site site) {
    auto it = patches.find({layer, site});
    if (it == patches.end()) return n;
    return g.patch_rows(n, it->second);
  };

  std::vector<std::size_t> pos_ids;
  pos_ids.reserve(input.rows());
  for (std::size_t s = 0; s < input.sequences(); ++s)
    for (std::size_t k = input.offsets[s]; k < input.offsets[s + 1]; ++k)
      pos_ids.push_back(k - input.offsets[s]);

  NodeRef x = g.add(g.embedding(p("embed"), input.ids), g.embedding(p("embed.pos"), pos_ids));
  if (!options.embed_noise.empty()) {
    Tensor noise(Shape{input.rows(), c.d_model});
    for (const auto& [row, v] : options.embed_noise) {
      if (row >= input.rows() || v.numel() != c.d_model)
        throw ContractViolation("embedding noise row/shape mismatch");
      std::copy(v.data().begin(), v.data().end(), noise.row(row).begin());
    }
    x = g.add(x, g.constant(std::move(noise)));
  }
  x = patch(x, 0, Site::kEmbed);
  mg.embed = x;

  for (std::size_t b = 0; b < c.n_blocks; ++b) {
    const std::string id = std::to_string(b);
    const std::string pre = "blocks." + id;
    NodeRef h = g.layer_norm(x, p("ln." + id + ".attn.gain"), p("ln." + id + ".attn.bias"));
    NodeRef qkv = g.add_bias(g.matmul_nt(h, p(pre + ".attn.qkv")), p(pre + ".attn.qkv.bias"));
    NodeRef att = g.causal_attention(qkv, c.n_heads, input.offsets);
    NodeRef a = g.add_bias(g.matmul_nt(att, p(pre + ".attn.out")), p(pre + ".attn.out.bias"));
    a = patch(a, b, Site::kAttnOut);
    mg.attn_out.push_back(a);
    x = g.add(x, a);

    NodeRef h2 = g.layer_norm(x, p("ln." + id + ".mlp.gain"), p("ln." + id + ".mlp.bias"));
    NodeRef u = g.gelu(g.add_bias(g.matmul_nt(h2, p(pre + ".mlp.in")), p(pre + ".mlp.in.bias")));
    u = patch(u, b, Site::kMlpIn);
    mg.mlp_in.push_back(u);
    NodeRef m = g.add_bias(g.matmul_nt(u, p(pre + ".mlp.out")), p(pre + ".mlp.out.bias"));
    m = patch(m, b, Site::kMlpOut);
    mg.mlp_out.push_back(m);
    x = g.add(x, m);
    x = patch(x, b, Site::kBlockOut);
    mg.block_out.push_back(x);
  }
  NodeRef hf = g.layer_norm(x, p("ln.final.gain"), p("ln.final.bias"));
  mg.logits = g.add_bias(g.matmul_nt(hf, p("head")), p("head.bias"));
  return mg;
}

ForwardResult forward(const Model& model, std::span<const TokenId> tokens,
                      const ForwardOptions& options) {
  const ModelConfig& c = model.config();
  if (tokens.empty() || tokens.size() > c.max_seq)
    throw ContractViolation("forward: sequence length must be in [1, max_seq]");
  PackedInput in;
  in.append(tokens);

  BuildOptions bo;
  bo.trainable = std::set<std::string>{};
  for (const auto& [key, value] : options.overrides) {
    if (key.position >= tokens.size()) throw ContractViolation("override position out of range");
    const std::size_t width = key.site == Site::kMlpIn ? c.d_ff : c.d_model;
    if (value.numel() != width)
      throw ShapeError(std::string("override for site ") + site_name(key.site) +
                       " must have " + std::to_string(width) + " entries");
    bo.overrides[RowSiteKey{key.position, key.layer, key.site}] = value;
  }
  if (options.noise && options.noise->sigma != 0.0) {
    Rng rng(options.noise->seed);
    for (auto pos : options.noise->positions) {
      if (pos >= tokens.size()) throw ContractViolation("noise position out of range");
      Tensor v(Shape{c.d_model});
      for (double& e : v.data()) e = options.noise->sigma * rng.normal();
      bo.embed_noise[pos] = std::move(v);
    }
  }

  ModelGraph mg = build_model_graph(model, in, bo);
  mg.graph.evaluate();
  ForwardResult res;
  res.logits = mg.graph.value(mg.logits);
  if (options.capture) {
    ActivationCache cache;
    auto store = [&](NodeRef n, std::size_t layer, Site site) {
      const Tensor& v = mg.graph.value(n);
      for (std::size_t k = 0; k < tokens.size(); ++k) {
        const auto r = v.row(k);
        cache.put(SiteKey{k, layer, site},
                  Tensor(Shape{r.size()}, std::vector<double>(r.begin(), r.end())));
      }
    };
    store(mg.embed, 0, Site::kEmbed);
    for (std::size_t b = 0; b < c.n_blocks; ++b) {
      store(mg.attn_out[b], b, Site::kAttnOut);
      store(mg.mlp_in[b], b, Site::kMlpIn);
      store(mg.mlp_out[b], b, Site::kMlpOut);
      store(mg.block_out[b], b, Site::kBlockOut);
    }
    res.cache = std::move(cache);
  }
  return res;
}

ScoringBatch make_scoring_batch(const std::vector<std::vector<TokenId>>& sequences) {
  ScoringBatch sb;
  std::vector<TokenId> in;
  for (const auto& seq : sequences) {
    if (seq.empty()) throw ContractViolation("cannot score an empty sequence");
    in.assign(1, Tokenizer::kBos);
    in.insert(in.end(), seq.begin(), seq.end() - 1);
    sb.input.append(in);
    sb.targets.insert(sb.targets.end(), seq.begin(), seq.end());
  }
  return sb;
}

NodeRef add_avg_log_prob_nodes(ModelGraph& mg, const std::vector<TokenId>& targets) {
  Graph& g = mg.graph;
  NodeRef lp = g.pick(g.log_softmax_rows(mg.logits), targets);
  return g.segment_mean(lp, mg.offsets);
}

std::vector<double> avg_log_probs(const Model& model,
                                  const std::vector<std::vector<TokenId>>& sequences) {
  if (sequences.empty()) return {};
  ScoringBatch sb = make_scoring_batch(sequences);
  BuildOptions bo;
  bo.trainable = std::set<std::string>{};
  ModelGraph mg = build_model_graph(model, sb.input, bo);
  NodeRef means = add_avg_log_prob_nodes(mg, sb.targets);
  mg.graph.evaluate();
  const auto v = mg.graph.value(means).data();
  return {v.begin(), v.end()};
}

double avg_log_prob(const Model& model, std::span<const TokenId> tokens) {
  if (tokens.empty()) throw ContractViolation("avg_log_prob: empty sequence");
  return avg_log_probs(model, {std::vector<TokenId>(tokens.begin(), tokens.end())}).front();
}

}  // namespace biasedit
