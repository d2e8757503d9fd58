#include "biasedit/tracing.hpp"

#include <cmath>
#include <fstream>
#include <iomanip>
#include <set>
#include <sstream>
#include <spdlog/spdlog.h>

#include "biasedit/error.hpp"
#include "biasedit/rng.hpp"

namespace biasedit {

const char* role_name(TraceRole r) {
  switch (r) {
    case TraceRole::kAttributeWord: return "attribute_word";
    case TraceRole::kAttributeTerm: return "attribute_term";
    case TraceRole::kBeforeTerm: return "before_term";
  }
  return "?";
}

TraceRole parse_role(const std::string& s) {
  for (TraceRole r : {TraceRole::kAttributeWord, TraceRole::kAttributeTerm, TraceRole::kBeforeTerm})
    if (s == role_name(r)) return r;
  throw ConfigError("unknown trace role '" + s + "'");
}

void TraceConfig::validate() const {
  if (!(sigma_multiplier > 0.0)) throw ConfigError("trace.sigma_multiplier must be positive");
  if (sites.empty()) throw ConfigError("trace.sites must be non-empty");
  if (roles.empty()) throw ConfigError("trace.roles must be non-empty");
  for (Site s : sites)
    if (s == Site::kEmbed) throw ConfigError("trace site 'embed' is block_out layer 0");
}

void to_json(nlohmann::json& j, const TraceConfig& c) {
  std::vector<std::string> sites, roles;
  for (Site s : c.sites) sites.emplace_back(site_name(s));
  for (TraceRole r : c.roles) roles.emplace_back(role_name(r));
  j = nlohmann::json{{"sigma_multiplier", c.sigma_multiplier},
                     {"n_samples", c.n_samples},
                     {"sites", sites},
                     {"roles", roles},
                     {"seed", c.seed},
                     {"multi_position", c.multi_position},
                     {"per_position", c.per_position}};
}

void from_json(const nlohmann::json& j, TraceConfig& c) {
  if (!j.is_object()) throw ConfigError("trace config must be an object");
  static const std::set<std::string> kKeys{"sigma_multiplier", "n_samples",      "sites", "roles",
                                           "seed",             "multi_position", "per_position"};
  for (const auto& [k, _] : j.items())
    if (!kKeys.contains(k)) throw ConfigError("unknown trace config key '" + k + "'");
  try {
    TraceConfig d;
    d.sigma_multiplier = j.value("sigma_multiplier", d.sigma_multiplier);
    d.n_samples = j.value("n_samples", d.n_samples);
    d.seed = j.value("seed", d.seed);
    d.multi_position = j.value("multi_position", d.multi_position);
    d.per_position = j.value("per_position", d.per_position);
    if (j.contains("sites")) {
      d.sites.clear();
      for (const auto& s : j.at("sites")) {
        try {
          d.sites.push_back(parse_site(s.get<std::string>()));
        } catch (const ContractViolation& e) {
          throw ConfigError(e.what());
        }
      }
    }
    if (j.contains("roles")) {
      d.roles.clear();
      for (const auto& r : j.at("roles")) d.roles.push_back(parse_role(r.get<std::string>()));
    }
    c = std::move(d);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("trace config: ") + e.what());
  }
}

std::size_t trace_layers(const ModelConfig& config, Site site) {
  switch (site) {
    case Site::kBlockOut: return config.n_blocks + 1;
    case Site::kAttnOut:
    case Site::kMlpOut:
    case Site::kMlpIn: return config.n_blocks;
    case Site::kEmbed: break;
  }
  throw ContractViolation("site embed is traced as block_out layer 0");
}

double bias_gap(const Model& model, const Tokenizer& tokenizer, const BiasInstance& instance) {
  const auto lp = avg_log_probs(
      model, {tokenizer.encode(instance.x_stereo()), tokenizer.encode(instance.x_anti())});
  return std::abs(lp[0] - lp[1]);
}

double embedding_sigma(const Tensor& embed, const std::vector<TokenId>& rows, double multiplier) {
  if (rows.empty()) throw DataError("noise calibration: empty reference set");
  double sum = 0.0, sq = 0.0;
  std::size_t n = 0;
  for (auto r : rows) {
    if (r >= embed.rows()) throw ContractViolation("noise calibration: row out of range");
    for (double v : embed.row(r)) {
      sum += v;
      ++n;
    }
  }
  const double mean = sum / static_cast<double>(n);
  for (auto r : rows)
    for (double v : embed.row(r)) sq += (v - mean) * (v - mean);
  return multiplier * std::sqrt(sq / static_cast<double>(n));
}

double calibrate_sigma(const Model& model, const Tokenizer& tokenizer,
                       const AttributeLexicon& lexicon, double multiplier) {
  std::set<TokenId> ids;
  for (BiasType t : kAllBiasTypes)
    for (const auto& w : lexicon.words(t))
      for (const auto& piece : Tokenizer::split(w))
        if (tokenizer.contains(piece)) ids.insert(tokenizer.id(piece));
  const double sigma =
      embedding_sigma(model.param("embed"), {ids.begin(), ids.end()}, multiplier);
  if (sigma == 0.0) spdlog::warn("noise calibration: attribute-word embeddings are constant; sigma = 0");
  return sigma;
}

std::uint64_t instance_noise_seed(std::uint64_t seed, const BiasInstance& instance) {
  std::uint64_t h = 1469598103934665603ULL;  // FNV-1a
  for (unsigned char c : instance.id) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return Rng::mix(seed, h);
}

// ---------------------------------------------------------------- runs

namespace {

struct PairLayout {
  std::vector<TokenId> stereo, anti;          // scoring inputs (BOS-prefixed)
  std::vector<TokenId> stereo_t, anti_t;      // targets
  AttributeSpans spans;
  std::size_t term_len_s = 0;
  std::ptrdiff_t shift = 0;  // anti positions after the term move by this much

  std::size_t anti_pos(std::size_t p) const {
    return p < spans.term + term_len_s && p >= spans.term
               ? p
               : (p < spans.term ? p : static_cast<std::size_t>(static_cast<std::ptrdiff_t>(p) + shift));
  }
};

PairLayout make_layout(const Tokenizer& tok, const BiasInstance& inst) {
  PairLayout L;
  L.spans = extract_attribute_spans(inst, tok);
  L.stereo_t = tok.encode(inst.x_stereo());
  L.anti_t = tok.encode(inst.x_anti());
  L.term_len_s = Tokenizer::split(inst.stereotype).size();
  L.shift = static_cast<std::ptrdiff_t>(Tokenizer::split(inst.anti_stereotype).size()) -
            static_cast<std::ptrdiff_t>(L.term_len_s);
  auto inputs = [](const std::vector<TokenId>& t) {
    std::vector<TokenId> in{Tokenizer::kBos};
    in.insert(in.end(), t.begin(), t.end() - 1);
    return in;
  };
  L.stereo = inputs(L.stereo_t);
  L.anti = inputs(L.anti_t);
  return L;
}

// Input row of sentence position p within a scoring sequence of length K.
std::size_t input_row(std::size_t p, std::size_t k, const std::string& id) {
  if (p + 1 >= k)
    throw DataError("instance " + id + ": position " + std::to_string(p) +
                    " is the final token and never enters the model");
  return p + 1;
}

std::pair<std::size_t, Site> model_site(const TraceCell& c, const ModelConfig& cfg) {
  if (c.layer >= trace_layers(cfg, c.site))
    throw ContractViolation("trace layer " + std::to_string(c.layer) + " out of range for site " +
                            site_name(c.site));
  if (c.site == Site::kBlockOut)
    return c.layer == 0 ? std::pair{std::size_t{0}, Site::kEmbed}
                        : std::pair{c.layer - 1, Site::kBlockOut};
  return {c.layer, c.site};
}

NodeRef site_node(const ModelGraph& mg, std::size_t layer, Site site) {
  switch (site) {
    case Site::kEmbed: return mg.embed;
    case Site::kAttnOut: return mg.attn_out[layer];
    case Site::kMlpIn: return mg.mlp_in[layer];
    case Site::kMlpOut: return mg.mlp_out[layer];
    case Site::kBlockOut: return mg.block_out[layer];
  }
  throw ContractViolation("bad site");
}

Tensor row_of(const Tensor& t, std::size_t r) {
  const auto s = t.row(r);
  return Tensor(Shape{s.size()}, std::vector<double>(s.begin(), s.end()));
}

}  // namespace

RestorationRuns run_restorations(const Model& model, const Tokenizer& tokenizer,
                                 const BiasInstance& instance, double sigma, std::uint64_t seed,
                                 const std::vector<std::vector<TraceCell>>& restorations) {
  if (!(sigma >= 0.0) || !std::isfinite(sigma)) throw ContractViolation("sigma must be >= 0");
  const ModelConfig& cfg = model.config();
  const PairLayout L = make_layout(tokenizer, instance);
  const std::size_t ks = L.stereo.size(), ka = L.anti.size();

  // Clean run.
  PackedInput clean_in;
  clean_in.append(L.stereo);
  clean_in.append(L.anti);
  BuildOptions frozen;
  frozen.trainable = std::set<std::string>{};
  std::vector<TokenId> targets = L.stereo_t;
  targets.insert(targets.end(), L.anti_t.begin(), L.anti_t.end());
  ModelGraph clean = build_model_graph(model, clean_in, frozen);
  NodeRef clean_avg = add_avg_log_prob_nodes(clean, targets);
  clean.graph.evaluate();
  RestorationRuns out;
  {
    const Tensor& v = clean.graph.value(clean_avg);
    out.clean_fd = std::abs(v[0] - v[1]);
  }

  // Noise, drawn once and applied identically to both sentences of every run.
  std::vector<std::pair<std::size_t, std::size_t>> noise_rows;  // (stereo row, anti row)
  for (auto p : L.spans.attribute_words)
    noise_rows.emplace_back(input_row(p, ks, instance.id), input_row(L.anti_pos(p), ka, instance.id));
  std::vector<Tensor> noise;
  if (sigma > 0.0) {
    Rng rng(seed);
    for (std::size_t i = 0; i < noise_rows.size(); ++i) {
      Tensor v(Shape{cfg.d_model});
      for (double& e : v.data()) e = sigma * rng.normal();
      noise.push_back(std::move(v));
    }
  }

  // Corrupted run followed by the restoration runs, packed in chunks.
  constexpr std::size_t kChunk = 48;
  const std::size_t total = restorations.size() + 1;
  for (std::size_t start = 0; start < total; start += kChunk) {
    const std::size_t end = std::min(total, start + kChunk);
    PackedInput in;
    BuildOptions bo;
    bo.trainable = std::set<std::string>{};
    std::vector<TokenId> tg;
    for (std::size_t run = start; run < end; ++run) {
      const std::size_t base_s = in.rows();
      in.append(L.stereo);
      const std::size_t base_a = in.rows();
      in.append(L.anti);
      tg.insert(tg.end(), L.stereo_t.begin(), L.stereo_t.end());
      tg.insert(tg.end(), L.anti_t.begin(), L.anti_t.end());
      for (std::size_t i = 0; i < noise.size(); ++i) {
        bo.embed_noise[base_s + noise_rows[i].first] = noise[i];
        bo.embed_noise[base_a + noise_rows[i].second] = noise[i];
      }
      if (run == 0) continue;
      for (const TraceCell& c : restorations[run - 1]) {
        const auto [layer, site] = model_site(c, cfg);
        const NodeRef src = site_node(clean, layer, site);
        const Tensor& cv = clean.graph.value(src);
        const std::size_t rs = input_row(c.position, ks, instance.id);
        const std::size_t ra = input_row(L.anti_pos(c.position), ka, instance.id);
        // Restored values come only from the clean run's activations.
        bo.overrides[RowSiteKey{base_s + rs, layer, site}] = row_of(cv, rs);
        bo.overrides[RowSiteKey{base_a + ra, layer, site}] = row_of(cv, ks + ra);
      }
    }
    ModelGraph mg = build_model_graph(model, in, bo);
    NodeRef avg = add_avg_log_prob_nodes(mg, tg);
    mg.graph.evaluate();
    const Tensor& v = mg.graph.value(avg);
    for (std::size_t run = start; run < end; ++run) {
      const std::size_t j = 2 * (run - start);
      const double fd = std::abs(v[j] - v[j + 1]);
      if (run == 0)
        out.corrupted_fd = fd;
      else
        out.restored_fd.push_back(fd);
    }
  }
  return out;
}

// ---------------------------------------------------------------- grids

TraceResult trace_instance(const Model& model, const Tokenizer& tokenizer,
                           const BiasInstance& instance, const TraceConfig& config, double sigma) {
  config.validate();
  const ModelConfig& cfg = model.config();
  const auto spans = extract_attribute_spans(instance, tokenizer);
  const auto stereo_tokens = Tokenizer::split(instance.x_stereo());

  // Each grid row is a list of restoration groups whose f_d values are averaged.
  struct Row {
    std::string label;
    std::vector<std::vector<std::size_t>> groups;  // positions restored together
  };
  std::vector<Row> rows;
  if (config.per_position) {
    if (Tokenizer::split(instance.stereotype).size() !=
        Tokenizer::split(instance.anti_stereotype).size())
      throw DataError("per-position trace needs equal-length attribute terms (" + instance.id + ")");
    for (std::size_t p = 0; p + 1 < stereo_tokens.size(); ++p)
      rows.push_back({"p" + std::to_string(p) + ":" + stereo_tokens[p], {{p}}});
  } else {
    for (TraceRole role : config.roles) {
      Row r{role_name(role), {}};
      std::vector<std::size_t> pos;
      switch (role) {
        case TraceRole::kAttributeWord: pos = spans.attribute_words; break;
        case TraceRole::kAttributeTerm: pos = {spans.term}; break;
        case TraceRole::kBeforeTerm: pos = {spans.before_term}; break;
      }
      if (config.multi_position)
        r.groups.push_back(pos);
      else
        for (auto p : pos) r.groups.push_back({p});
      rows.push_back(std::move(r));
    }
  }

  std::vector<std::vector<TraceCell>> runs;
  for (Site site : config.sites)
    for (const auto& row : rows)
      for (std::size_t layer = 0; layer < trace_layers(cfg, site); ++layer)
        for (const auto& group : row.groups) {
          std::vector<TraceCell> cells;
          for (auto p : group) cells.push_back({p, layer, site});
          runs.push_back(std::move(cells));
        }

  const RestorationRuns rr = run_restorations(model, tokenizer, instance, sigma,
                                              instance_noise_seed(config.seed, instance), runs);
  TraceResult res;
  res.clean_fd = rr.clean_fd;
  res.corrupted_fd = rr.corrupted_fd;
  res.sigma = sigma;
  res.n = 1;
  std::size_t k = 0;
  for (Site site : config.sites) {
    TraceGrid grid;
    const std::size_t layers = trace_layers(cfg, site);
    for (const auto& row : rows) {
      grid.rows.push_back(row.label);
      std::vector<double> fd(layers, 0.0);
      for (std::size_t layer = 0; layer < layers; ++layer) {
        double s = 0.0;
        for (std::size_t g = 0; g < row.groups.size(); ++g) s += rr.restored_fd[k++];
        fd[layer] = s / static_cast<double>(row.groups.size());
      }
      grid.fd.push_back(std::move(fd));
      grid.n.emplace_back(layers, 1);
    }
    res.grids[site] = std::move(grid);
  }
  return res;
}

TraceResult merge_traces(const std::vector<TraceResult>& results) {
  if (results.empty()) throw DataError("trace aggregation: empty selection");
  TraceResult out;
  out.sigma = results.front().sigma;
  double clean = 0.0, corrupted = 0.0;
  std::size_t n = 0;
  for (const auto& r : results) {
    clean += r.clean_fd * static_cast<double>(r.n);
    corrupted += r.corrupted_fd * static_cast<double>(r.n);
    n += r.n;
  }
  out.n = n;
  out.clean_fd = clean / static_cast<double>(n);
  out.corrupted_fd = corrupted / static_cast<double>(n);

  for (const auto& [site, first] : results.front().grids) {
    TraceGrid g;
    g.rows = first.rows;
    const std::size_t layers = first.fd.empty() ? 0 : first.fd.front().size();
    g.fd.assign(g.rows.size(), std::vector<double>(layers, 0.0));
    g.n.assign(g.rows.size(), std::vector<std::size_t>(layers, 0));
    for (const auto& r : results) {
      auto it = r.grids.find(site);
      if (it == r.grids.end() || it->second.rows != g.rows)
        throw ContractViolation("trace aggregation: grids are not aligned");
      for (std::size_t i = 0; i < g.rows.size(); ++i)
        for (std::size_t l = 0; l < layers; ++l) {
          g.fd[i][l] += it->second.fd[i][l] * static_cast<double>(it->second.n[i][l]);
          g.n[i][l] += it->second.n[i][l];
        }
    }
    for (std::size_t i = 0; i < g.rows.size(); ++i)
      for (std::size_t l = 0; l < layers; ++l) g.fd[i][l] /= static_cast<double>(g.n[i][l]);
    out.grids[site] = std::move(g);
  }
  return out;
}

TraceResult trace_aggregate(const Model& model, const Tokenizer& tokenizer,
                            const std::vector<BiasInstance>& instances, const TraceConfig& config,
                            double sigma) {
  config.validate();
  if (config.n_samples == 0 || instances.empty())
    throw DataError("trace aggregation: empty selection");
  if (config.n_samples > instances.size())
    throw ContractViolation("trace aggregation: n_samples " + std::to_string(config.n_samples) +
                            " exceeds the " + std::to_string(instances.size()) +
                            " available instances");
  if (config.per_position && config.n_samples > 1)
    throw ConfigError("per-position grids cannot be aggregated across instances");
  std::vector<TraceResult> parts;
  for (std::size_t i = 0; i < config.n_samples; ++i)
    parts.push_back(trace_instance(model, tokenizer, instances[i], config, sigma));
  return merge_traces(parts);
}

std::string TraceResult::csv(Site site) const {
  auto it = grids.find(site);
  if (it == grids.end()) throw ContractViolation(std::string("no grid for site ") + site_name(site));
  std::ostringstream os;
  os << std::setprecision(17);
  os << "site,role_or_position,layer,mean_fd,n\n";
  const TraceGrid& g = it->second;
  for (std::size_t i = 0; i < g.rows.size(); ++i)
    for (std::size_t l = 0; l < g.fd[i].size(); ++l)
      os << site_name(site) << ',' << g.rows[i] << ',' << l << ',' << g.fd[i][l] << ','
         << g.n[i][l] << '\n';
  return os.str();
}

nlohmann::json TraceResult::to_json() const {
  nlohmann::json j{{"clean_fd", clean_fd}, {"corrupted_fd", corrupted_fd}, {"sigma", sigma},
                   {"n", n}};
  for (const auto& [site, g] : grids)
    j["grids"][site_name(site)] = {{"rows", g.rows}, {"mean_fd", g.fd}, {"n", g.n}};
  return j;
}

void write_trace_csvs(const std::filesystem::path& dir, const TraceResult& result) {
  std::filesystem::create_directories(dir);
  for (const auto& [site, _] : result.grids) {
    const auto path = dir / (std::string("trace_") + site_name(site) + ".csv");
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw DataError("cannot write " + path.string());
    os << result.csv(site);
  }
}

}  // namespace biasedit
