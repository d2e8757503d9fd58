#include "biasedit/eval.hpp"

#include <cmath>
#include <iomanip>
#include <sstream>

#include "biasedit/editor.hpp"
#include "biasedit/error.hpp"

namespace biasedit {

std::vector<InstanceScore> score_instances(const Model& model, const Tokenizer& tokenizer,
                                           const std::vector<BiasInstance>& instances) {
  std::vector<InstanceScore> out;
  out.reserve(instances.size());
  // One graph per instance keeps every score independent of how instances
  // are grouped, so per-batch and whole-set evaluations agree bit for bit.
  for (const auto& inst : instances) {
    std::vector<std::vector<TokenId>> seqs{tokenizer.encode(inst.x_stereo()),
                                           tokenizer.encode(inst.x_anti())};
    if (inst.unrelated) seqs.push_back(tokenizer.encode(inst.x_mless()));
    const auto lp = avg_log_probs(model, seqs);
    InstanceScore s{lp[0], lp[1], std::nullopt};
    if (inst.unrelated) s.mless = lp[2];
    out.push_back(s);
  }
  return out;
}

SsCount ss_from_scores(const std::vector<InstanceScore>& scores) {
  if (scores.empty()) throw ContractViolation("stereotype score of an empty set");
  std::size_t wins = 0;
  SsCount res;
  for (const auto& s : scores) {
    if (s.stereo > s.anti) ++wins;
    if (s.stereo == s.anti) ++res.ties;
  }
  res.ss = 100.0 * static_cast<double>(wins) / static_cast<double>(scores.size());
  return res;
}

double lms_from_scores(const std::vector<InstanceScore>& scores) {
  if (scores.empty()) throw ContractViolation("language modeling score of an empty set");
  std::size_t stereo_wins = 0, anti_wins = 0;
  for (const auto& s : scores) {
    if (!s.mless) throw DataError("language modeling score needs an unrelated term");
    if (s.stereo > *s.mless) ++stereo_wins;
    if (s.anti > *s.mless) ++anti_wins;
  }
  const double n = static_cast<double>(scores.size());
  return 100.0 * (0.5 * static_cast<double>(stereo_wins) / n +
                  0.5 * static_cast<double>(anti_wins) / n);
}

double stereotype_score(const Model& model, const Tokenizer& tokenizer,
                        const std::vector<BiasInstance>& instances) {
  if (instances.empty()) throw ContractViolation("stereotype_score: empty instance set");
  return ss_from_scores(score_instances(model, tokenizer, instances)).ss;
}

double lm_score(const Model& model, const Tokenizer& tokenizer,
                const std::vector<BiasInstance>& instances) {
  if (instances.empty()) throw ContractViolation("lm_score: empty instance set");
  for (const auto& inst : instances)
    if (!inst.unrelated) throw DataError("lm_score: instance " + inst.id + " has no unrelated term");
  return lms_from_scores(score_instances(model, tokenizer, instances));
}

double perplexity(const Model& model, const std::vector<std::vector<TokenId>>& corpus) {
  if (corpus.empty()) throw ContractViolation("perplexity of an empty corpus");
  constexpr std::size_t kChunk = 64;
  double nll = 0.0;
  std::size_t count = 0;
  for (std::size_t start = 0; start < corpus.size(); start += kChunk) {
    std::vector<std::vector<TokenId>> chunk(
        corpus.begin() + static_cast<std::ptrdiff_t>(start),
        corpus.begin() + static_cast<std::ptrdiff_t>(std::min(corpus.size(), start + kChunk)));
    ScoringBatch sb = make_scoring_batch(chunk);
    BuildOptions bo;
    bo.trainable = std::set<std::string>{};
    ModelGraph mg = build_model_graph(model, sb.input, bo);
    NodeRef lp = mg.graph.pick(mg.graph.log_softmax_rows(mg.logits), sb.targets);
    mg.graph.evaluate();
    for (double v : mg.graph.value(lp).data()) nll -= v;
    count += sb.targets.size();
  }
  return std::exp(nll / static_cast<double>(count));
}

// ---------------------------------------------------------------- aggregation

namespace {

struct Accum {
  double ss_pre = 0, ss_post = 0, lms_pre = 0, lms_post = 0;
  std::size_t n = 0, ties_pre = 0, ties_post = 0;

  void add(const GroupMetrics& m) {
    const auto w = static_cast<double>(m.n);
    ss_pre += w * m.ss_pre;
    ss_post += w * m.ss_post;
    lms_pre += w * m.lms_pre;
    lms_post += w * m.lms_post;
    n += m.n;
    ties_pre += m.ties_pre;
    ties_post += m.ties_post;
  }
  GroupMetrics result() const {
    GroupMetrics g;
    const auto w = static_cast<double>(n);
    g.ss_pre = ss_pre / w;
    g.ss_post = ss_post / w;
    g.lms_pre = lms_pre / w;
    g.lms_post = lms_post / w;
    g.delta_lms = g.lms_post - g.lms_pre;
    g.n = n;
    g.ties_pre = ties_pre;
    g.ties_post = ties_post;
    return g;
  }
};

GroupMetrics group_metrics(const std::vector<InstanceScore>& pre,
                           const std::vector<InstanceScore>& post) {
  GroupMetrics g;
  const auto sp = ss_from_scores(pre);
  const auto sq = ss_from_scores(post);
  g.ss_pre = sp.ss;
  g.ss_post = sq.ss;
  g.ties_pre = sp.ties;
  g.ties_post = sq.ties;
  g.lms_pre = lms_from_scores(pre);
  g.lms_post = lms_from_scores(post);
  g.delta_lms = g.lms_post - g.lms_pre;
  g.n = pre.size();
  return g;
}

nlohmann::json group_json(const GroupMetrics& g) {
  return {{"ss_pre", g.ss_pre},       {"ss_post", g.ss_post},     {"lms_pre", g.lms_pre},
          {"lms_post", g.lms_post},   {"delta_lms", g.delta_lms}, {"n", g.n},
          {"ties_pre", g.ties_pre},   {"ties_post", g.ties_post}};
}

}  // namespace

MetricsReport evaluate_edits(const Model& model, const EditorNet& editor,
                             const Tokenizer& tokenizer, const std::vector<BiasInstance>& test,
                             std::size_t batch_size, const EvaluateOptions& options) {
  for (const auto& inst : test)
    if (!inst.unrelated)
      throw DataError("evaluate_edits: instance " + inst.id + " has no unrelated term");
  const auto edited = batch_edit(model, editor, tokenizer, test, batch_size);

  MetricsReport report;
  report.full_test = options.full_test;
  std::map<BiasType, Accum> per_type;
  Accum overall;

  std::vector<InstanceScore> full_pre;
  if (options.full_test) full_pre = score_instances(model, tokenizer, test);

  for (std::size_t b = 0; b < edited.size(); ++b) {
    const auto& eb = edited[b];
    const BiasType type = eb.instances.front().bias_type;
    if (!options.full_test) {
      const auto pre = score_instances(model, tokenizer, eb.instances);
      const auto post = score_instances(eb.edited, tokenizer, eb.instances);
      const GroupMetrics g = group_metrics(pre, post);
      report.batches.push_back({b, type, g});
      per_type[type].add(g);
      overall.add(g);
      continue;
    }
    const auto post = score_instances(eb.edited, tokenizer, test);
    const GroupMetrics g = group_metrics(full_pre, post);
    report.batches.push_back({b, type, g});
    overall.add(g);
    for (BiasType t : kAllBiasTypes) {
      std::vector<InstanceScore> tp, tq;
      for (std::size_t i = 0; i < test.size(); ++i)
        if (test[i].bias_type == t) {
          tp.push_back(full_pre[i]);
          tq.push_back(post[i]);
        }
      if (!tp.empty()) per_type[t].add(group_metrics(tp, tq));
    }
  }
  for (const auto& [t, acc] : per_type) report.per_type[t] = acc.result();
  report.overall = overall.result();
  return report;
}

nlohmann::json MetricsReport::to_json() const {
  nlohmann::json j;
  j["aggregation"] = full_test ? "full-test" : "per-batch-own-instances";
  j["weighting"] = "instance-count";
  for (const auto& [t, g] : per_type) j["per_type"][to_string(t)] = group_json(g);
  j["overall"] = group_json(overall);
  j["batches"] = nlohmann::json::array();
  for (const auto& b : batches) {
    auto e = group_json(b.metrics);
    e["index"] = b.index;
    e["bias_type"] = to_string(b.bias_type);
    j["batches"].push_back(e);
  }
  j["footnotes"] = {
      {"ties", "instances with equal stereo/anti scores count 0 toward SS; see ties_pre/ties_post"},
      {"reference",
       {{"note", "published GPT2-medium gender pre-edit figures; context only, not comparable"},
        {"ss_pre", kReferenceGenderSsPre},
        {"lms_pre", kReferenceGenderLmsPre}}}};
  return j;
}

std::string MetricsReport::to_csv() const {
  std::ostringstream os;
  os << std::fixed << std::setprecision(2);
  os << "condition";
  for (const auto& [t, g] : per_type)
    os << ',' << to_string(t) << "_ss," << to_string(t) << "_lms," << to_string(t) << "_delta_lms";
  os << ",overall_ss,overall_lms,overall_delta_lms\n";
  auto row = [&](const char* name, bool post) {
    os << name;
    auto cells = [&](const GroupMetrics& g) {
      os << ',' << (post ? g.ss_post : g.ss_pre) << ',' << (post ? g.lms_post : g.lms_pre) << ','
         << (post ? g.delta_lms : 0.0);
    };
    for (const auto& [t, g] : per_type) cells(g);
    cells(overall);
    os << '\n';
  };
  row("pre-edit", false);
  row("post-edit", true);
  return os.str();
}

}  // namespace biasedit
