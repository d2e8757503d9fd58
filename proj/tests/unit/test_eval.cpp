#include <doctest.h>

#include <algorithm>

#include "biasedit/editor.hpp"
#include "biasedit/error.hpp"
#include "biasedit/eval.hpp"
#include "common.hpp"

using namespace biasedit;
using testing::kSeeds;

namespace {

InstanceScore sc(double s, double a, std::optional<double> m = std::nullopt) { return {s, a, m}; }

struct Setup {
  testing::Fixture f;
  Model model;
};

Setup setup(std::uint64_t seed) {
  Setup s{testing::small_fixture(seed), Model(ModelConfig{})};
  ModelConfig c = testing::tiny_config(s.f.tokenizer.size(), seed);
  c.max_seq = 32;
  s.model = testing::jittered_model(c, seed, 0.3);
  return s;
}

EditorNet small_editor(const Model& model, bool residual, std::uint64_t seed) {
  EditorConfig c;
  c.target = EditTarget::last_blocks(1, model.config());
  c.hidden = 8;
  c.residual = residual;
  c.alpha_init = 0.5;
  EditorNet e(c, model.config());
  Rng rng(seed);
  for (auto& [name, t] : e.params())
    for (double& v : t.storage()) v += 0.1 * rng.normal();
  return e;
}

// Average log-probability recounted from a single-sequence forward pass.
double recount(const Model& m, const std::vector<TokenId>& toks) {
  std::vector<TokenId> fed{Tokenizer::kBos};
  fed.insert(fed.end(), toks.begin(), toks.end() - 1);
  const Tensor logits = forward(m, fed).logits;
  double total = 0.0;
  for (std::size_t k = 0; k < toks.size(); ++k) {
    std::vector<double> row(logits.row(k).begin(), logits.row(k).end());
    total += log_softmax(Tensor::vector(row))[toks[k]];
  }
  return total / static_cast<double>(toks.size());
}

}  // namespace

TEST_CASE("stereotype score examples") {
  CHECK(ss_from_scores({sc(-1, -2), sc(-1, -2), sc(-3, -2)}).ss ==
        doctest::Approx(66.67).epsilon(1e-4));
  const auto ties = ss_from_scores({sc(-1, -1), sc(-2, -2)});
  CHECK(ties.ss == 0.0);
  CHECK(ties.ties == 2);
  CHECK_THROWS_AS(ss_from_scores({}), ContractViolation);
}

TEST_CASE("language modeling score examples") {
  CHECK(lms_from_scores({sc(-1, -1, -5), sc(-2, -3, -4)}) == 100.0);
  CHECK(lms_from_scores({sc(-1, -9, -5), sc(-2, -3, -2.5)}) == 50.0);
  CHECK(lms_from_scores({sc(-9, -9, -1)}) == 0.0);
  CHECK_THROWS_AS(lms_from_scores({sc(-1, -1)}), DataError);
}

TEST_CASE("scores are invariant to reordering") {
  for (std::uint64_t seed = 0; seed < kSeeds; ++seed) {
    Rng rng(seed);
    std::vector<InstanceScore> v;
    const std::size_t n = 1 + rng.below(40);
    for (std::size_t i = 0; i < n; ++i)
      v.push_back(sc(-rng.uniform(), -rng.uniform(), -rng.uniform()));
    const double ss = ss_from_scores(v).ss, lms = lms_from_scores(v);
    CHECK(ss >= 0.0);
    CHECK(ss <= 100.0);
    for (std::size_t i = n; i > 1; --i) std::swap(v[i - 1], v[rng.below(i)]);
    CHECK(ss_from_scores(v).ss == ss);
    CHECK(lms_from_scores(v) == lms);
  }
}

TEST_CASE("model-level scores") {
  auto s = setup(4);
  std::vector<BiasInstance> sub(s.f.instances.begin(), s.f.instances.begin() + 30);
  std::size_t wins = 0, sm = 0, am = 0;
  for (const auto& inst : sub) {
    const double st = recount(s.model, s.f.tokenizer.encode(inst.x_stereo()));
    const double an = recount(s.model, s.f.tokenizer.encode(inst.x_anti()));
    const double ml = recount(s.model, s.f.tokenizer.encode(inst.x_mless()));
    wins += st > an;
    sm += st > ml;
    am += an > ml;
  }
  const double n = static_cast<double>(sub.size());
  CHECK(stereotype_score(s.model, s.f.tokenizer, sub) ==
        doctest::Approx(100.0 * static_cast<double>(wins) / n).epsilon(1e-12));
  CHECK(lm_score(s.model, s.f.tokenizer, sub) ==
        doctest::Approx(50.0 * static_cast<double>(sm + am) / n).epsilon(1e-12));
  CHECK_THROWS_AS(stereotype_score(s.model, s.f.tokenizer, {}), ContractViolation);
  BiasInstance pair = sub[0];
  pair.unrelated.reset();
  CHECK_THROWS_AS(lm_score(s.model, s.f.tokenizer, {pair}), DataError);
}

TEST_CASE("perplexity") {
  const std::size_t V = 4;
  Model m = Model::zeros(testing::tiny_config(V));
  CHECK(perplexity(m, {{1, 2, 3}, {0}}) == doctest::Approx(4.0).epsilon(1e-12));
  m.set_param("head.bias", Tensor::vector({std::log(0.5), std::log(0.25), std::log(0.125),
                                           std::log(0.125)}));
  CHECK(perplexity(m, {{1}}) == doctest::Approx(4.0).epsilon(1e-12));
  CHECK(perplexity(m, {{0}, {1}}) == doctest::Approx(std::sqrt(8.0)).epsilon(1e-12));
  CHECK_THROWS_AS(perplexity(m, {}), ContractViolation);
}

TEST_CASE("zero-shift editor changes nothing") {
  auto s = setup(5);
  const EditorNet e = small_editor(s.model, false, 1);
  EditorNet zero(e.config(), s.model.config());  // zero output layer, no residual
  std::vector<BiasInstance> sub;
  for (BiasType t : kAllBiasTypes) {
    const auto all = testing::of_type(s.f.instances, t);
    sub.insert(sub.end(), all.begin(), all.begin() + 7);
  }
  const MetricsReport r = evaluate_edits(s.model, zero, s.f.tokenizer, sub, 4);
  CHECK(r.overall.delta_lms == 0.0);
  CHECK(r.overall.ss_pre == r.overall.ss_post);
  CHECK(r.overall.n == sub.size());
  CHECK(r.batches.size() == 6);
  for (const auto& [t, g] : r.per_type) CHECK(g.n == 7);
}

TEST_CASE("aggregation matches a brute-force recount") {
  auto s = setup(6);
  const EditorNet e = small_editor(s.model, true, 2);
  std::vector<BiasInstance> sub;
  for (BiasType t : kAllBiasTypes) {
    const auto all = testing::of_type(s.f.instances, t);
    sub.insert(sub.end(), all.begin(), all.begin() + 11);
  }
  const std::size_t bs = 4;
  const MetricsReport r = evaluate_edits(s.model, e, s.f.tokenizer, sub, bs);
  const auto batches = make_edit_batches(sub, bs);
  REQUIRE(r.batches.size() == batches.size());

  std::map<BiasType, std::size_t> n, ss_pre, ss_post, lm_pre, lm_post;
  bool moved = false;
  for (std::size_t b = 0; b < batches.size(); ++b) {
    const Model edited = edit_batch(s.model, e, s.f.tokenizer, batches[b]);
    std::size_t w0 = 0, w1 = 0, l0 = 0, l1 = 0;
    for (const auto& inst : batches[b]) {
      const auto st = s.f.tokenizer.encode(inst.x_stereo());
      const auto an = s.f.tokenizer.encode(inst.x_anti());
      const auto ml = s.f.tokenizer.encode(inst.x_mless());
      const double s0 = recount(s.model, st), a0 = recount(s.model, an), m0 = recount(s.model, ml);
      const double s1 = recount(edited, st), a1 = recount(edited, an), m1 = recount(edited, ml);
      moved = moved || s1 != s0;
      w0 += s0 > a0;
      w1 += s1 > a1;
      l0 += (s0 > m0) + (a0 > m0);
      l1 += (s1 > m1) + (a1 > m1);
    }
    const BiasType t = batches[b].front().bias_type;
    const auto& g = r.batches[b].metrics;
    CHECK(r.batches[b].bias_type == t);
    CHECK(g.n == batches[b].size());
    const double nb = static_cast<double>(batches[b].size());
    CHECK(g.ss_pre == doctest::Approx(100.0 * static_cast<double>(w0) / nb).epsilon(1e-12));
    CHECK(g.ss_post == doctest::Approx(100.0 * static_cast<double>(w1) / nb).epsilon(1e-12));
    CHECK(g.lms_pre == doctest::Approx(50.0 * static_cast<double>(l0) / nb).epsilon(1e-12));
    CHECK(g.lms_post == doctest::Approx(50.0 * static_cast<double>(l1) / nb).epsilon(1e-12));
    n[t] += batches[b].size();
    ss_pre[t] += w0;
    ss_post[t] += w1;
    lm_pre[t] += l0;
    lm_post[t] += l1;
  }
  CHECK(moved);
  std::size_t N = 0, W1 = 0, L0 = 0, L1 = 0;
  for (const auto& [t, g] : r.per_type) {
    const double nt = static_cast<double>(n[t]);
    CHECK(g.n == n[t]);
    CHECK(g.ss_pre == doctest::Approx(100.0 * static_cast<double>(ss_pre[t]) / nt).epsilon(1e-12));
    CHECK(g.ss_post == doctest::Approx(100.0 * static_cast<double>(ss_post[t]) / nt).epsilon(1e-12));
    CHECK(g.delta_lms == doctest::Approx(50.0 * (static_cast<double>(lm_post[t]) -
                                                 static_cast<double>(lm_pre[t])) / nt)
                             .epsilon(1e-12));
    N += n[t];
    W1 += ss_post[t];
    L0 += lm_pre[t];
    L1 += lm_post[t];
  }
  const double Nd = static_cast<double>(N);
  CHECK(r.overall.ss_post == doctest::Approx(100.0 * static_cast<double>(W1) / Nd).epsilon(1e-12));
  CHECK(r.overall.delta_lms ==
        doctest::Approx(50.0 * (static_cast<double>(L1) - static_cast<double>(L0)) / Nd)
            .epsilon(1e-12));
}

TEST_CASE("a single batch equals direct scoring") {
  auto s = setup(7);
  const EditorNet e = small_editor(s.model, true, 3);
  const auto race = testing::of_type(s.f.instances, BiasType::kRace);
  const std::vector<BiasInstance> batch(race.begin(), race.begin() + 5);
  const MetricsReport r = evaluate_edits(s.model, e, s.f.tokenizer, batch, 16);
  REQUIRE(r.batches.size() == 1);
  const Model edited = edit_batch(s.model, e, s.f.tokenizer, batch);
  CHECK(r.overall.ss_pre == stereotype_score(s.model, s.f.tokenizer, batch));
  CHECK(r.overall.ss_post == stereotype_score(edited, s.f.tokenizer, batch));
  CHECK(r.overall.lms_post == lm_score(edited, s.f.tokenizer, batch));
  CHECK(r.per_type.at(BiasType::kRace).ss_post == r.overall.ss_post);

  SUBCASE("full-test mode scores every edited model on the whole set") {
    const MetricsReport full =
        evaluate_edits(s.model, e, s.f.tokenizer, batch, 16, EvaluateOptions{true});
    CHECK(full.full_test);
    CHECK(full.overall.ss_post == r.overall.ss_post);
    CHECK(full.to_json()["aggregation"] == "full-test");
  }
  SUBCASE("report serialization") {
    const auto j = r.to_json();
    CHECK(j["overall"]["n"] == 5);
    CHECK(j["per_type"].contains("race"));
    CHECK(r.to_csv().find("overall") != std::string::npos);
  }
}

TEST_CASE("evaluation rejects instances without an unrelated term") {
  auto s = setup(8);
  const EditorNet e = small_editor(s.model, true, 4);
  BiasInstance pair = s.f.instances[0];
  pair.unrelated.reset();
  CHECK_THROWS_AS(evaluate_edits(s.model, e, s.f.tokenizer, {pair}, 4), DataError);
}
