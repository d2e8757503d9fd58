#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "biasedit/checkpoint.hpp"
#include "biasedit/error.hpp"
#include "biasedit/eval.hpp"
#include "biasedit/pretrain.hpp"
#include "common.hpp"

using namespace biasedit;
using testing::kSeeds;

namespace {

std::vector<TokenId> random_tokens(Rng& rng, std::size_t n, std::size_t vocab) {
  std::vector<TokenId> out(n);
  for (auto& t : out) t = rng.below(vocab);
  return out;
}

}  // namespace

TEST_CASE("zero-weight model is uniform") {
  const std::size_t V = 13;
  const Model m = Model::zeros(testing::tiny_config(V));
  const std::vector<TokenId> toks{3, 5, 7, 9};
  const auto res = forward(m, toks);
  CHECK(res.logits.shape() == Shape{4, V});
  for (double v : res.logits.data()) CHECK(v == 0.0);
  CHECK(avg_log_prob(m, toks) == doctest::Approx(-std::log(static_cast<double>(V))).epsilon(1e-14));
}

TEST_CASE("avg_log_prob hand-set cases") {
  SUBCASE("single-token vocabulary") {
    const Model m(testing::tiny_config(1));
    CHECK(avg_log_prob(m, std::vector<TokenId>{0, 0, 0}) == 0.0);
  }
  SUBCASE("probabilities 0.5 and 0.25") {
    Model m = Model::zeros(testing::tiny_config(4));
    m.set_param("head.bias", Tensor::vector({std::log(0.5), std::log(0.25), std::log(0.125),
                                             std::log(0.125)}));
    const double lp = avg_log_prob(m, std::vector<TokenId>{0, 1});
    CHECK(std::abs(lp - (std::log(0.5) + std::log(0.25)) / 2.0) <= 1e-12);
    CHECK(std::abs(lp - -1.0397) <= 1e-4);
  }
  SUBCASE("empty sequence") {
    const Model m(testing::tiny_config(5));
    CHECK_THROWS(avg_log_prob(m, std::vector<TokenId>{}));
  }
}

TEST_CASE("scoring is deterministic, non-positive and agrees with forward") {
  for (std::uint64_t seed = 0; seed < kSeeds; ++seed) {
    Rng rng(seed);
    const std::size_t V = 9;
    const Model m = testing::jittered_model(testing::tiny_config(V, seed), seed, 0.3);
    const auto toks = random_tokens(rng, 1 + rng.below(8), V);
    const double a = avg_log_prob(m, toks);
    CHECK(a == avg_log_prob(m, toks));
    CHECK(a <= 0.0);
    // Independent recount from the single-sequence forward.
    std::vector<TokenId> fed{Tokenizer::kBos};
    fed.insert(fed.end(), toks.begin(), toks.end() - 1);
    const Tensor logits = forward(m, fed).logits;
    double total = 0.0;
    for (std::size_t k = 0; k < toks.size(); ++k) {
      std::vector<double> row(logits.row(k).begin(), logits.row(k).end());
      total += log_softmax(Tensor::vector(row))[toks[k]];
    }
    CHECK(a == doctest::Approx(total / static_cast<double>(toks.size())).epsilon(1e-12));
    // Batched scoring matches single scoring.
    const auto batch = avg_log_probs(m, {toks, toks});
    CHECK(batch[0] == doctest::Approx(a).epsilon(1e-12));
  }
}

TEST_CASE("causality under random suffix perturbations") {
  for (std::uint64_t seed = 0; seed < kSeeds; ++seed) {
    CAPTURE(seed);
    Rng rng(seed);
    const std::size_t V = 11;
    const Model m = testing::jittered_model(testing::tiny_config(V, seed), seed, 0.3);
    const std::size_t K = 2 + rng.below(10);
    auto toks = random_tokens(rng, K, V);
    const std::size_t k = rng.below(K - 1);
    const Tensor before = forward(m, toks).logits;
    for (std::size_t j = k + 1; j < K; ++j) toks[j] = rng.below(V);
    const Tensor after = forward(m, toks).logits;
    for (std::size_t r = 0; r <= k; ++r)
      for (std::size_t c = 0; c < V; ++c) CHECK(before.at(r, c) == after.at(r, c));
  }
}

TEST_CASE("noise and overrides") {
  const std::size_t V = 10;
  const Model m = testing::jittered_model(testing::tiny_config(V), 1, 0.3);
  const std::vector<TokenId> toks{4, 2, 7, 7, 1};
  ForwardOptions clean_opts;
  clean_opts.capture = true;
  const auto clean = forward(m, toks, clean_opts);
  REQUIRE(clean.cache);

  SUBCASE("zero sigma is bit-identical") {
    ForwardOptions o;
    o.noise = NoiseSpec{{0, 2}, 0.0, 99};
    CHECK(forward(m, toks, o).logits == clean.logits);
  }
  SUBCASE("restoring every block output reproduces the clean run") {
    ForwardOptions o;
    o.noise = NoiseSpec{{1, 2}, 2.0, 5};
    const Tensor corrupted = forward(m, toks, o).logits;
    CHECK(max_abs_diff(corrupted, clean.logits) > 1e-6);
    for (std::size_t p = 0; p < toks.size(); ++p)
      for (std::size_t l = 0; l < m.config().n_blocks; ++l) {
        const SiteKey key{p, l, Site::kBlockOut};
        o.overrides[key] = clean.cache->at(key);
      }
    CHECK(max_abs_diff(forward(m, toks, o).logits, clean.logits) <= 1e-9);
  }
  SUBCASE("cache covers every site") {
    for (std::size_t p = 0; p < toks.size(); ++p) {
      CHECK(clean.cache->at(p, 0, Site::kEmbed).numel() == m.config().d_model);
      for (std::size_t l = 0; l < m.config().n_blocks; ++l) {
        CHECK(clean.cache->at(p, l, Site::kMlpIn).numel() == m.config().d_ff);
        CHECK(clean.cache->at(p, l, Site::kMlpOut).numel() == m.config().d_model);
        CHECK(clean.cache->at(p, l, Site::kAttnOut).numel() == m.config().d_model);
      }
    }
  }
  SUBCASE("bad override shape or position") {
    ForwardOptions o;
    o.overrides[SiteKey{0, 0, Site::kBlockOut}] = Tensor(Shape{3});
    CHECK_THROWS(forward(m, toks, o));
    ForwardOptions p;
    p.overrides[SiteKey{9, 0, Site::kBlockOut}] = Tensor(Shape{m.config().d_model});
    CHECK_THROWS(forward(m, toks, p));
  }
  SUBCASE("too long") {
    CHECK_THROWS(forward(m, std::vector<TokenId>(m.config().max_seq + 1, 3)));
  }
}

TEST_CASE("parameter access") {
  Model m(testing::tiny_config(7));
  const auto& c = m.config();
  CHECK(m.get_param("blocks.0.mlp.out").shape() == Shape{c.d_model, c.d_ff});
  Rng rng(3);
  const Tensor v = testing::random_tensor(rng, {c.d_model, c.d_ff});
  m.set_param("blocks.1.mlp.out", v);
  CHECK(m.get_param("blocks.1.mlp.out") == v);
  CHECK_THROWS_AS(m.set_param("blocks.1.mlp.out", v.transposed()), ShapeError);
  CHECK_THROWS(m.get_param("blocks.9.mlp.out"));
  CHECK(paths::mlp_out_block("blocks.1.mlp.out") == std::optional<std::size_t>(1));
  CHECK_FALSE(paths::mlp_out_block("blocks.1.mlp.in"));
  CHECK(Model(testing::tiny_config(7, 4)) == Model(testing::tiny_config(7, 4)));
  CHECK_FALSE(Model(testing::tiny_config(7, 4)) == Model(testing::tiny_config(7, 5)));
}

TEST_CASE("config validation") {
  ModelConfig c = testing::tiny_config(5);
  c.n_heads = 3;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = testing::tiny_config(5);
  c.n_blocks = 1;
  CHECK_THROWS_AS(c.validate(), ConfigError);
}

TEST_CASE("tokenizer") {
  const Tokenizer tok = Tokenizer::build({"Girls tend to be more soft than boys.", "a b"});
  CHECK(tok.word(Tokenizer::kBos) == "<bos>");
  CHECK(tok.word(Tokenizer::kBlank) == "<blank>");
  const auto ids = tok.encode("Girls tend to be more soft than boys.");
  CHECK(ids.size() == 9);
  CHECK(tok.decode(ids) == "girls tend to be more soft than boys .");
  CHECK(tok.id("zebra") == Tokenizer::kUnk);
  for (const char* w : {"girls", "soft", "boys", "."}) CHECK(tok.decode(tok.encode(w)) == w);
  const Tokenizer back = Tokenizer::from_json(tok.to_json());
  CHECK(back.encode("more soft") == tok.encode("more soft"));
  CHECK(back.size() == tok.size());
}

TEST_CASE("checkpoint round trip is exact and byte-stable") {
  const auto dir = std::filesystem::temp_directory_path() / "biasedit_ckpt_test";
  std::filesystem::create_directories(dir);
  const Model m = testing::jittered_model(testing::tiny_config(9, 2), 2);
  save_model(dir / "a.bin", m);
  const Model back = load_model(dir / "a.bin");
  CHECK(back == m);
  save_model(dir / "b.bin", back);
  CHECK(std::filesystem::file_size(dir / "a.bin") == std::filesystem::file_size(dir / "b.bin"));
  std::ifstream a(dir / "a.bin", std::ios::binary), b(dir / "b.bin", std::ios::binary);
  const std::string sa((std::istreambuf_iterator<char>(a)), {}), sb((std::istreambuf_iterator<char>(b)), {});
  CHECK(sa == sb);
  {
    std::ofstream bad(dir / "bad.bin", std::ios::binary);
    bad << "nope";
  }
  CHECK_THROWS_AS(load_model(dir / "bad.bin"), DataError);
  std::filesystem::remove_all(dir);
}

TEST_CASE("pretraining") {
  const auto f = testing::small_fixture(0);
  std::vector<std::vector<TokenId>> corpus;
  for (const auto& s : f.data.corpus) corpus.push_back(f.tokenizer.encode(s));
  ModelConfig c = testing::tiny_config(f.tokenizer.size(), 3);

  SUBCASE("zero steps returns the initialization") {
    PretrainOptions o;
    o.steps = 0;
    CHECK(pretrain_model(c, corpus, o).model == Model(c));
  }
  SUBCASE("deterministic and better than uniform") {
    PretrainOptions o;
    o.steps = 60;
    o.warmup = 5;
    const auto a = pretrain_model(c, corpus, o);
    const auto b = pretrain_model(c, corpus, o);
    CHECK(a.model == b.model);
    CHECK(a.loss_curve == b.loss_curve);
    CHECK(a.heldout_perplexity < static_cast<double>(c.vocab_size));
    CHECK(perplexity(a.model, corpus) < static_cast<double>(c.vocab_size));
  }
  SUBCASE("sequence longer than max_seq") {
    c.max_seq = 4;
    PretrainOptions o;
    o.steps = 1;
    CHECK_THROWS(pretrain_model(c, corpus, o));
  }
}
