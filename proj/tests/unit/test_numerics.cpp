#include <doctest.h>

#include <functional>
#include <numeric>

#include "biasedit/error.hpp"
#include "common.hpp"

using namespace biasedit;
using testing::kSeeds;

namespace {

// Scalar readout with random weights so every output entry matters.
NodeRef readout(Graph& g, NodeRef y, Rng& rng) {
  if (g.shape(y).empty()) return y;
  return g.sum(g.mul(y, g.constant(testing::random_tensor(rng, g.shape(y)))));
}

struct OpCase {
  const char* name;
  // Builds leaves and the op output; returns the leaf names to check.
  std::function<std::vector<std::string>(Graph&, Rng&, NodeRef&)> build;
};

std::vector<OpCase> op_cases() {
  using testing::away_from_zero;
  using testing::positive_tensor;
  using testing::random_tensor;
  return {
      {"matmul",
       [](Graph& g, Rng& r, NodeRef& y) {
         y = g.matmul(g.leaf("a", random_tensor(r, {3, 4})), g.leaf("b", random_tensor(r, {4, 5})));
         return std::vector<std::string>{"a", "b"};
       }},
      {"matmul_nt",
       [](Graph& g, Rng& r, NodeRef& y) {
         y = g.matmul_nt(g.leaf("a", random_tensor(r, {3, 4})), g.leaf("b", random_tensor(r, {5, 4})));
         return std::vector<std::string>{"a", "b"};
       }},
      {"matmul_tn",
       [](Graph& g, Rng& r, NodeRef& y) {
         y = g.matmul_tn(g.leaf("a", random_tensor(r, {4, 3})), g.leaf("b", random_tensor(r, {4, 5})));
         return std::vector<std::string>{"a", "b"};
       }},
      {"add",
       [](Graph& g, Rng& r, NodeRef& y) {
         y = g.add(g.leaf("a", random_tensor(r, {3, 4})), g.leaf("b", random_tensor(r, {3, 4})));
         return std::vector<std::string>{"a", "b"};
       }},
      {"sub",
       [](Graph& g, Rng& r, NodeRef& y) {
         y = g.sub(g.leaf("a", random_tensor(r, {3, 4})), g.leaf("b", random_tensor(r, {3, 4})));
         return std::vector<std::string>{"a", "b"};
       }},
      {"mul",
       [](Graph& g, Rng& r, NodeRef& y) {
         y = g.mul(g.leaf("a", random_tensor(r, {3, 4})), g.leaf("b", random_tensor(r, {3, 4})));
         return std::vector<std::string>{"a", "b"};
       }},
      {"scale",
       [](Graph& g, Rng& r, NodeRef& y) {
         y = g.scale(g.leaf("a", random_tensor(r, {3, 4})), -1.7);
         return std::vector<std::string>{"a"};
       }},
      {"scale_by",
       [](Graph& g, Rng& r, NodeRef& y) {
         y = g.scale_by(g.leaf("a", random_tensor(r, {3, 4})),
                        g.leaf("s", Tensor::scalar(0.5 + r.uniform())));
         return std::vector<std::string>{"a", "s"};
       }},
      {"add_bias",
       [](Graph& g, Rng& r, NodeRef& y) {
         y = g.add_bias(g.leaf("x", random_tensor(r, {3, 4})), g.leaf("b", random_tensor(r, {4})));
         return std::vector<std::string>{"x", "b"};
       }},
      {"mul_cols",
       [](Graph& g, Rng& r, NodeRef& y) {
         y = g.mul_cols(g.leaf("x", random_tensor(r, {3, 4})), g.leaf("v", random_tensor(r, {4})));
         return std::vector<std::string>{"x", "v"};
       }},
      {"gelu",
       [](Graph& g, Rng& r, NodeRef& y) {
         // Keep clear of the stationary point near -0.75 and the far negative
         // tail, where the exact derivative vanishes and a relative comparison
         // only measures roundoff.
         Tensor x = random_tensor(r, {3, 4}, 1.5);
         for (double& v : x.storage())
           if (std::abs(v + 0.7518) < 0.05 || v < -3.0) v = -v;
         y = g.gelu(g.leaf("x", x));
         return std::vector<std::string>{"x"};
       }},
      {"relu",
       [](Graph& g, Rng& r, NodeRef& y) {
         y = g.relu(g.leaf("x", away_from_zero(r, {3, 4})));
         return std::vector<std::string>{"x"};
       }},
      {"tanh",
       [](Graph& g, Rng& r, NodeRef& y) {
         y = g.tanh(g.leaf("x", random_tensor(r, {3, 4})));
         return std::vector<std::string>{"x"};
       }},
      {"exp",
       [](Graph& g, Rng& r, NodeRef& y) {
         y = g.exp(g.leaf("x", random_tensor(r, {3, 4})));
         return std::vector<std::string>{"x"};
       }},
      {"log",
       [](Graph& g, Rng& r, NodeRef& y) {
         y = g.log(g.leaf("x", positive_tensor(r, {3, 4})));
         return std::vector<std::string>{"x"};
       }},
      {"layer_norm",
       [](Graph& g, Rng& r, NodeRef& y) {
         y = g.layer_norm(g.leaf("x", random_tensor(r, {3, 6})),
                          g.leaf("gain", positive_tensor(r, {6})), g.leaf("bias", random_tensor(r, {6})));
         return std::vector<std::string>{"x", "gain", "bias"};
       }},
      {"embedding",
       [](Graph& g, Rng& r, NodeRef& y) {
         y = g.embedding(g.leaf("table", random_tensor(r, {7, 4})), {3, 0, 3, 6, 1});
         return std::vector<std::string>{"table"};
       }},
      {"softmax_rows",
       [](Graph& g, Rng& r, NodeRef& y) {
         y = g.softmax_rows(g.leaf("x", random_tensor(r, {3, 5}, 2.0)));
         return std::vector<std::string>{"x"};
       }},
      {"log_softmax_rows",
       [](Graph& g, Rng& r, NodeRef& y) {
         y = g.log_softmax_rows(g.leaf("x", random_tensor(r, {3, 5}, 2.0)));
         return std::vector<std::string>{"x"};
       }},
      {"causal_attention",
       [](Graph& g, Rng& r, NodeRef& y) {
         y = g.causal_attention(g.leaf("qkv", random_tensor(r, {5, 12})), 2, {0, 3, 5});
         return std::vector<std::string>{"qkv"};
       }},
      {"pick",
       [](Graph& g, Rng& r, NodeRef& y) {
         y = g.pick(g.leaf("x", random_tensor(r, {3, 5})), {4, 0, 2});
         return std::vector<std::string>{"x"};
       }},
      {"gather",
       [](Graph& g, Rng& r, NodeRef& y) {
         y = g.gather(g.leaf("v", random_tensor(r, {6})), {5, 1, 1, 0});
         return std::vector<std::string>{"v"};
       }},
      {"sum",
       [](Graph& g, Rng& r, NodeRef& y) {
         y = g.sum(g.mul(g.leaf("x", random_tensor(r, {3, 4})), g.constant(random_tensor(r, {3, 4}))));
         return std::vector<std::string>{"x"};
       }},
      {"mean",
       [](Graph& g, Rng& r, NodeRef& y) {
         y = g.mean(g.mul(g.leaf("x", random_tensor(r, {3, 4})), g.constant(random_tensor(r, {3, 4}))));
         return std::vector<std::string>{"x"};
       }},
      {"row_sum",
       [](Graph& g, Rng& r, NodeRef& y) {
         y = g.row_sum(g.leaf("x", random_tensor(r, {3, 4})));
         return std::vector<std::string>{"x"};
       }},
      {"segment_mean",
       [](Graph& g, Rng& r, NodeRef& y) {
         y = g.segment_mean(g.leaf("v", random_tensor(r, {5})), {0, 2, 5});
         return std::vector<std::string>{"v"};
       }},
      {"concat_cols",
       [](Graph& g, Rng& r, NodeRef& y) {
         y = g.concat_cols(g.leaf("a", random_tensor(r, {3, 2})), g.leaf("b", random_tensor(r, {3, 4})));
         return std::vector<std::string>{"a", "b"};
       }},
      {"slice_cols",
       [](Graph& g, Rng& r, NodeRef& y) {
         y = g.slice_cols(g.leaf("x", random_tensor(r, {3, 6})), 1, 3);
         return std::vector<std::string>{"x"};
       }},
      {"patch_rows",
       [](Graph& g, Rng& r, NodeRef& y) {
         y = g.patch_rows(g.leaf("x", random_tensor(r, {4, 3})), {{1, random_tensor(r, {3})}});
         return std::vector<std::string>{"x"};
       }},
  };
}

// The key slice of the qkv bias adds the same score to every key of a query,
// which softmax cancels: its exact gradient is zero and central differences
// only see roundoff, so that slice is checked absolutely.
void check_qkv_bias(Graph& g, NodeRef out, const std::string& name, const Tensor& analytic,
                    std::size_t d) {
  const Tensor original = g.leaf_value(name);
  for (std::size_t i = 0; i < original.numel(); ++i) {
    Tensor plus = original, minus = original;
    plus[i] += 1e-5;
    minus[i] -= 1e-5;
    g.set_leaf(name, plus);
    g.evaluate();
    const double fp = g.value(out).item();
    g.set_leaf(name, minus);
    g.evaluate();
    const double numeric = (fp - g.value(out).item()) / 2e-5;
    if (i >= d && i < 2 * d) {
      CHECK(std::abs(analytic[i]) <= 1e-12);
      CHECK(std::abs(numeric) <= 1e-8);
    } else {
      CHECK(testing::rel_err(analytic[i], numeric) <= 1e-4);
    }
  }
  g.set_leaf(name, original);
  g.evaluate();
}

}  // namespace

TEST_CASE("every operator's backward matches central differences") {
  for (const auto& op : op_cases()) {
    const std::string op_name = op.name;
    CAPTURE(op_name);
    for (std::uint64_t seed = 0; seed < kSeeds; ++seed) {
      CAPTURE(seed);
      Rng rng(seed);
      Graph g;
      NodeRef y;
      const auto leaves = op.build(g, rng, y);
      const NodeRef out = readout(g, y, rng);
      g.evaluate();
      for (const auto& name : leaves) {
        CAPTURE(name);
        const auto rep = finite_diff_check(g, out, name, 1e-5, 1e-4);
        CHECK(rep.pass);
      }
    }
  }
}

TEST_CASE("backward on simple functions") {
  SUBCASE("x*x at 3") {
    Graph g;
    const NodeRef x = g.leaf("x", Tensor::scalar(3.0));
    const NodeRef y = g.mul(x, x);
    g.evaluate();
    CHECK(backward(g, y).at("x").item() == doctest::Approx(6.0).epsilon(1e-15));
  }
  SUBCASE("sum gives all ones") {
    Rng rng(1);
    Graph g;
    const NodeRef w = g.leaf("w", testing::random_tensor(rng, {2, 3, 4}));
    const NodeRef s = g.sum(w);
    g.evaluate();
    const Tensor grad = backward(g, s).at("w");
    CHECK(grad.shape() == Shape{2, 3, 4});
    for (double v : grad.data()) CHECK(v == 1.0);
  }
  SUBCASE("cross-entropy of softmax, dim 7") {
    Rng rng(2);
    Graph g;
    const NodeRef logits = g.leaf("logits", testing::random_tensor(rng, {1, 7}, 2.0));
    const NodeRef loss = g.scale(g.sum(g.pick(g.log_softmax_rows(logits), {4})), -1.0);
    g.evaluate();
    CHECK(finite_diff_check(g, loss, "logits", 1e-5, 1e-4).pass);
  }
}

TEST_CASE("backward errors") {
  Graph g;
  const NodeRef x = g.leaf("x", Tensor(Shape{2, 2}, 1.0));
  const NodeRef s = g.sum(x);
  CHECK_THROWS_AS(g.gradients(s), StateError);
  g.evaluate();
  CHECK_THROWS_AS(g.gradients(x), ContractViolation);
}

TEST_CASE("backward is deterministic and leaves the graph untouched") {
  Rng rng(3);
  Graph g;
  const NodeRef a = g.leaf("a", testing::random_tensor(rng, {4, 5}));
  const NodeRef b = g.leaf("b", testing::random_tensor(rng, {5, 3}));
  const NodeRef out = g.sum(g.tanh(g.matmul(a, b)));
  g.evaluate();
  const double before = g.value(out).item();
  const auto g1 = backward(g, out);
  const auto g2 = backward(g, out);
  CHECK(g1.at("a") == g2.at("a"));
  CHECK(g1.at("b") == g2.at("b"));
  CHECK(g.value(out).item() == before);
}

TEST_CASE("stop_gradient blocks the path") {
  Rng rng(4);
  Graph g;
  const NodeRef x = g.leaf("x", testing::random_tensor(rng, {3}));
  const NodeRef y = g.sum(g.mul(g.stop_gradient(x), x));
  g.evaluate();
  const Tensor grad = backward(g, y).at("x");
  for (std::size_t i = 0; i < 3; ++i) CHECK(grad[i] == g.leaf_value("x")[i]);
}

TEST_CASE("finite_diff_check on a linear map is exact") {
  for (std::uint64_t seed = 0; seed < kSeeds; ++seed) {
    Rng rng(seed);
    Graph g;
    const NodeRef w = g.leaf("W", testing::random_tensor(rng, {4, 6}));
    const NodeRef x = g.constant(testing::random_tensor(rng, {6, 1}));
    const NodeRef c = g.constant(testing::random_tensor(rng, {4, 1}));
    const NodeRef out = g.sum(g.mul(g.matmul(w, x), c));
    // Central differences of a linear function are exact up to roundoff,
    // which a wider step keeps below the bound.
    const auto rep = finite_diff_check(g, out, "W", 1e-2, 1e-4);
    CHECK(rep.pass);
    CHECK(rep.max_rel_err <= 1e-8);
  }
}

TEST_CASE("finite_diff_compare detects a corrupted gradient") {
  Rng rng(5);
  Graph g;
  const NodeRef w = g.leaf("W", testing::random_tensor(rng, {3, 3}));
  const NodeRef out = g.sum(g.tanh(w));
  g.evaluate();
  Tensor grad = backward(g, out).at("W");
  CHECK(finite_diff_compare(g, out, "W", grad, 1e-5, 1e-4).pass);
  grad[4] += 1.0;
  CHECK_FALSE(finite_diff_compare(g, out, "W", grad, 1e-5, 1e-4).pass);
  CHECK_THROWS_AS(finite_diff_compare(g, out, "W", grad, 0.0, 1e-4), ContractViolation);
}

TEST_CASE("full micro-LM loss passes finite differences") {
  const std::size_t vocab = 11;
  for (std::uint64_t seed = 0; seed < kSeeds; ++seed) {
    CAPTURE(seed);
    const Model model = testing::jittered_model(testing::tiny_config(vocab, seed), seed, 0.3);
    Rng rng(Rng::mix(seed, 77));
    std::vector<std::vector<TokenId>> seqs(2);
    for (auto& s : seqs)
      for (std::size_t k = 0; k < 3 + rng.below(3); ++k) s.push_back(3 + rng.below(vocab - 3));
    const ScoringBatch batch = make_scoring_batch(seqs);
    ModelGraph mg = build_model_graph(model, batch.input);
    const NodeRef loss = mg.graph.sum(add_avg_log_prob_nodes(mg, batch.targets));
    mg.graph.evaluate();
    const auto grads = backward(mg.graph, loss);
    for (const auto& name : mg.graph.leaf_names()) {
      CAPTURE(name);
      if (name.ends_with("attn.qkv.bias")) {
        check_qkv_bias(mg.graph, loss, name, grads.at(name), model.config().d_model);
        continue;
      }
      const auto rep = finite_diff_check(mg.graph, loss, name, 1e-5, 1e-4);
      CHECK(rep.pass);
    }
  }
}

TEST_CASE("log_softmax") {
  SUBCASE("symmetric pair") {
    const Tensor out = log_softmax(Tensor::vector({0.0, 0.0}));
    CHECK(out[0] == doctest::Approx(std::log(0.5)).epsilon(1e-15));
    CHECK(out[1] == doctest::Approx(std::log(0.5)).epsilon(1e-15));
  }
  SUBCASE("large logits do not overflow") {
    const Tensor out = log_softmax(Tensor::vector({1000.0, 0.0}));
    CHECK(std::abs(out[0]) < 1e-12);
    CHECK(out[1] == doctest::Approx(-1000.0));
    CHECK(out.all_finite());
  }
  SUBCASE("direct evaluation") {
    const Tensor out = log_softmax(Tensor::vector({1.0, 2.0, 3.0}));
    const double lse = std::log(std::exp(1.0) + std::exp(2.0) + std::exp(3.0));
    const double expected[] = {-2.4076, -1.4076, -0.4076};
    for (std::size_t i = 0; i < 3; ++i) {
      CHECK(std::abs(out[i] - expected[i]) <= 1e-4);
      CHECK(out[i] == doctest::Approx(1.0 + static_cast<double>(i) - lse).epsilon(1e-14));
    }
  }
  SUBCASE("empty input") { CHECK_THROWS_AS(log_softmax(Tensor::vector({})), ContractViolation); }
  SUBCASE("exponentials sum to one") {
    for (std::uint64_t seed = 0; seed < kSeeds; ++seed) {
      Rng rng(seed);
      const std::size_t n = 1 + rng.below(40);
      const Tensor x = testing::random_tensor(rng, {n}, 1.0 + 100.0 * rng.uniform());
      const Tensor out = log_softmax(x);
      double total = 0.0;
      for (double v : out.data()) total += std::exp(v);
      CHECK(std::abs(total - 1.0) <= 1e-12);
    }
  }
}

TEST_CASE("shape mismatches are errors") {
  Graph g;
  const NodeRef a = g.leaf("a", Tensor(Shape{2, 3}));
  const NodeRef b = g.leaf("b", Tensor(Shape{3, 2}));
  CHECK_THROWS_AS(g.add(a, b), ShapeError);
  CHECK_THROWS_AS(g.matmul(a, a), ShapeError);
  CHECK_THROWS_AS(g.add_bias(a, g.constant(Tensor(Shape{2}))), ShapeError);
  CHECK_THROWS_AS(g.leaf("a", Tensor(Shape{1})), ContractViolation);
}
