#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "biasedit/corpus.hpp"
#include "biasedit/graph.hpp"
#include "biasedit/model.hpp"
#include "biasedit/rng.hpp"
#include "biasedit/synthetic.hpp"
#include "biasedit/tensor.hpp"
#include "biasedit/tokenizer.hpp"

namespace testing {

using namespace biasedit;

inline constexpr std::uint64_t kSeeds = 50;

inline Tensor random_tensor(Rng& rng, Shape shape, double scale = 1.0) {
  Tensor t(std::move(shape));
  for (double& v : t.storage()) v = scale * rng.normal();
  return t;
}

// Entries bounded away from zero, for operators with a kink or pole there.
inline Tensor away_from_zero(Rng& rng, Shape shape, double lo = 0.05) {
  Tensor t(std::move(shape));
  for (double& v : t.storage()) {
    const double m = lo + rng.uniform();
    v = rng.bernoulli(0.5) ? m : -m;
  }
  return t;
}

inline Tensor positive_tensor(Rng& rng, Shape shape) {
  Tensor t(std::move(shape));
  for (double& v : t.storage()) v = 0.2 + 2.0 * rng.uniform();
  return t;
}

inline ModelConfig tiny_config(std::size_t vocab, std::uint64_t seed = 0) {
  ModelConfig c;
  c.n_blocks = 2;
  c.d_model = 8;
  c.n_heads = 2;
  c.d_ff = 16;
  c.vocab_size = vocab;
  c.max_seq = 16;
  c.seed = seed;
  return c;
}

// Random model with non-trivial biases and layer-norm parameters, so no
// gradient path is silently zero.
inline Model jittered_model(const ModelConfig& config, std::uint64_t seed, double jitter = 0.05) {
  Model m(config);
  Rng rng(Rng::mix(seed, 0x6a6974));
  for (const auto& [path, value] : m.params()) {
    Tensor t = value;
    for (double& v : t.storage()) v += jitter * rng.normal();
    m.set_param(path, t);
  }
  return m;
}

struct Fixture {
  SyntheticData data;
  Tokenizer tokenizer;
  std::vector<BiasInstance> instances;
};

inline Fixture small_fixture(std::uint64_t seed = 0) {
  SyntheticOptions o;
  o.seed = seed;
  o.corpus_sentences = 200;
  Fixture f;
  f.data = gen_synthetic(o);
  f.instances = f.data.instances;
  f.tokenizer = build_tokenizer(f.data.corpus, f.instances, f.data.synonyms);
  return f;
}

inline std::vector<BiasInstance> of_type(const std::vector<BiasInstance>& all, BiasType t) {
  std::vector<BiasInstance> out;
  for (const auto& i : all)
    if (i.bias_type == t) out.push_back(i);
  return out;
}

inline double rel_err(double a, double b) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-8});
}

}  // namespace testing
