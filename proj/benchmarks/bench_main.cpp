#include <benchmark/benchmark.h>

#include "biasedit/editor.hpp"
#include "biasedit/eval.hpp"
#include "biasedit/synthetic.hpp"

using namespace biasedit;

namespace {

// Default micro-LM shape over a small synthetic vocabulary.
struct Bench {
  SyntheticData data;
  Tokenizer tok;
  Model model{ModelConfig{}};

  Bench() {
    SyntheticOptions o;
    o.corpus_sentences = 500;
    data = gen_synthetic(o);
    tok = build_tokenizer(data.corpus, data.instances, data.synonyms);
    ModelConfig c;
    c.n_blocks = 4;
    c.d_model = 64;
    c.n_heads = 4;
    c.d_ff = 256;
    c.max_seq = 32;
    c.vocab_size = tok.size();
    model = Model(c);
  }

  std::vector<BiasInstance> batch(std::size_t n) const {
    std::vector<BiasInstance> out;
    for (const auto& i : data.instances)
      if (i.bias_type == BiasType::kGender && out.size() < n) out.push_back(i);
    return out;
  }
};

const Bench& bench() {
  static const Bench b;
  return b;
}

void BM_Forward(benchmark::State& state) {
  const auto& b = bench();
  const auto toks = b.tok.encode(b.data.instances.front().x_stereo());
  for (auto _ : state) benchmark::DoNotOptimize(forward(b.model, toks).logits.data().data());
}
BENCHMARK(BM_Forward);

void BM_ScoreBatch(benchmark::State& state) {
  const auto& b = bench();
  std::vector<std::vector<TokenId>> seqs;
  for (const auto& i : b.batch(static_cast<std::size_t>(state.range(0))))
    seqs.push_back(b.tok.encode(i.x_stereo()));
  for (auto _ : state) benchmark::DoNotOptimize(avg_log_probs(b.model, seqs));
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(seqs.size()));
}
BENCHMARK(BM_ScoreBatch)->Arg(1)->Arg(16);

void BM_ForwardBackward(benchmark::State& state) {
  const auto& b = bench();
  std::vector<std::vector<TokenId>> seqs;
  for (const auto& i : b.batch(16)) seqs.push_back(b.tok.encode(i.x_stereo()));
  const ScoringBatch sb = make_scoring_batch(seqs);
  for (auto _ : state) {
    ModelGraph mg = build_model_graph(b.model, sb.input);
    NodeRef loss = mg.graph.mean(mg.graph.pick(mg.graph.log_softmax_rows(mg.logits), sb.targets));
    mg.graph.evaluate();
    benchmark::DoNotOptimize(backward(mg.graph, loss));
  }
}
BENCHMARK(BM_ForwardBackward)->Unit(benchmark::kMillisecond);

void BM_InnerGradients(benchmark::State& state) {
  const auto& b = bench();
  const auto batch = b.batch(16);
  const auto target = EditTarget::last_blocks(3, b.model.config());
  for (auto _ : state) benchmark::DoNotOptimize(inner_gradients(b.model, b.tok, batch, target));
}
BENCHMARK(BM_InnerGradients)->Unit(benchmark::kMillisecond);

void BM_MetaStep(benchmark::State& state) {
  const auto& b = bench();
  const auto batch = b.batch(16);
  EditorConfig c;
  c.target = EditTarget::last_blocks(3, b.model.config());
  const EditorNet editor(c, b.model.config());
  for (auto _ : state) benchmark::DoNotOptimize(meta_gradient(b.model, b.tok, editor, batch).l_e);
}
BENCHMARK(BM_MetaStep)->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
