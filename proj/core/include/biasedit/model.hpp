#pragma once

#include <compare>
#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "biasedit/graph.hpp"
#include "biasedit/tensor.hpp"
#include "biasedit/tokenizer.hpp"

namespace biasedit {

struct ModelConfig {
  std::size_t n_blocks = 4;
  std::size_t d_model = 64;
  std::size_t n_heads = 4;
  std::size_t d_ff = 256;
  std::size_t vocab_size = 512;
  std::size_t max_seq = 32;
  std::uint64_t seed = 0;

  void validate() const;
  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

void to_json(nlohmann::json& j, const ModelConfig& c);
void from_json(const nlohmann::json& j, ModelConfig& c);

namespace paths {
std::string mlp_out(std::size_t block);
std::string mlp_in(std::size_t block);
std::string attn_qkv(std::size_t block);
std::string attn_out(std::size_t block);
// Block index of a "blocks.{i}.mlp.out" path, or nullopt for any other path.
std::optional<std::size_t> mlp_out_block(const std::string& path);
}  // namespace paths

/// Pre-norm decoder-only transformer with learned positional embeddings.
/// Parameters live in a map keyed by path ("embed", "blocks.{i}.mlp.out", ...).
/// Linear weights are stored [d_out × d_in].
class Model {
 public:
  explicit Model(ModelConfig config);  // seeded random initialization
  static Model zeros(ModelConfig config);

  const ModelConfig& config() const noexcept { return config_; }

  Tensor get_param(const std::string& path) const;
  void set_param(const std::string& path, Tensor value);
  const Tensor& param(const std::string& path) const;
  bool has_param(const std::string& path) const { return params_.contains(path); }
  const std::map<std::string, Tensor>& params() const noexcept { return params_; }
  std::size_t parameter_count() const;

  friend bool operator==(const Model&, const Model&) = default;

 private:
  Model(ModelConfig config, bool randomize);
  ModelConfig config_;
  std::map<std::string, Tensor> params_;
};

enum class Site { kEmbed, kAttnOut, kMlpIn, kMlpOut, kBlockOut };
const char* site_name(Site s);
Site parse_site(const std::string& s);

/// (token position, layer, site). For kEmbed the layer must be 0; for the
/// other sites it is the block index.
struct SiteKey {
  std::size_t position = 0;
  std::size_t layer = 0;
  Site site = Site::kBlockOut;
  auto operator<=>(const SiteKey&) const = default;
};

class ActivationCache {
 public:
  const Tensor& at(std::size_t position, std::size_t layer, Site site) const;
  const Tensor& at(const SiteKey& key) const { return at(key.position, key.layer, key.site); }
  void put(const SiteKey& key, Tensor value) { entries_[key] = std::move(value); }
  std::size_t size() const noexcept { return entries_.size(); }

 private:
  std::map<SiteKey, Tensor> entries_;
};

struct NoiseSpec {
  std::vector<std::size_t> positions;
  double sigma = 0.0;
  std::uint64_t seed = 0;
};

struct ForwardOptions {
  bool capture = false;
  std::map<SiteKey, Tensor> overrides;
  std::optional<NoiseSpec> noise;
};

struct ForwardResult {
  Tensor logits;  // [K × V]
  std::optional<ActivationCache> cache;
};

/// Forward pass over one sequence. `tokens` are fed as-is (no BOS is added).
ForwardResult forward(const Model& model, std::span<const TokenId> tokens,
                      const ForwardOptions& options = {});

// ----------------------------------------------------------------------------
// Packed-graph construction, shared by scoring, pretraining, editing and tracing.

/// Several sequences laid out row-wise; offsets has one entry per sequence
/// start plus the total row count.
struct PackedInput {
  std::vector<TokenId> ids;
  std::vector<std::size_t> offsets{0};

  void append(std::span<const TokenId> seq);
  std::size_t rows() const { return ids.size(); }
  std::size_t sequences() const { return offsets.size() - 1; }
};

/// Site key addressed by packed row instead of per-sequence position.
struct RowSiteKey {
  std::size_t row = 0;
  std::size_t layer = 0;
  Site site = Site::kBlockOut;
  auto operator<=>(const RowSiteKey&) const = default;
};

struct BuildOptions {
  // Parameters that become differentiable leaves; all others are constants.
  // Empty optional means every parameter is a leaf.
  std::optional<std::set<std::string>> trainable;
  std::map<RowSiteKey, Tensor> overrides;
  std::map<std::size_t, Tensor> embed_noise;  // row → additive noise
};

struct ModelGraph {
  Graph graph;
  NodeRef logits;
  NodeRef embed;
  std::vector<NodeRef> attn_out, mlp_in, mlp_out, block_out;
  std::vector<std::size_t> offsets;
};

ModelGraph build_model_graph(const Model& model, const PackedInput& input,
                             const BuildOptions& options = {});

/// Scoring layout: each sequence t_1..t_K is fed as [BOS, t_1..t_{K-1}] and
/// row k predicts t_{k+1}. Returns the packed input and per-row targets.
struct ScoringBatch {
  PackedInput input;
  std::vector<TokenId> targets;
};
ScoringBatch make_scoring_batch(const std::vector<std::vector<TokenId>>& sequences);

/// Adds nodes computing per-sequence average target log-probability ([S]).
NodeRef add_avg_log_prob_nodes(ModelGraph& mg, const std::vector<TokenId>& targets);

/// (1/K) Σ_k log P(t_k | BOS, t_<k).
double avg_log_prob(const Model& model, std::span<const TokenId> tokens);
std::vector<double> avg_log_probs(const Model& model,
                                  const std::vector<std::vector<TokenId>>& sequences);

}  // namespace biasedit
