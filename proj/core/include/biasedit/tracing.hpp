#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <nlohmann/json.hpp>
#include <optional>
#include <string>
#include <vector>

#include "biasedit/corpus.hpp"
#include "biasedit/model.hpp"
#include "biasedit/tokenizer.hpp"

namespace biasedit {

enum class TraceRole { kAttributeWord, kAttributeTerm, kBeforeTerm };
const char* role_name(TraceRole r);
TraceRole parse_role(const std::string& s);

struct TraceConfig {
  double sigma_multiplier = 3.0;
  std::size_t n_samples = 100;
  std::vector<Site> sites{Site::kBlockOut, Site::kAttnOut, Site::kMlpOut};
  std::vector<TraceRole> roles{TraceRole::kAttributeWord, TraceRole::kAttributeTerm,
                               TraceRole::kBeforeTerm};
  std::uint64_t seed = 0;
  // Restore every position of a role at once instead of one position per run.
  bool multi_position = false;
  // Rows are raw token positions instead of roles (single-instance traces).
  bool per_position = false;

  void validate() const;  // ConfigError
};

void to_json(nlohmann::json& j, const TraceConfig& c);
void from_json(const nlohmann::json& j, TraceConfig& c);

/// Layers traced for a site. block_out has n_blocks + 1 layers: layer 0 is
/// the embedding output and layer ℓ > 0 the output of block ℓ − 1. attn_out
/// and mlp_out have one layer per block.
std::size_t trace_layers(const ModelConfig& config, Site site);

struct TraceGrid {
  std::vector<std::string> rows;         // role names or "p{k}:{token}"
  std::vector<std::vector<double>> fd;   // [rows × layers] mean bias gap
  std::vector<std::vector<std::size_t>> n;
};

struct TraceResult {
  std::map<Site, TraceGrid> grids;
  double clean_fd = 0.0;
  double corrupted_fd = 0.0;
  double sigma = 0.0;
  std::size_t n = 0;

  std::string csv(Site site) const;
  nlohmann::json to_json() const;
};

/// |avg_log_prob(x_stereo) − avg_log_prob(x_anti)|.
double bias_gap(const Model& model, const Tokenizer& tokenizer, const BiasInstance& instance);

/// multiplier × std over all entries of the selected embedding rows.
double embedding_sigma(const Tensor& embed, const std::vector<TokenId>& rows, double multiplier);
/// σ from the embedding rows of every in-vocabulary lexicon word.
double calibrate_sigma(const Model& model, const Tokenizer& tokenizer,
                       const AttributeLexicon& lexicon, double multiplier);

/// A restoration target in trace coordinates: sentence token position,
/// trace layer (see trace_layers) and site.
struct TraceCell {
  std::size_t position = 0;
  std::size_t layer = 0;
  Site site = Site::kBlockOut;
};

/// Bias gaps of one instance: clean, corrupted, and corrupted with each
/// restoration set in `restorations` patched in from the clean run.
struct RestorationRuns {
  double clean_fd = 0.0;
  double corrupted_fd = 0.0;
  std::vector<double> restored_fd;
};

RestorationRuns run_restorations(const Model& model, const Tokenizer& tokenizer,
                                 const BiasInstance& instance, double sigma, std::uint64_t seed,
                                 const std::vector<std::vector<TraceCell>>& restorations);

/// Noise seed used for an instance: one per instance, shared by all its runs.
std::uint64_t instance_noise_seed(std::uint64_t seed, const BiasInstance& instance);

TraceResult trace_instance(const Model& model, const Tokenizer& tokenizer,
                           const BiasInstance& instance, const TraceConfig& config, double sigma);

TraceResult trace_aggregate(const Model& model, const Tokenizer& tokenizer,
                            const std::vector<BiasInstance>& instances, const TraceConfig& config,
                            double sigma);

/// Cell-wise mean of role-aligned results, weighting each result by its n.
TraceResult merge_traces(const std::vector<TraceResult>& results);

/// Writes one "trace_{site}.csv" per site into `dir`.
void write_trace_csvs(const std::filesystem::path& dir, const TraceResult& result);

}  // namespace biasedit
