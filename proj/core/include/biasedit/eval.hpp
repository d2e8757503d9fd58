#pragma once

#include <map>
#include <nlohmann/json.hpp>
#include <optional>
#include <string>
#include <vector>

#include "biasedit/corpus.hpp"
#include "biasedit/model.hpp"
#include "biasedit/tokenizer.hpp"

namespace biasedit {

class EditorNet;

/// Average log-probabilities of one instance's realized sentences.
struct InstanceScore {
  double stereo = 0.0;
  double anti = 0.0;
  std::optional<double> mless;
};

std::vector<InstanceScore> score_instances(const Model& model, const Tokenizer& tokenizer,
                                           const std::vector<BiasInstance>& instances);

struct SsCount {
  double ss = 0.0;  // percent
  std::size_t ties = 0;
};
SsCount ss_from_scores(const std::vector<InstanceScore>& scores);
double lms_from_scores(const std::vector<InstanceScore>& scores);

/// 100 · mean 1[s̄ > ā]; ties count as 0.
double stereotype_score(const Model& model, const Tokenizer& tokenizer,
                        const std::vector<BiasInstance>& instances);
/// 100 · (½ mean 1[s̄ > m̄] + ½ mean 1[ā > m̄]).
double lm_score(const Model& model, const Tokenizer& tokenizer,
                const std::vector<BiasInstance>& instances);

/// exp of the mean next-token negative log-likelihood (BOS-conditioned).
double perplexity(const Model& model, const std::vector<std::vector<TokenId>>& corpus);

struct GroupMetrics {
  double ss_pre = 0.0, ss_post = 0.0;
  double lms_pre = 0.0, lms_post = 0.0;
  double delta_lms = 0.0;
  std::size_t n = 0;
  std::size_t ties_pre = 0, ties_post = 0;
};

struct BatchMetrics {
  std::size_t index = 0;
  BiasType bias_type = BiasType::kGender;
  GroupMetrics metrics;
};

struct MetricsReport {
  std::map<BiasType, GroupMetrics> per_type;
  GroupMetrics overall;
  std::vector<BatchMetrics> batches;
  bool full_test = false;

  nlohmann::json to_json() const;
  /// Table layout: one row per metric (SS pre/post, LMS pre/post, ΔLMS, n),
  /// one column per bias type plus overall.
  std::string to_csv() const;
};

// Published GPT2-medium gender figures, surfaced as context only.
inline constexpr double kReferenceGenderSsPre = 65.58;
inline constexpr double kReferenceGenderLmsPre = 93.39;

struct EvaluateOptions {
  // Score every edited model on the whole test set instead of its own batch.
  bool full_test = false;
};

/// Batch-edit `test` and aggregate SS/LMS before and after; per-batch
/// metrics are size-weighted into per-type and overall figures.
MetricsReport evaluate_edits(const Model& model, const EditorNet& editor,
                             const Tokenizer& tokenizer, const std::vector<BiasInstance>& test,
                             std::size_t batch_size, const EvaluateOptions& options = {});

}  // namespace biasedit
