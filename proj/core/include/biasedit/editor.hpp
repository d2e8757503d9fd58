#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <nlohmann/json.hpp>
#include <optional>
#include <string>
#include <vector>

#include "biasedit/corpus.hpp"
#include "biasedit/graph.hpp"
#include "biasedit/model.hpp"
#include "biasedit/tokenizer.hpp"

namespace biasedit {

/// The set of edited weights; only "blocks.{i}.mlp.out" paths are allowed.
struct EditTarget {
  std::vector<std::string> paths;

  void validate(const ModelConfig& config) const;  // ConfigError
  static EditTarget last_blocks(std::size_t count, const ModelConfig& config);
  static EditTarget from_blocks(const std::vector<std::size_t>& blocks);
  friend bool operator==(const EditTarget&, const EditTarget&) = default;
};

struct EditorConfig {
  EditTarget target;
  double lambda = 1.0;
  std::size_t batch_size = 16;
  double lr = 1e-3;
  // Adam rate for the log step sizes; they need to move orders of magnitude.
  double alpha_lr = 5e-2;
  double alpha_init = 1e-3;
  std::size_t max_steps = 600;
  std::size_t eval_every = 25;
  std::uint64_t seed = 0;
  std::size_t hidden = 128;
  double init_scale = 1.0;
  // Add the normalized input back onto the network output (MEND-style).
  bool residual = true;

  void validate(const ModelConfig& model) const;
  friend bool operator==(const EditorConfig&, const EditorConfig&) = default;
};

void to_json(nlohmann::json& j, const EditorConfig& c);
void from_json(const nlohmann::json& j, EditorConfig& c);

/// Inner-gradient factors per edited path. Rows are token rows of the packed
/// (x_stereo, x_anti) scoring batch, with rows whose layer input is shared by
/// both sentences of a pair merged into one (their deltas summed). u is the
/// input of the edited layer and delta the gradient of Σ L_d at its output,
/// so Σ_rows δ uᵀ = ∇_W Σ L_d.
struct LayerFactors {
  Tensor u;      // [T × d_ff]
  Tensor delta;  // [T × d_model]
};

struct GradFactors {
  std::map<std::string, LayerFactors> layers;
  std::size_t batch = 0;  // number of instances the factors came from
};

struct EditShift {
  std::map<std::string, Tensor> shifts;  // path → [d_model × d_ff]
};

/// Hyper-network applied to gradient factors. One two-hidden-layer MLP over
/// [u; δ] is shared by all edited layers; each layer has its own input
/// scale/offset and step size α = exp(ρ).
class EditorNet {
 public:
  EditorNet(EditorConfig config, const ModelConfig& model);

  const EditorConfig& config() const noexcept { return config_; }
  std::size_t d_in() const noexcept { return d_in_; }
  std::size_t d_out() const noexcept { return d_out_; }

  std::map<std::string, Tensor>& params() noexcept { return params_; }
  const std::map<std::string, Tensor>& params() const noexcept { return params_; }
  double alpha(const std::string& path) const;

  static std::string scale_name(const std::string& path) { return path + ".scale"; }
  static std::string offset_name(const std::string& path) { return path + ".offset"; }
  static std::string log_alpha_name(const std::string& path) { return path + ".log_alpha"; }

  friend bool operator==(const EditorNet&, const EditorNet&) = default;

 private:
  friend EditorNet load_editor(const std::filesystem::path&);
  EditorConfig config_;
  std::size_t d_in_ = 0, d_out_ = 0;
  std::map<std::string, Tensor> params_;
};

void save_editor(const std::filesystem::path& path, const EditorNet& editor);
EditorNet load_editor(const std::filesystem::path& path);

/// Editor computation recorded in a graph whose leaves are the editor
/// parameters; `shifts` hold the ∇̃ node per edited path.
struct EditorGraph {
  Graph graph;
  std::map<std::string, NodeRef> shifts;
};

EditorGraph build_editor_graph(const EditorNet& editor, const GradFactors& factors);

// ---------------------------------------------------------------- losses

/// Symmetric KL between (b_s, b_a) = softmax(s̄, ā) and its swap:
/// 2 (b_s − b_a) ln(b_s / b_a) = 2 x tanh(x / 2) with x = s̄ − ā.
double debias_loss_value(double s_bar, double a_bar);

double debias_loss(const Model& model, const Tokenizer& tokenizer, const BiasInstance& instance);
double retention_loss(const Model& pre, const Model& post, const Tokenizer& tokenizer,
                      const BiasInstance& instance);

/// Adds Σ_i L_d nodes for sequence pairs laid out as (stereo_i, anti_i) at
/// consecutive indices of `avg_lp` ([2B]).
NodeRef add_debias_loss_nodes(Graph& g, NodeRef avg_lp);

/// Inputs of a retention term: pre-edit next-token distributions of the
/// packed x_mless scoring batch.
struct RetentionTarget {
  ScoringBatch batch;
  Tensor p_pre;     // [R × V]
  Tensor logp_pre;  // [R × V]
};

RetentionTarget make_retention_target(const Model& pre, const ScoringBatch& mless);
/// Σ_i mean_k KL(p_pre ‖ p_post) over the sequences of `target.batch`.
NodeRef add_retention_loss_nodes(ModelGraph& post, const RetentionTarget& target);

// ---------------------------------------------------------------- editing

GradFactors inner_gradients(const Model& model, const Tokenizer& tokenizer,
                            const std::vector<BiasInstance>& batch, const EditTarget& target);

EditShift editor_forward(const EditorNet& editor, const GradFactors& factors);

/// Copy of `model` with W + ∇̃ written to every shifted path.
Model apply_edit(const Model& model, const EditShift& shift);

/// One persistent edit of the pre-edit model for `batch`.
Model edit_batch(const Model& model, const EditorNet& editor, const Tokenizer& tokenizer,
                 const std::vector<BiasInstance>& batch);

struct EditedBatch {
  std::vector<BiasInstance> instances;
  Model edited;
};

/// Batches are formed within each bias type (in type order, then input
/// order) and each is edited from a fresh copy of `model`.
std::vector<std::vector<BiasInstance>> make_edit_batches(const std::vector<BiasInstance>& instances,
                                                         std::size_t batch_size);
std::vector<EditedBatch> batch_edit(const Model& model, const EditorNet& editor,
                                    const Tokenizer& tokenizer,
                                    const std::vector<BiasInstance>& test,
                                    std::size_t batch_size);

// ---------------------------------------------------------------- training

struct TrainLogRecord {
  std::size_t step = 0;
  double l_d = 0.0, l_r = 0.0, l_e = 0.0;
  std::optional<double> dev_ss, dev_lms;
};

nlohmann::json to_json(const TrainLogRecord& r);

struct TrainResult {
  EditorNet editor;
  std::vector<TrainLogRecord> log;
  std::size_t selected_step = 0;
  double selected_dev_ss = 0.0;
  double selected_dev_delta_lms = 0.0;
};

struct TrainOptions {
  std::function<void(const TrainLogRecord&)> on_record;
};

/// Meta-trains φ with the pre-edit model frozen. Edits are ephemeral; the
/// checkpoint with dev SS closest to 50 among those with dev ΔLMS ≥ −10 is
/// returned (earlier step on ties).
TrainResult train_editor(const Model& model, const Tokenizer& tokenizer, const SplitSpec& split,
                         const EditorConfig& config, const TrainOptions& options = {});

/// One meta-training step's loss and φ-gradient (exposed for testing).
struct MetaStep {
  double l_d = 0.0, l_r = 0.0, l_e = 0.0;
  std::map<std::string, Tensor> grads;
};
MetaStep meta_gradient(const Model& model, const Tokenizer& tokenizer, const EditorNet& editor,
                       const std::vector<BiasInstance>& batch);

/// L_E of the edited model for a batch, as a plain function of φ.
double edit_loss(const Model& model, const Tokenizer& tokenizer, const EditorNet& editor,
                 const std::vector<BiasInstance>& batch);

void write_train_log(const std::filesystem::path& path, const std::vector<TrainLogRecord>& log);

}  // namespace biasedit
