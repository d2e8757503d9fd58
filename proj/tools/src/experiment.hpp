#pragma once

#include <cstdint>
#include <filesystem>
#include <nlohmann/json.hpp>
#include <optional>
#include <string>

#include "biasedit/editor.hpp"
#include "biasedit/model.hpp"
#include "biasedit/pretrain.hpp"
#include "biasedit/tracing.hpp"

namespace biasedit::cli {

namespace fs = std::filesystem;

struct DataPaths {
  fs::path corpus = "data/corpus.jsonl";
  fs::path instances = "data/instances.json";
  fs::path lexicon = "data/lexicon.json";
  std::optional<fs::path> synonyms;
};

struct PretrainSettings {
  std::size_t steps = 3000;
  double lr = 3e-3;
  std::size_t batch_size = 16;
  std::size_t warmup = 100;
};

struct EvalSettings {
  std::size_t batch_size = 0;  // 0: use the editor's training batch size
  bool full_test = false;
};

/// Single JSON file driving every command. The top-level seed is copied into
/// every stochastic component (model init, split, editor, tracing).
struct ExperimentConfig {
  ModelConfig model;
  PretrainSettings pretrain;
  EditorConfig editor;
  EvalSettings eval;
  TraceConfig trace;
  DataPaths data;
  fs::path output_dir = "runs/default";
  std::uint64_t seed = 0;
  // Editor target given as a number of last blocks when no explicit paths are set.
  std::size_t edit_last_blocks = 3;

  static ExperimentConfig from_json(const nlohmann::json& j, const fs::path& base_dir);
  static ExperimentConfig load(const fs::path& path);

  void set_seed(std::uint64_t s);
  void resolve_target();  // fills editor.target from edit_last_blocks when empty
  void validate_files() const;
  nlohmann::json to_json() const;
  std::string hash() const;  // FNV-1a of the canonical JSON
  std::size_t eval_batch_size() const {
    return eval.batch_size ? eval.batch_size : editor.batch_size;
  }
};

std::string artifact_version();

/// Report envelope shared by every command.
nlohmann::json report_header(const ExperimentConfig& cfg, const std::string& command);

void write_json(const fs::path& path, const nlohmann::json& j);
void write_text(const fs::path& path, const std::string& text);
nlohmann::json read_json_file(const fs::path& path);

/// Timestamped sidecar; the only file allowed to differ between identical runs.
void write_sidecar(const fs::path& dir, const std::string& command, nlohmann::json extra = {});

}  // namespace biasedit::cli
