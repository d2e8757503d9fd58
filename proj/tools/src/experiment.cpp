#include "experiment.hpp"

#include <chrono>
#include <cstdio>
#include <ctime>
#include <fstream>
#include <set>

#include "biasedit/error.hpp"

#ifndef BIASEDIT_VERSION
#define BIASEDIT_VERSION "unknown"
#endif

namespace biasedit::cli {

namespace {

fs::path resolve(const fs::path& p, const fs::path& base) {
  return p.is_absolute() || base.empty() ? p : base / p;
}

void check_keys(const nlohmann::json& j, const std::set<std::string>& allowed, const char* where) {
  for (const auto& [k, _] : j.items())
    if (!allowed.contains(k)) throw ConfigError(std::string("unknown key '") + k + "' in " + where);
}

}  // namespace

ExperimentConfig ExperimentConfig::from_json(const nlohmann::json& j, const fs::path& base) {
  if (!j.is_object()) throw ConfigError("config must be a JSON object");
  check_keys(j,
             {"seed", "output_dir", "model", "pretrain", "editor", "eval", "trace", "data",
              "edit_last_blocks"},
             "config");
  ExperimentConfig c;
  try {
    c.seed = j.value("seed", c.seed);
    if (j.contains("output_dir")) c.output_dir = resolve(j.at("output_dir").get<std::string>(), base);
    else c.output_dir = resolve(c.output_dir, base);
    if (j.contains("model")) {
      check_keys(j.at("model"),
                 {"n_blocks", "d_model", "n_heads", "d_ff", "vocab_size", "max_seq", "seed"},
                 "model");
      c.model = j.at("model").get<ModelConfig>();
    }
    if (j.contains("pretrain")) {
      const auto& p = j.at("pretrain");
      check_keys(p, {"steps", "lr", "batch_size", "warmup"}, "pretrain");
      c.pretrain.steps = p.value("steps", c.pretrain.steps);
      c.pretrain.lr = p.value("lr", c.pretrain.lr);
      c.pretrain.batch_size = p.value("batch_size", c.pretrain.batch_size);
      c.pretrain.warmup = p.value("warmup", c.pretrain.warmup);
    }
    if (j.contains("editor")) c.editor = j.at("editor").get<EditorConfig>();
    c.edit_last_blocks = j.value("edit_last_blocks", c.edit_last_blocks);
    if (j.contains("eval")) {
      const auto& e = j.at("eval");
      check_keys(e, {"batch_size", "full_test"}, "eval");
      c.eval.batch_size = e.value("batch_size", c.eval.batch_size);
      c.eval.full_test = e.value("full_test", c.eval.full_test);
    }
    if (j.contains("trace")) c.trace = j.at("trace").get<TraceConfig>();
    DataPaths d;
    d.corpus = resolve(d.corpus, base);
    d.instances = resolve(d.instances, base);
    d.lexicon = resolve(d.lexicon, base);
    if (j.contains("data")) {
      const auto& dj = j.at("data");
      check_keys(dj, {"corpus", "instances", "lexicon", "synonyms"}, "data");
      if (dj.contains("corpus")) d.corpus = resolve(dj.at("corpus").get<std::string>(), base);
      if (dj.contains("instances"))
        d.instances = resolve(dj.at("instances").get<std::string>(), base);
      if (dj.contains("lexicon")) d.lexicon = resolve(dj.at("lexicon").get<std::string>(), base);
      if (dj.contains("synonyms") && !dj.at("synonyms").is_null())
        d.synonyms = resolve(dj.at("synonyms").get<std::string>(), base);
    }
    c.data = d;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  c.set_seed(c.seed);
  c.trace.validate();
  return c;
}

ExperimentConfig ExperimentConfig::load(const fs::path& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot open config " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(is);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
  return from_json(j, path.parent_path());
}

void ExperimentConfig::set_seed(std::uint64_t s) {
  seed = s;
  model.seed = s;
  editor.seed = s;
  trace.seed = s;
}

void ExperimentConfig::resolve_target() {
  if (editor.target.paths.empty())
    editor.target = EditTarget::last_blocks(std::min(edit_last_blocks, model.n_blocks), model);
}

void ExperimentConfig::validate_files() const {
  for (const auto& p : {data.corpus, data.instances, data.lexicon})
    if (!fs::exists(p)) throw ConfigError("referenced file does not exist: " + p.string());
  if (data.synonyms && !fs::exists(*data.synonyms))
    throw ConfigError("referenced file does not exist: " + data.synonyms->string());
}

nlohmann::json ExperimentConfig::to_json() const {
  nlohmann::json j;
  j["seed"] = seed;
  j["output_dir"] = output_dir.generic_string();
  j["model"] = model;
  j["pretrain"] = {{"steps", pretrain.steps},
                   {"lr", pretrain.lr},
                   {"batch_size", pretrain.batch_size},
                   {"warmup", pretrain.warmup}};
  j["editor"] = editor;
  j["edit_last_blocks"] = edit_last_blocks;
  j["eval"] = {{"batch_size", eval.batch_size}, {"full_test", eval.full_test}};
  j["trace"] = trace;
  j["data"] = {{"corpus", data.corpus.generic_string()},
               {"instances", data.instances.generic_string()},
               {"lexicon", data.lexicon.generic_string()},
               {"synonyms", data.synonyms ? nlohmann::json(data.synonyms->generic_string())
                                          : nlohmann::json(nullptr)}};
  return j;
}

std::string ExperimentConfig::hash() const {
  // Paths are excluded so that relocating an experiment keeps its hash.
  nlohmann::json j = to_json();
  j.erase("output_dir");
  j.erase("data");
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char ch : j.dump()) {
    h ^= ch;
    h *= 1099511628211ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

std::string artifact_version() { return BIASEDIT_VERSION; }

nlohmann::json report_header(const ExperimentConfig& cfg, const std::string& command) {
  return {{"command", command}, {"config_hash", cfg.hash()}, {"version", artifact_version()}};
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw DataError("cannot write " + path.string());
  os << text;
}

void write_json(const fs::path& path, const nlohmann::json& j) { write_text(path, j.dump(2) + "\n"); }

nlohmann::json read_json_file(const fs::path& path) {
  std::ifstream is(path);
  if (!is) throw DataError("cannot open " + path.string());
  try {
    return nlohmann::json::parse(is);
  } catch (const nlohmann::json::parse_error& e) {
    throw DataError(path.string() + ": " + e.what());
  }
}

void write_sidecar(const fs::path& dir, const std::string& command, nlohmann::json extra) {
  const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  char stamp[32];
  std::strftime(stamp, sizeof stamp, "%Y-%m-%dT%H:%M:%SZ", std::gmtime(&now));
  extra["command"] = command;
  extra["finished_at"] = stamp;
  extra["version"] = artifact_version();
  write_json(dir / (command + ".meta.json"), extra);
}

}  // namespace biasedit::cli
