#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "biasedit/checkpoint.hpp"
#include "biasedit/editor.hpp"
#include "biasedit/error.hpp"
#include "commands.hpp"

using namespace biasedit;
namespace fs = std::filesystem;

namespace {

int invoke(std::vector<std::string> args) {
  args.insert(args.begin(), "biasedit");
  return cli::run(args);
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(is), {}};
}

nlohmann::json read_json(const fs::path& p) { return nlohmann::json::parse(slurp(p)); }

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& name) : path(fs::temp_directory_path() / name) {
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

// Tiny experiment config over a generated data directory.
fs::path write_config(const fs::path& dir, double lr = 3e-3) {
  nlohmann::json j{
      {"output_dir", "run"},
      {"data",
       {{"corpus", "data/corpus.jsonl"},
        {"instances", "data/instances.json"},
        {"lexicon", "data/lexicon.json"}}},
      {"model", {{"n_blocks", 2}, {"d_model", 8}, {"n_heads", 2}, {"d_ff", 16}, {"max_seq", 32}}},
      {"pretrain", {{"steps", 20}, {"lr", lr}, {"batch_size", 8}, {"warmup", 2}}},
      {"edit_last_blocks", 1},
      {"editor", {{"hidden", 8}, {"max_steps", 2}, {"eval_every", 1}, {"batch_size", 4}}}};
  const fs::path p = dir / "config.json";
  std::ofstream(p) << j.dump(2);
  return p;
}

}  // namespace

TEST_CASE("sweep positions") {
  using V = std::vector<std::size_t>;
  CHECK(cli::sweep_blocks("1", 4) == V{0});
  CHECK(cli::sweep_blocks("12", 4) == V{0, 1});
  CHECK(cli::sweep_blocks("123", 4) == V{0, 1, 2});
  CHECK(cli::sweep_blocks("-1", 4) == V{3});
  CHECK(cli::sweep_blocks("-21", 4) == V{2, 3});
  CHECK(cli::sweep_blocks("-321", 4) == V{1, 2, 3});
  for (const char* bad : {"", "-", "0", "5", "11", "1a", "--1"})
    CHECK_THROWS_AS(cli::sweep_blocks(bad, 4), ConfigError);
}

TEST_CASE("usage and config errors map to exit code 2") {
  CHECK(invoke({}) == cli::kConfigError);
  CHECK(invoke({"no-such-command"}) == cli::kConfigError);
  CHECK(invoke({"--help"}) == cli::kOk);
  CHECK(invoke({"--config", "/nonexistent/config.json", "pretrain"}) == cli::kConfigError);
  TempDir t("biasedit_cli_cfg");
  std::ofstream(t.path / "bad.json") << R"({"colour": 1})";
  CHECK(invoke({"--config", (t.path / "bad.json").string(), "pretrain"}) == cli::kConfigError);
  std::ofstream(t.path / "broken.json") << "{";
  CHECK(invoke({"--config", (t.path / "broken.json").string(), "pretrain"}) == cli::kConfigError);
  // Referenced data files that do not exist.
  CHECK(invoke({"--config", write_config(t.path).string(), "pretrain"}) == cli::kConfigError);
  CHECK(invoke({"--out", (t.path / "d").string(), "gen-data", "--skew", "0.2"}) == cli::kConfigError);
}

TEST_CASE("gen-data") {
  TempDir t("biasedit_cli_gen");
  const fs::path a = t.path / "a", b = t.path / "b";
  REQUIRE(invoke({"--out", a.string(), "gen-data", "--sentences", "300"}) == cli::kOk);
  for (const char* f : {"corpus.jsonl", "instances.json", "lexicon.json"})
    CHECK(fs::exists(a / f));
  CHECK_FALSE(fs::exists(a / "synonyms.json"));

  CHECK(invoke({"--out", a.string(), "gen-data", "--sentences", "300"}) == cli::kConfigError);
  const std::string before = slurp(a / "corpus.jsonl");
  REQUIRE(invoke({"--out", a.string(), "--force", "gen-data", "--sentences", "300"}) == cli::kOk);
  CHECK(slurp(a / "corpus.jsonl") == before);

  REQUIRE(invoke({"--out", b.string(), "gen-data", "--sentences", "300", "--with-synonyms"}) ==
          cli::kOk);
  for (const char* f : {"corpus.jsonl", "instances.json", "lexicon.json"})
    CHECK(slurp(a / f) == slurp(b / f));
  CHECK(fs::exists(b / "synonyms.json"));

  REQUIRE(invoke({"--out", b.string(), "--force", "--seed", "3", "gen-data", "--sentences", "300"}) ==
          cli::kOk);
  CHECK(slurp(b / "corpus.jsonl") != before);

  const fs::path flat = t.path / "flat";
  REQUIRE(invoke({"--out", flat.string(), "gen-data", "--sentences", "300", "--skew", "0.5"}) ==
          cli::kOk);
  CHECK(read_json(flat / "gen-data.meta.json").at("no_signal") == true);
  CHECK(read_json(a / "gen-data.meta.json").at("no_signal") == false);
}

TEST_CASE("pipeline on a tiny model") {
  TempDir t("biasedit_cli_pipe");
  REQUIRE(invoke({"--out", (t.path / "data").string(), "gen-data", "--sentences", "400"}) == cli::kOk);
  const std::string config = write_config(t.path).string();
  const fs::path run = t.path / "run";

  CHECK(invoke({"--config", config, "edit-eval"}) == cli::kDataError);
  REQUIRE(invoke({"--config", config, "pretrain"}) == cli::kOk);
  CHECK(fs::exists(run / "model.bin"));
  CHECK(fs::exists(run / "inputs" / "config.json"));
  const auto pre = read_json(run / "pretrain.json");
  CHECK(pre.at("heldout_perplexity").get<double>() < pre.at("uniform_perplexity").get<double>());

  CHECK(invoke({"--config", config, "edit-eval"}) == cli::kDataError);  // no editor yet

  SUBCASE("zero-shift editor leaves the scores unchanged") {
    const Model m = load_model(run / "model.bin");
    EditorConfig ec;
    ec.target = EditTarget::last_blocks(1, m.config());
    ec.hidden = 8;
    ec.residual = false;
    ec.batch_size = 4;
    save_editor(t.path / "zero.bin", EditorNet(ec, m.config()));
    REQUIRE(invoke({"--config", config, "edit-eval", "--editor", (t.path / "zero.bin").string()}) ==
            cli::kOk);
    const auto metrics = read_json(run / "metrics.json").at("metrics");
    CHECK(metrics.at("overall").at("delta_lms") == 0.0);
    CHECK(metrics.at("overall").at("ss_pre") == metrics.at("overall").at("ss_post"));
    CHECK(fs::exists(run / "metrics.csv"));
  }
  SUBCASE("train-editor then edit-eval") {
    REQUIRE(invoke({"--config", config, "train-editor"}) == cli::kOk);
    CHECK(fs::exists(run / "editor.bin"));
    CHECK(fs::exists(run / "train_log.jsonl"));
    REQUIRE(invoke({"--config", config, "edit-eval"}) == cli::kOk);
    const auto j = read_json(run / "metrics.json");
    CHECK(j.at("command") == "edit-eval");
    CHECK(j.at("metrics").at("per_type").size() == 3);
  }
}

TEST_CASE("non-finite training maps to exit code 4") {
  TempDir t("biasedit_cli_div");
  REQUIRE(invoke({"--out", (t.path / "data").string(), "gen-data", "--sentences", "200"}) == cli::kOk);
  CHECK(invoke({"--config", write_config(t.path, 1e300).string(), "pretrain"}) == cli::kDivergence);
}
