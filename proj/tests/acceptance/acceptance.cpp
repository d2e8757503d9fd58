// Acceptance run: one PASS/FAIL line per criterion. Property criteria run
// the matching unit-test cases; the directional ones drive the CLI pipeline
// on the default configuration inside --workdir.
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <nlohmann/json.hpp>
#include <sstream>
#include <string>
#include <vector>

#include "commands.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

struct Line {
  int id;
  bool pass;
  bool fatal;
  std::string detail;
};

std::vector<Line> g_lines;

void report(int id, bool pass, const std::string& detail, bool fatal = true) {
  g_lines.push_back({id, pass, fatal, detail});
  std::printf("criterion %2d: %s  %s\n", id, pass ? "PASS" : (fatal ? "FAIL" : "FLAGGED"),
              detail.c_str());
  std::fflush(stdout);
}

std::string fmt(double v, int prec = 2) {
  std::ostringstream os;
  os.setf(std::ios::fixed);
  os.precision(prec);
  os << v;
  return os.str();
}

// Runs the named doctest cases of a unit-test executable; output goes to a log.
bool run_cases(const std::string& exe, const std::string& cases, const fs::path& log,
               double* elapsed) {
  const auto t0 = Clock::now();
  const std::string cmd = "\"" + exe + "\" \"--test-case=" + cases + "\" > \"" + log.string() +
                          "\" 2>&1";
  const int rc = std::system(cmd.c_str());
  if (elapsed) *elapsed = seconds_since(t0);
  return rc == 0;
}

int cli(std::vector<std::string> args) {
  args.insert(args.begin(), "biasedit");
  return biasedit::cli::run(args);
}

json read_json(const fs::path& p) {
  std::ifstream is(p);
  if (!is) throw std::runtime_error("missing " + p.string());
  return json::parse(is);
}

bool in_band(double v, double lo, double hi) { return v >= lo && v <= hi; }

struct Args {
  fs::path workdir = "acceptance_run";
  bool skip_sweep = false;
  std::size_t sweep_steps = 300;
};

Args parse(int argc, char** argv) {
  Args a;
  for (int i = 1; i < argc; ++i) {
    const std::string s = argv[i];
    if (s == "--workdir" && i + 1 < argc) a.workdir = argv[++i];
    else if (s == "--skip-sweep") a.skip_sweep = true;
    else if (s == "--sweep-steps" && i + 1 < argc) a.sweep_steps = std::stoul(argv[++i]);
    else {
      std::cerr << "usage: acceptance [--workdir DIR] [--skip-sweep] [--sweep-steps N]\n";
      std::exit(2);
    }
  }
  return a;
}

// Guard so one broken stage reports FAIL instead of aborting the run.
void guarded(int id, const std::function<void()>& body) {
  try {
    body();
  } catch (const std::exception& e) {
    report(id, false, std::string("error: ") + e.what(), id != 10);
  }
}

}  // namespace

int main(int argc, char** argv) {
  const Args args = parse(argc, argv);
  const fs::path work = fs::absolute(args.workdir);
  fs::remove_all(work);
  fs::create_directories(work / "logs");
  const fs::path logs = work / "logs";

  // ---------------------------------------------------------------- 1-5
  double t = 0.0;
  bool ok = run_cases(BIASEDIT_TEST_NUMERICS,
                      "every operator's backward matches central differences,"
                      "full micro-LM loss passes finite differences",
                      logs / "c1.log", &t);
  report(1, ok && t <= 120.0, "operators + full model, 50 seeds, " + fmt(t, 1) + " s (limit 120)");

  ok = run_cases(BIASEDIT_TEST_EDITOR,
                 "debias loss identities,debias loss on a model is symmetric and zero at equality,"
                 "retention loss",
                 logs / "c2.log", nullptr);
  report(2, ok, "symmetry, nonnegativity, zero at equality, L_r(m,m)=0, spot 1.66355");

  ok = run_cases(BIASEDIT_TEST_EDITOR, "decomposition identity on random instances",
                 logs / "c3.log", nullptr);
  report(3, ok, "sum of outer products vs dense gradient on 20 instances, tol 1e-8");

  ok = run_cases(BIASEDIT_TEST_EDITOR, "editor forward,apply_edit", logs / "c4.log", nullptr);
  report(4, ok, "zero-shift bit equality, locality, SVD rank bound");

  ok = run_cases(BIASEDIT_TEST_EVAL, "aggregation matches a brute-force recount", logs / "c5.log",
                 nullptr);
  report(5, ok, "evaluate_edits vs independent recount on 33 instances");

  // ---------------------------------------------------------------- pipeline
  const fs::path data = work / "data";
  json cfg = read_json(fs::path(BIASEDIT_SOURCE_DIR) / "configs" / "default.json");
  cfg["output_dir"] = (work / "run").string();
  cfg["data"] = {{"corpus", (data / "corpus.jsonl").string()},
                 {"instances", (data / "instances.json").string()},
                 {"lexicon", (data / "lexicon.json").string()},
                 {"synonyms", (data / "synonyms.json").string()}};
  const fs::path config = work / "config.json";
  std::ofstream(config) << cfg.dump(2);
  const std::string c = config.string();
  const fs::path run = work / "run";

  guarded(6, [&] {
    if (cli({"--out", data.string(), "--seed", "0", "gen-data", "--skew", "0.9",
             "--with-synonyms"}) != 0)
      throw std::runtime_error("gen-data failed");
    const auto t0 = Clock::now();
    if (cli({"--config", c, "pretrain"}) != 0) throw std::runtime_error("pretrain failed");
    if (cli({"--config", c, "train-editor"}) != 0) throw std::runtime_error("train-editor failed");
    if (cli({"--config", c, "edit-eval"}) != 0) throw std::runtime_error("edit-eval failed");
    const double secs = seconds_since(t0);
    const json o = read_json(run / "metrics.json").at("metrics").at("overall");
    const double pre = o.at("ss_pre"), post = o.at("ss_post"), dl = o.at("delta_lms");
    const bool pass = pre >= 65.0 && in_band(post, 45.0, 55.0) && dl >= -10.0 && secs <= 1800.0;
    report(6, pass,
           "pre SS " + fmt(pre) + " (>=65), post SS " + fmt(post) + " (45-55), dLMS " + fmt(dl) +
               " (>=-10), " + fmt(secs / 60.0, 1) + " min (limit 30)");
  });

  guarded(7, [&] {
    if (cli({"--config", c, "ablate"}) != 0) throw std::runtime_error("ablate failed");
    const json arms = read_json(run / "ablation.json").at("arms");
    const json& with = arms.at(0).at("overall");
    const json& without = arms.at(1).at("overall");
    const double dw = std::abs(with.at("delta_lms").get<double>());
    const double d0 = std::abs(without.at("delta_lms").get<double>());
    const double sw = with.at("ss_post"), s0 = without.at("ss_post");
    const bool pass = d0 >= 2.0 * dw && in_band(sw, 40.0, 60.0) && in_band(s0, 40.0, 60.0);
    report(7, pass,
           "|dLMS| lambda=0 " + fmt(d0) + " vs tuned " + fmt(dw) + " (need >= 2x), post SS " +
               fmt(s0) + " / " + fmt(sw) + " (40-60)");
  });

  guarded(8, [&] {
    if (cli({"--config", c, "reversal-set"}) != 0) throw std::runtime_error("reversal-set failed");
    const json r = read_json(run / "reversal.json");
    const double ss = r.at("metrics").at("overall").at("ss_post");
    const bool inv = r.at("involution");
    report(8, inv && in_band(ss, 40.0, 60.0),
           "reversal post SS " + fmt(ss) + " (40-60), involution " + (inv ? "exact" : "broken"));
  });

  guarded(9, [&] {
    double tu = 0.0;
    const bool unit = run_cases(BIASEDIT_TEST_TRACING, "restoration runs,trace grids",
                                logs / "c9.log", &tu);
    const auto t0 = Clock::now();
    if (cli({"--config", c, "trace"}) != 0) throw std::runtime_error("trace failed");
    const double secs = seconds_since(t0) + tu;
    const json tr = read_json(run / "trace" / "trace.json").at("trace");
    const double clean = tr.at("clean_fd"), corrupted = tr.at("corrupted_fd");
    const std::size_t n = tr.at("n");
    const bool pass = unit && n >= 100 && corrupted < clean && secs <= 300.0;
    report(9, pass,
           std::string("sigma=0 / restoration / determinism ") + (unit ? "ok" : "failed") +
               ", corrupted " + fmt(corrupted, 4) + " < clean " + fmt(clean, 4) + " over " +
               std::to_string(n) + " instances, " + fmt(secs, 1) + " s (limit 300)");
  });

  if (!args.skip_sweep) {
    guarded(10, [&] {
      // Reduced per-arm budget: ten arms at the full budget exceed the run time.
      json sc = cfg;
      sc["editor"]["max_steps"] = args.sweep_steps;
      sc["output_dir"] = (work / "sweep").string();
      fs::create_directories(work / "sweep");
      fs::copy_file(run / "model.bin", work / "sweep" / "model.bin");
      fs::copy_file(run / "vocab.json", work / "sweep" / "vocab.json");
      const fs::path sweep_config = work / "sweep_config.json";
      std::ofstream(sweep_config) << sc.dump(2);
      if (cli({"--config", sweep_config.string(), "sweep-blocks"}) != 0)
        throw std::runtime_error("sweep-blocks failed");
      const json claim = read_json(work / "sweep" / "sweep.json").at("claim");
      const bool holds = claim.at("holds").is_boolean() && claim.at("holds").get<bool>();
      std::string detail = "first/last arms in band " +
                           std::to_string(claim.at("first_group_arms").get<int>()) + "/" +
                           std::to_string(claim.at("last_group_arms").get<int>());
      if (claim.contains("last_group_mean_delta_lms"))
        detail += ", mean dLMS last " + fmt(claim.at("last_group_mean_delta_lms")) + " vs first " +
                  fmt(claim.at("first_group_mean_delta_lms"));
      report(10, holds, detail + " (non-fatal)", false);
    });
  }

  bool all = true;
  for (const auto& l : g_lines)
    if (l.fatal && !l.pass) all = false;
  std::printf("acceptance: %s\n", all ? "PASS" : "FAIL");
  return all ? 0 : 1;
}
