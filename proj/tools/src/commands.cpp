#include "commands.hpp"

#include <CLI11.hpp>
#include <algorithm>
#include <cmath>
#include <future>
#include <iostream>
#include <spdlog/spdlog.h>

#include "biasedit/checkpoint.hpp"
#include "biasedit/corpus.hpp"
#include "biasedit/editor.hpp"
#include "biasedit/error.hpp"
#include "biasedit/eval.hpp"
#include "biasedit/pretrain.hpp"
#include "biasedit/rng.hpp"
#include "biasedit/synthetic.hpp"
#include "biasedit/tracing.hpp"
#include "experiment.hpp"

namespace biasedit::cli {

namespace {

struct GlobalFlags {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  bool force = false;
};

ExperimentConfig load_config(const GlobalFlags& g) {
  ExperimentConfig cfg = g.config.empty() ? ExperimentConfig::from_json(nlohmann::json::object(), {})
                                          : ExperimentConfig::load(g.config);
  if (g.seed) cfg.set_seed(*g.seed);
  if (!g.out.empty()) cfg.output_dir = g.out;
  return cfg;
}

// Copy the immutable inputs of an experiment next to its outputs.
void snapshot_inputs(const ExperimentConfig& cfg) {
  const fs::path dir = cfg.output_dir / "inputs";
  fs::create_directories(dir);
  write_json(dir / "config.json", cfg.to_json());
  for (const auto& p : {cfg.data.corpus, cfg.data.instances, cfg.data.lexicon})
    fs::copy_file(p, dir / p.filename(), fs::copy_options::overwrite_existing);
  if (cfg.data.synonyms)
    fs::copy_file(*cfg.data.synonyms, dir / cfg.data.synonyms->filename(),
                  fs::copy_options::overwrite_existing);
}

struct Data {
  std::vector<std::string> corpus;
  std::vector<BiasInstance> instances;
  AttributeLexicon lexicon;
  std::map<std::string, std::string> synonyms;
};

Data load_data(const ExperimentConfig& cfg) {
  cfg.validate_files();
  Data d;
  d.corpus = load_corpus_jsonl(cfg.data.corpus);
  d.instances = load_instances(cfg.data.instances);
  d.lexicon = AttributeLexicon::load(cfg.data.lexicon);
  if (cfg.data.synonyms) d.synonyms = load_synonyms(*cfg.data.synonyms);
  return d;
}

struct Artifacts {
  Model model;
  Tokenizer tokenizer;
};

Artifacts load_artifacts(const ExperimentConfig& cfg) {
  const fs::path mp = cfg.output_dir / "model.bin";
  const fs::path vp = cfg.output_dir / "vocab.json";
  if (!fs::exists(mp) || !fs::exists(vp))
    throw DataError("missing checkpoint in " + cfg.output_dir.string() + " (run pretrain first)");
  return {load_model(mp), Tokenizer::from_json(read_json_file(vp))};
}

EditorNet load_editor_artifact(const ExperimentConfig& cfg, const std::string& override_path) {
  const fs::path p = override_path.empty() ? cfg.output_dir / "editor.bin" : fs::path(override_path);
  if (!fs::exists(p)) throw DataError("missing editor checkpoint " + p.string() + " (run train-editor first)");
  return load_editor(p);
}

nlohmann::json group_summary(const GroupMetrics& g) {
  return {{"ss_pre", g.ss_pre},   {"ss_post", g.ss_post},     {"lms_pre", g.lms_pre},
          {"lms_post", g.lms_post}, {"delta_lms", g.delta_lms}, {"n", g.n}};
}

nlohmann::json metrics_report(const ExperimentConfig& cfg, const std::string& command,
                              const MetricsReport& r) {
  nlohmann::json j = report_header(cfg, command);
  j["metrics"] = r.to_json();
  return j;
}

void log_metrics(const std::string& what, const MetricsReport& r) {
  for (const auto& [t, g] : r.per_type)
    spdlog::info("{} {:8s} SS {:6.2f} -> {:6.2f}  LMS {:6.2f} -> {:6.2f}  dLMS {:+6.2f}  (n={})",
                 what, to_string(t), g.ss_pre, g.ss_post, g.lms_pre, g.lms_post, g.delta_lms, g.n);
  const auto& o = r.overall;
  spdlog::info("{} overall  SS {:6.2f} -> {:6.2f}  LMS {:6.2f} -> {:6.2f}  dLMS {:+6.2f}  (n={})",
               what, o.ss_pre, o.ss_post, o.lms_pre, o.lms_post, o.delta_lms, o.n);
}

TrainResult train_logged(const Model& model, const Tokenizer& tok, const SplitSpec& split,
                         const EditorConfig& ec, const std::string& tag) {
  TrainOptions opts;
  opts.on_record = [&](const TrainLogRecord& r) {
    if (r.dev_ss)
      spdlog::info("{}step {:5d}  L_d {:.4f}  L_r {:.5f}  dev SS {:6.2f}  dev LMS {:6.2f}", tag,
                   r.step, r.l_d, r.l_r, *r.dev_ss, *r.dev_lms);
  };
  TrainResult res = train_editor(model, tok, split, ec, opts);
  spdlog::info("{}selected step {} (dev SS {:.2f}, dev dLMS {:+.2f})", tag, res.selected_step,
               res.selected_dev_ss, res.selected_dev_delta_lms);
  return res;
}

// ---------------------------------------------------------------- commands

int cmd_gen_data(const GlobalFlags& g, double skew, std::size_t n_templates,
                 std::size_t sentences, bool with_synonyms) {
  const fs::path out = g.out.empty() ? fs::path("data") : fs::path(g.out);
  std::vector<std::string> files{"corpus.jsonl", "instances.json", "lexicon.json"};
  if (with_synonyms) files.emplace_back("synonyms.json");
  for (const auto& f : files)
    if (fs::exists(out / f) && !g.force)
      throw ConfigError((out / f).string() + " exists; pass --force to overwrite");

  SyntheticOptions o;
  o.seed = g.seed.value_or(0);
  o.skew = skew;
  o.n_templates = n_templates;
  o.corpus_sentences = sentences;
  const SyntheticData data = gen_synthetic(o);
  fs::create_directories(out);
  save_corpus_jsonl(out / "corpus.jsonl", data.corpus);
  save_instances(out / "instances.json", data.instances);
  data.lexicon.save(out / "lexicon.json");
  if (with_synonyms) write_json(out / "synonyms.json", data.synonyms);
  if (data.no_signal) spdlog::warn("skew 0.5: corpus carries no bias signal (flagged no-signal)");
  write_sidecar(out, "gen-data", data.metadata());
  spdlog::info("wrote {} sentences and {} instances to {}", data.corpus.size(),
               data.instances.size(), out.string());
  return kOk;
}

int cmd_pretrain(const GlobalFlags& g) {
  ExperimentConfig cfg = load_config(g);
  const Data d = load_data(cfg);
  const Tokenizer tok = build_tokenizer(d.corpus, d.instances, d.synonyms);
  cfg.model.vocab_size = tok.size();
  cfg.model.validate();
  std::vector<std::vector<TokenId>> seqs;
  for (const auto& s : d.corpus) {
    seqs.push_back(tok.encode(s));
    if (seqs.back().size() > cfg.model.max_seq)
      throw ConfigError("corpus sentence longer than model.max_seq: " + s);
  }
  fs::create_directories(cfg.output_dir);
  snapshot_inputs(cfg);

  PretrainOptions po;
  po.steps = cfg.pretrain.steps;
  po.lr = cfg.pretrain.lr;
  po.batch_size = cfg.pretrain.batch_size;
  po.warmup = cfg.pretrain.warmup;
  po.on_step = [&](std::size_t step, double loss) {
    if ((step + 1) % 250 == 0) spdlog::info("pretrain step {:5d}  loss {:.4f}", step + 1, loss);
  };
  spdlog::info("pretraining {} parameters over {} sentences (vocab {})",
               Model(cfg.model).parameter_count(), seqs.size(), tok.size());
  const PretrainResult pr = pretrain_model(cfg.model, seqs, po);
  save_model(cfg.output_dir / "model.bin", pr.model);
  write_json(cfg.output_dir / "vocab.json", tok.to_json());

  const SplitSpec split = biasedit::split(d.instances, cfg.seed);
  nlohmann::json rep = report_header(cfg, "pretrain");
  rep["heldout_perplexity"] = pr.heldout_perplexity;
  rep["uniform_perplexity"] = static_cast<double>(tok.size());
  rep["final_loss"] = pr.loss_curve.empty() ? 0.0 : pr.loss_curve.back();
  rep["parameter_count"] = pr.model.parameter_count();
  rep["vocab_size"] = tok.size();
  for (BiasType t : kAllBiasTypes) {
    std::vector<BiasInstance> sub;
    for (const auto& inst : split.test)
      if (inst.bias_type == t) sub.push_back(inst);
    if (sub.empty()) continue;
    rep["test_pre_edit"][to_string(t)] = {{"ss", stereotype_score(pr.model, tok, sub)},
                                          {"lms", lm_score(pr.model, tok, sub)},
                                          {"n", sub.size()}};
  }
  write_json(cfg.output_dir / "pretrain.json", rep);
  std::string curve = "step,loss\n";
  for (std::size_t i = 0; i < pr.loss_curve.size(); ++i)
    curve += std::to_string(i + 1) + "," + nlohmann::json(pr.loss_curve[i]).dump() + "\n";
  write_text(cfg.output_dir / "pretrain_loss.csv", curve);
  write_sidecar(cfg.output_dir, "pretrain");
  spdlog::info("held-out perplexity {:.3f} (uniform {})", pr.heldout_perplexity, tok.size());
  for (const auto& [t, v] : rep["test_pre_edit"].items())
    spdlog::info("pre-edit test {:8s} SS {:6.2f}  LMS {:6.2f}", t, v["ss"].get<double>(),
                 v["lms"].get<double>());
  return kOk;
}

int cmd_train_editor(const GlobalFlags& g) {
  ExperimentConfig cfg = load_config(g);
  const Data d = load_data(cfg);
  const Artifacts a = load_artifacts(cfg);
  cfg.model = a.model.config();
  cfg.resolve_target();
  snapshot_inputs(cfg);
  const SplitSpec split = biasedit::split(d.instances, cfg.seed);
  spdlog::info("split: {} train / {} dev / {} test", split.train.size(), split.dev.size(),
               split.test.size());
  const TrainResult res = train_logged(a.model, a.tokenizer, split, cfg.editor, "");
  save_editor(cfg.output_dir / "editor.bin", res.editor);
  write_train_log(cfg.output_dir / "train_log.jsonl", res.log);
  nlohmann::json rep = report_header(cfg, "train-editor");
  rep["selected_step"] = res.selected_step;
  rep["selected_dev_ss"] = res.selected_dev_ss;
  rep["selected_dev_delta_lms"] = res.selected_dev_delta_lms;
  rep["split"] = {{"train", split.train.size()}, {"dev", split.dev.size()},
                  {"test", split.test.size()}};
  for (const auto& path : res.editor.config().target.paths)
    rep["alpha"][path] = res.editor.alpha(path);
  write_json(cfg.output_dir / "train_editor.json", rep);
  write_sidecar(cfg.output_dir, "train-editor");
  return kOk;
}

int cmd_edit_eval(const GlobalFlags& g, const std::string& editor_path, bool full_test) {
  ExperimentConfig cfg = load_config(g);
  const Data d = load_data(cfg);
  const Artifacts a = load_artifacts(cfg);
  const EditorNet editor = load_editor_artifact(cfg, editor_path);
  const SplitSpec split = biasedit::split(d.instances, cfg.seed);
  EvaluateOptions eo;
  eo.full_test = full_test || cfg.eval.full_test;
  const std::size_t bs = cfg.eval.batch_size ? cfg.eval.batch_size : editor.config().batch_size;
  const MetricsReport r = evaluate_edits(a.model, editor, a.tokenizer, split.test, bs, eo);
  log_metrics("test", r);
  write_json(cfg.output_dir / "metrics.json", metrics_report(cfg, "edit-eval", r));
  write_text(cfg.output_dir / "metrics.csv", r.to_csv());
  write_sidecar(cfg.output_dir, "edit-eval");
  return kOk;
}

int cmd_trace(const GlobalFlags& g) {
  ExperimentConfig cfg = load_config(g);
  const Data d = load_data(cfg);
  const Artifacts a = load_artifacts(cfg);
  const double sigma =
      calibrate_sigma(a.model, a.tokenizer, d.lexicon, cfg.trace.sigma_multiplier);
  std::vector<BiasInstance> pool = d.instances;
  Rng rng(Rng::mix(cfg.seed, 0x74726163));
  rng.shuffle(pool);
  TraceConfig tc = cfg.trace;
  tc.n_samples = std::min(tc.n_samples, pool.size());
  spdlog::info("tracing {} instances, sigma {:.4f}", tc.n_samples, sigma);
  const TraceResult tr = trace_aggregate(a.model, a.tokenizer, pool, tc, sigma);
  const fs::path dir = cfg.output_dir / "trace";
  write_trace_csvs(dir, tr);
  nlohmann::json rep = report_header(cfg, "trace");
  rep["trace"] = tr.to_json();
  write_json(dir / "trace.json", rep);
  write_sidecar(dir, "trace");
  spdlog::info("clean f_d {:.4f}  corrupted f_d {:.4f}", tr.clean_fd, tr.corrupted_fd);
  return kOk;
}

struct ArmResult {
  std::string label;
  EditorConfig config;
  TrainResult train;
  MetricsReport metrics;
};

std::vector<ArmResult> run_arms(const Artifacts& a, const SplitSpec& split,
                                const ExperimentConfig& cfg,
                                std::vector<std::pair<std::string, EditorConfig>> arms,
                                std::size_t jobs) {
  auto one = [&](const std::string& label, const EditorConfig& ec) {
    TrainResult tr = train_logged(a.model, a.tokenizer, split, ec, "[" + label + "] ");
    const std::size_t bs = cfg.eval.batch_size ? cfg.eval.batch_size : ec.batch_size;
    EvaluateOptions eo;
    eo.full_test = cfg.eval.full_test;
    MetricsReport mr = evaluate_edits(a.model, tr.editor, a.tokenizer, split.test, bs, eo);
    log_metrics("[" + label + "]", mr);
    return ArmResult{label, ec, std::move(tr), std::move(mr)};
  };
  std::vector<ArmResult> out;
  jobs = std::max<std::size_t>(1, jobs);
  for (std::size_t start = 0; start < arms.size(); start += jobs) {
    std::vector<std::future<ArmResult>> fut;
    for (std::size_t i = start; i < std::min(arms.size(), start + jobs); ++i)
      fut.push_back(std::async(jobs > 1 ? std::launch::async : std::launch::deferred, one,
                               arms[i].first, arms[i].second));
    for (auto& f : fut) out.push_back(f.get());
  }
  return out;
}

nlohmann::json arm_json(const ArmResult& r) {
  nlohmann::json j{{"label", r.label},
                   {"lambda", r.config.lambda},
                   {"target", r.config.target.paths},
                   {"selected_step", r.train.selected_step},
                   {"overall", group_summary(r.metrics.overall)}};
  for (const auto& [t, gm] : r.metrics.per_type) j["per_type"][to_string(t)] = group_summary(gm);
  return j;
}

int cmd_ablate(const GlobalFlags& g, std::size_t jobs) {
  ExperimentConfig cfg = load_config(g);
  const Data d = load_data(cfg);
  const Artifacts a = load_artifacts(cfg);
  cfg.model = a.model.config();
  cfg.resolve_target();
  snapshot_inputs(cfg);
  const SplitSpec split = biasedit::split(d.instances, cfg.seed);
  EditorConfig with = cfg.editor;
  EditorConfig without = cfg.editor;
  without.lambda = 0.0;
  const auto arms = run_arms(a, split, cfg,
                             {{"with_retention", with}, {"without_retention", without}}, jobs);
  nlohmann::json rep = report_header(cfg, "ablate");
  for (const auto& r : arms) rep["arms"].push_back(arm_json(r));
  const double dl_with = std::abs(arms[0].metrics.overall.delta_lms);
  const double dl_without = std::abs(arms[1].metrics.overall.delta_lms);
  rep["directional"] = {{"abs_delta_lms_with", dl_with},
                        {"abs_delta_lms_without", dl_without},
                        {"without_strictly_larger", dl_without > dl_with}};
  write_json(cfg.output_dir / "ablation.json", rep);
  std::string csv = "arm,lambda,bias_type,ss_pre,ss_post,lms_pre,lms_post,delta_lms\n";
  for (const auto& r : arms) {
    auto row = [&](const std::string& type, const GroupMetrics& m) {
      csv += r.label + "," + nlohmann::json(r.config.lambda).dump() + "," + type + "," +
             nlohmann::json(m.ss_pre).dump() + "," + nlohmann::json(m.ss_post).dump() + "," +
             nlohmann::json(m.lms_pre).dump() + "," + nlohmann::json(m.lms_post).dump() + "," +
             nlohmann::json(m.delta_lms).dump() + "\n";
    };
    for (const auto& [t, m] : r.metrics.per_type) row(to_string(t), m);
    row("overall", r.metrics.overall);
  }
  write_text(cfg.output_dir / "ablation.csv", csv);
  write_sidecar(cfg.output_dir, "ablate");
  return kOk;
}

int cmd_sweep_blocks(const GlobalFlags& g, std::vector<std::string> positions, std::size_t jobs) {
  ExperimentConfig cfg = load_config(g);
  const Data d = load_data(cfg);
  const Artifacts a = load_artifacts(cfg);
  cfg.model = a.model.config();
  snapshot_inputs(cfg);
  const SplitSpec split = biasedit::split(d.instances, cfg.seed);
  if (positions.empty()) positions = {"1", "2", "3", "12", "123", "-1", "-2", "-3", "-21", "-321"};
  std::vector<std::pair<std::string, EditorConfig>> arms;
  for (const auto& p : positions) {
    EditorConfig ec = cfg.editor;
    ec.target = EditTarget::from_blocks(sweep_blocks(p, cfg.model.n_blocks));
    arms.emplace_back(p, ec);
  }
  const auto res = run_arms(a, split, cfg, arms, jobs);

  nlohmann::json rep = report_header(cfg, "sweep-blocks");
  std::string csv = "position,blocks,ss_pre,ss_post,lms_pre,lms_post,delta_lms\n";
  // Directional check: among arms whose post-edit SS lands in [40, 60], the
  // last-block group should lose no more LMS than the first-block group.
  double first_sum = 0.0, last_sum = 0.0;
  std::size_t first_n = 0, last_n = 0;
  for (const auto& r : res) {
    rep["rows"].push_back(arm_json(r));
    std::string blocks;
    for (const auto& p : r.config.target.paths)
      blocks += (blocks.empty() ? "" : " ") + std::to_string(*paths::mlp_out_block(p));
    const auto& o = r.metrics.overall;
    csv += r.label + "," + blocks + "," + nlohmann::json(o.ss_pre).dump() + "," +
           nlohmann::json(o.ss_post).dump() + "," + nlohmann::json(o.lms_pre).dump() + "," +
           nlohmann::json(o.lms_post).dump() + "," + nlohmann::json(o.delta_lms).dump() + "\n";
    if (o.ss_post < 40.0 || o.ss_post > 60.0) continue;
    if (r.label.starts_with("-")) {
      last_sum += o.delta_lms;
      ++last_n;
    } else {
      first_sum += o.delta_lms;
      ++first_n;
    }
  }
  nlohmann::json claim{{"band", {40.0, 60.0}}, {"first_group_arms", first_n},
                       {"last_group_arms", last_n}};
  if (first_n && last_n) {
    const double fm = first_sum / static_cast<double>(first_n);
    const double lm = last_sum / static_cast<double>(last_n);
    claim["first_group_mean_delta_lms"] = fm;
    claim["last_group_mean_delta_lms"] = lm;
    claim["holds"] = lm >= fm;
  } else {
    claim["holds"] = nullptr;
  }
  rep["claim"] = claim;
  if (!(claim["holds"].is_boolean() && claim["holds"].get<bool>()))
    spdlog::warn("sweep-blocks: last-block group does not match the first-block group's LMS "
                 "retention (flagged, not fatal)");
  write_json(cfg.output_dir / "sweep.json", rep);
  write_text(cfg.output_dir / "sweep.csv", csv);
  write_sidecar(cfg.output_dir, "sweep-blocks");
  return kOk;
}

int cmd_reversal_set(const GlobalFlags& g, const std::string& editor_path) {
  ExperimentConfig cfg = load_config(g);
  const Data d = load_data(cfg);
  const SplitSpec split = biasedit::split(d.instances, cfg.seed);
  std::vector<BiasInstance> gender;
  for (const auto& inst : split.test)
    if (inst.bias_type == BiasType::kGender) gender.push_back(inst);
  if (gender.empty()) throw DataError("reversal-set: no gender instances in the test split");
  const auto reversed = build_reversal_set(gender, d.lexicon);
  const bool involution = build_reversal_set(reversed, d.lexicon) == gender;
  fs::create_directories(cfg.output_dir);
  save_instances(cfg.output_dir / "reversal_instances.json", reversed);

  nlohmann::json rep = report_header(cfg, "reversal-set");
  rep["n"] = reversed.size();
  rep["involution"] = involution;
  if (fs::exists(cfg.output_dir / "model.bin")) {
    const Artifacts a = load_artifacts(cfg);
    const EditorNet editor = load_editor_artifact(cfg, editor_path);
    const std::size_t bs = cfg.eval.batch_size ? cfg.eval.batch_size : editor.config().batch_size;
    const MetricsReport r = evaluate_edits(a.model, editor, a.tokenizer, reversed, bs);
    log_metrics("reversal", r);
    rep["metrics"] = r.to_json();
    write_text(cfg.output_dir / "reversal_metrics.csv", r.to_csv());
  }
  write_json(cfg.output_dir / "reversal.json", rep);
  write_sidecar(cfg.output_dir, "reversal-set");
  return kOk;
}

int cmd_synonyms(const GlobalFlags& g, const std::string& map_path, const std::string& editor_path) {
  ExperimentConfig cfg = load_config(g);
  const Data d = load_data(cfg);
  const Artifacts a = load_artifacts(cfg);
  std::map<std::string, std::string> syn = d.synonyms;
  if (!map_path.empty()) syn = load_synonyms(map_path);
  if (syn.empty()) throw ConfigError("synonyms: no synonym map (set data.synonyms or --map)");
  const SplitSpec split = biasedit::split(d.instances, cfg.seed);
  const SynonymResult sr = apply_synonyms(split.test, syn, a.tokenizer);
  if (sr.skipped) spdlog::warn("synonyms: skipped {} instances", sr.skipped);
  if (sr.instances.empty()) throw DataError("synonyms: every test instance was skipped");
  save_instances(cfg.output_dir / "synonym_instances.json", sr.instances);
  const EditorNet editor = load_editor_artifact(cfg, editor_path);
  const std::size_t bs = cfg.eval.batch_size ? cfg.eval.batch_size : editor.config().batch_size;
  const MetricsReport r = evaluate_edits(a.model, editor, a.tokenizer, sr.instances, bs);
  log_metrics("synonyms", r);
  nlohmann::json rep = metrics_report(cfg, "synonyms", r);
  rep["skipped"] = sr.skipped;
  write_json(cfg.output_dir / "synonyms.json", rep);
  write_text(cfg.output_dir / "synonyms_metrics.csv", r.to_csv());
  write_sidecar(cfg.output_dir, "synonyms");
  return kOk;
}

int cmd_report(const GlobalFlags& g) {
  ExperimentConfig cfg = load_config(g);
  nlohmann::json rep = report_header(cfg, "report");
  const std::vector<std::pair<std::string, fs::path>> parts{
      {"pretrain", "pretrain.json"},   {"train_editor", "train_editor.json"},
      {"edit_eval", "metrics.json"},   {"ablate", "ablation.json"},
      {"sweep_blocks", "sweep.json"},  {"reversal", "reversal.json"},
      {"synonyms", "synonyms.json"},   {"trace", "trace/trace.json"}};
  std::size_t found = 0;
  for (const auto& [key, file] : parts) {
    const fs::path p = cfg.output_dir / file;
    if (!fs::exists(p)) continue;
    rep["sections"][key] = read_json_file(p);
    ++found;
  }
  if (found == 0)
    throw DataError("report: no command outputs found in " + cfg.output_dir.string());
  write_json(cfg.output_dir / "report.json", rep);
  spdlog::info("report: collected {} sections into {}", found,
               (cfg.output_dir / "report.json").string());
  return kOk;
}

void print_error(const char* kind, int code, const std::string& msg) {
  std::cerr << nlohmann::json{{"error", {{"kind", kind}, {"message", msg}, {"exit_code", code}}}}
                   .dump()
            << std::endl;
}

}  // namespace

std::vector<std::size_t> sweep_blocks(const std::string& position, std::size_t n_blocks) {
  const bool last = position.starts_with("-");
  const std::string digits = last ? position.substr(1) : position;
  if (digits.empty() || digits.find_first_not_of("123456789") != std::string::npos)
    throw ConfigError("bad sweep position '" + position + "'");
  std::vector<std::size_t> blocks;
  for (char ch : digits) {
    const auto k = static_cast<std::size_t>(ch - '0');
    if (k > n_blocks)
      throw ConfigError("sweep position '" + position + "' exceeds " + std::to_string(n_blocks) +
                        " blocks");
    blocks.push_back(last ? n_blocks - k : k - 1);
  }
  std::sort(blocks.begin(), blocks.end());
  if (std::adjacent_find(blocks.begin(), blocks.end()) != blocks.end())
    throw ConfigError("sweep position '" + position + "' repeats a block");
  return blocks;
}

int run(const std::vector<std::string>& args) {
  CLI::App app{"Desk-scale bias editing lab"};
  app.require_subcommand(1);
  app.fallthrough();
  GlobalFlags g;
  std::uint64_t seed = 0;
  app.add_option("--config", g.config, "Experiment config (JSON)");
  auto* seed_opt = app.add_option("--seed", seed, "Seed for every stochastic component");
  app.add_option("--out", g.out, "Output directory");
  app.add_flag("--force", g.force, "Overwrite existing outputs");
  bool verbose = false;
  app.add_flag("-v,--verbose", verbose, "Debug logging");

  double skew = 0.9;
  std::size_t n_templates = 6, sentences = 24000;
  bool with_synonyms = false;
  auto* gen = app.add_subcommand("gen-data", "Generate the synthetic corpus, instances and lexicon");
  gen->add_option("--skew", skew, "Same-side trait frequency in [0.5, 1]");
  gen->add_option("--n-templates", n_templates, "Held-out instance templates");
  gen->add_option("--sentences", sentences, "Corpus size");
  gen->add_flag("--with-synonyms", with_synonyms, "Also write synonyms.json");

  auto* pre = app.add_subcommand("pretrain", "Train the micro language model");
  auto* tre = app.add_subcommand("train-editor", "Meta-train the editor networks");

  std::string editor_path;
  bool full_test = false;
  auto* ev = app.add_subcommand("edit-eval", "Batch-edit the test set and report SS/LMS");
  ev->add_option("--editor", editor_path, "Editor checkpoint (default: <out>/editor.bin)");
  ev->add_flag("--full-test", full_test, "Score each edit on the whole test set");

  auto* tr = app.add_subcommand("trace", "Bias tracing over token roles, layers and sites");

  std::size_t jobs = 1;
  auto* ab = app.add_subcommand("ablate", "Retention-loss ablation (lambda vs 0)");
  ab->add_option("--jobs", jobs, "Arms to run in parallel");

  std::vector<std::string> positions;
  auto* sw = app.add_subcommand("sweep-blocks", "Edit different block groups and compare");
  sw->add_option("--positions", positions, "Subset of positions (e.g. 1 12 -21)");
  sw->add_option("--jobs", jobs, "Arms to run in parallel");

  auto* rv = app.add_subcommand("reversal-set", "Gender-reversed test set and its evaluation");
  rv->add_option("--editor", editor_path, "Editor checkpoint");

  std::string map_path;
  auto* sy = app.add_subcommand("synonyms", "Synonym-substituted test set and its evaluation");
  sy->add_option("--map", map_path, "Synonym map JSON (term -> synonym)");
  sy->add_option("--editor", editor_path, "Editor checkpoint");

  auto* rp = app.add_subcommand("report", "Collect every command report into report.json");

  std::vector<std::string> rev(args.rbegin(), args.rend());
  if (!rev.empty()) rev.pop_back();  // program name
  try {
    app.parse(rev);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    if (rc == 0) return kOk;
    print_error("usage", kConfigError, e.what());
    return kConfigError;
  }
  if (*seed_opt) g.seed = seed;
  spdlog::set_pattern("[%H:%M:%S] %^%l%$ %v");
  spdlog::set_level(verbose ? spdlog::level::debug : spdlog::level::info);

  try {
    if (*gen) return cmd_gen_data(g, skew, n_templates, sentences, with_synonyms);
    if (*pre) return cmd_pretrain(g);
    if (*tre) return cmd_train_editor(g);
    if (*ev) return cmd_edit_eval(g, editor_path, full_test);
    if (*tr) return cmd_trace(g);
    if (*ab) return cmd_ablate(g, jobs);
    if (*sw) return cmd_sweep_blocks(g, positions, jobs);
    if (*rv) return cmd_reversal_set(g, editor_path);
    if (*sy) return cmd_synonyms(g, map_path, editor_path);
    if (*rp) return cmd_report(g);
  } catch (const ConfigError& e) {
    print_error("config", kConfigError, e.what());
    return kConfigError;
  } catch (const DataError& e) {
    print_error("data", kDataError, e.what());
    return kDataError;
  } catch (const DivergenceError& e) {
    print_error("divergence", kDivergence, e.what());
    return kDivergence;
  } catch (const std::exception& e) {
    print_error("internal", kInternalError, e.what());
    return kInternalError;
  }
  return kInternalError;
}

}  // namespace biasedit::cli
