#pragma once

#include <cstdint>
#include <map>
#include <nlohmann/json.hpp>
#include <string>
#include <vector>

#include "biasedit/corpus.hpp"

namespace biasedit {

struct SyntheticOptions {
  std::uint64_t seed = 0;
  std::size_t n_templates = 6;   // held-out templates used for instances
  double skew = 0.9;             // P(trait drawn from the group's own side)
  std::size_t corpus_sentences = 24000;
  std::size_t edit_per_slot = 3; // train/dev instances per (template, group word)
  std::size_t test_per_slot = 1; // test instances per (template, group word)
  double noun_slot_rate = 0.08;  // trait sentences whose slot holds a noun instead

  void validate() const;  // ConfigError
};

struct SyntheticData {
  std::vector<std::string> corpus;
  std::vector<BiasInstance> instances;  // test instances carry pool "test"
  AttributeLexicon lexicon;
  std::map<std::string, std::string> synonyms;  // test term → same-side test term
  bool no_signal = false;                      // skew = 0.5
  SyntheticOptions options;

  nlohmann::json metadata() const;
};

/// Templated sentences over a closed vocabulary. Each bias type has two
/// sides of group words; every trait adjective belongs to one side, and
/// trait sentences pick a same-side trait with probability `skew`.
/// Instances use (prefix, core) template combinations absent from the corpus,
/// and test instances use traits that never appear in train/dev instances.
SyntheticData gen_synthetic(const SyntheticOptions& options);
SyntheticData gen_synthetic(std::uint64_t seed, std::size_t n_templates, double skew);

}  // namespace biasedit
