#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <nlohmann/json.hpp>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "biasedit/tokenizer.hpp"

namespace biasedit {

enum class BiasType { kGender, kRace, kReligion };

inline constexpr BiasType kAllBiasTypes[] = {BiasType::kGender, BiasType::kRace,
                                             BiasType::kReligion};

const char* to_string(BiasType t);
BiasType parse_bias_type(std::string_view s);

/// Literal fill-in marker inside an instance context.
inline constexpr std::string_view kBlankMarker = "BLANK";

/// One intrasentence sample: a context with a blank and three candidate terms.
/// Crows-Pairs style pairs leave `unrelated` empty.
struct BiasInstance {
  std::string id;
  BiasType bias_type = BiasType::kGender;
  std::string context;
  std::string stereotype;
  std::string anti_stereotype;
  std::optional<std::string> unrelated;
  std::vector<std::string> attribute_words;
  // Optional pool tag; "test" marks held-out evaluation instances.
  std::string pool;

  std::string realize(std::string_view term) const;
  std::string x_stereo() const { return realize(stereotype); }
  std::string x_anti() const { return realize(anti_stereotype); }
  std::string x_mless() const;  // DataError when `unrelated` is absent

  void validate() const;  // DataError on any broken invariant
  friend bool operator==(const BiasInstance&, const BiasInstance&) = default;
};

void to_json(nlohmann::json& j, const BiasInstance& inst);
/// Strict parse; missing keys raise DataError naming the field.
BiasInstance instance_from_json(const nlohmann::json& j);

std::vector<BiasInstance> parse_instances(const nlohmann::json& array);
std::vector<BiasInstance> load_instances(const std::filesystem::path& path);
void save_instances(const std::filesystem::path& path, const std::vector<BiasInstance>& instances);

/// bias type → (word, counterfactual) pairs; lookups work in both directions.
class AttributeLexicon {
 public:
  void add(BiasType type, std::string word, std::string counterfactual);
  std::optional<std::string> counterfactual(BiasType type, std::string_view word) const;
  const std::vector<std::pair<std::string, std::string>>& pairs(BiasType type) const;
  std::vector<std::string> words(BiasType type) const;  // both sides, in pair order
  bool empty() const;

  nlohmann::json to_json() const;
  static AttributeLexicon from_json(const nlohmann::json& j);
  static AttributeLexicon load(const std::filesystem::path& path);
  void save(const std::filesystem::path& path) const;

 private:
  std::map<BiasType, std::vector<std::pair<std::string, std::string>>> pairs_;
  std::map<BiasType, std::map<std::string, std::string, std::less<>>> lookup_;
};

struct SplitSpec {
  std::vector<BiasInstance> train;
  std::vector<BiasInstance> dev;
  std::vector<BiasInstance> test;
  std::uint64_t seed = 0;
};

/// Instances tagged pool "test" form the test split. The rest are split 8:1
/// into train/dev per bias type, then any train/dev instance sharing an
/// attribute term with test is dropped (global, across bias types).
SplitSpec split(const std::vector<BiasInstance>& instances, std::uint64_t seed);

/// Swap every gender attribute word for its counterfactual and exchange the
/// stereotype/anti-stereotype labels. Involution: applying it twice restores
/// the input (ids toggle a "-rev" suffix).
std::vector<BiasInstance> build_reversal_set(const std::vector<BiasInstance>& gender_instances,
                                             const AttributeLexicon& lexicon);

struct SynonymResult {
  std::vector<BiasInstance> instances;
  std::size_t skipped = 0;
};

/// Replace stereotype/anti-stereotype terms by their mapped synonyms; ids get
/// a "-syn" suffix. Instances whose synonym is out of vocabulary are skipped.
SynonymResult apply_synonyms(const std::vector<BiasInstance>& instances,
                             const std::map<std::string, std::string>& synonyms,
                             const Tokenizer& tokenizer);

std::map<std::string, std::string> load_synonyms(const std::filesystem::path& path);

/// Token positions (0-based, within the realized sentence) of the roles that
/// bias tracing probes.
struct AttributeSpans {
  std::vector<std::size_t> attribute_words;
  std::size_t term = 0;
  std::size_t before_term = 0;
};

AttributeSpans extract_attribute_spans(const BiasInstance& instance, const Tokenizer& tokenizer);

/// Tokenizer whose vocabulary covers the corpus and every realized instance.
Tokenizer build_tokenizer(const std::vector<std::string>& corpus,
                          const std::vector<BiasInstance>& instances,
                          const std::map<std::string, std::string>& synonyms = {});

std::vector<std::string> load_corpus_jsonl(const std::filesystem::path& path);
void save_corpus_jsonl(const std::filesystem::path& path, const std::vector<std::string>& corpus);

}  // namespace biasedit
