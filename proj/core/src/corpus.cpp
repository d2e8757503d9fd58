#include "biasedit/corpus.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <set>
#include <spdlog/spdlog.h>

#include "biasedit/error.hpp"
#include "biasedit/rng.hpp"

namespace biasedit {

const char* to_string(BiasType t) {
  switch (t) {
    case BiasType::kGender: return "gender";
    case BiasType::kRace: return "race";
    case BiasType::kReligion: return "religion";
  }
  return "?";
}

BiasType parse_bias_type(std::string_view s) {
  const std::string l = to_lower(s);
  for (BiasType t : kAllBiasTypes)
    if (l == to_string(t)) return t;
  throw DataError("unknown bias_type: " + std::string(s));
}

namespace {

std::size_t count_occurrences(std::string_view hay, std::string_view needle) {
  std::size_t n = 0;
  for (auto pos = hay.find(needle); pos != std::string_view::npos;
       pos = hay.find(needle, pos + needle.size()))
    ++n;
  return n;
}

bool contains_word_ci(std::string_view text, std::string_view word) {
  const std::string t = to_lower(text);
  const std::string w = to_lower(word);
  for (auto pos = t.find(w); pos != std::string::npos; pos = t.find(w, pos + 1)) {
    const bool left = pos == 0 || !std::isalnum(static_cast<unsigned char>(t[pos - 1]));
    const std::size_t end = pos + w.size();
    const bool right = end == t.size() || !std::isalnum(static_cast<unsigned char>(t[end]));
    if (left && right) return true;
  }
  return false;
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>()};
}

nlohmann::json read_json(const std::filesystem::path& path) {
  try {
    return nlohmann::json::parse(read_file(path));
  } catch (const nlohmann::json::parse_error& e) {
    throw DataError(path.string() + ": invalid JSON: " + e.what());
  }
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw DataError("cannot open " + path.string() + " for writing");
  os << text;
}

}  // namespace

std::string BiasInstance::realize(std::string_view term) const {
  const auto pos = context.find(kBlankMarker);
  if (pos == std::string::npos) throw DataError("instance " + id + ": context has no BLANK");
  std::string out = context;
  out.replace(pos, kBlankMarker.size(), term);
  return out;
}

std::string BiasInstance::x_mless() const {
  if (!unrelated) throw DataError("instance " + id + " has no unrelated term");
  return realize(*unrelated);
}

void BiasInstance::validate() const {
  if (id.empty()) throw DataError("instance with empty id");
  const auto blanks = count_occurrences(context, kBlankMarker);
  if (blanks != 1)
    throw DataError("instance " + id + ": context must contain exactly one BLANK, found " +
                    std::to_string(blanks));
  if (stereotype.empty() || anti_stereotype.empty())
    throw DataError("instance " + id + ": empty attribute term");
  if (stereotype == anti_stereotype || (unrelated && (*unrelated == stereotype ||
                                                      *unrelated == anti_stereotype)))
    throw DataError("instance " + id + ": attribute terms must be pairwise distinct");
  for (const auto& w : attribute_words)
    if (!contains_word_ci(context, w))
      throw DataError("instance " + id + ": attribute word '" + w + "' not in context");
}

void to_json(nlohmann::json& j, const BiasInstance& inst) {
  j = nlohmann::json{{"id", inst.id},
                     {"bias_type", to_string(inst.bias_type)},
                     {"context", inst.context},
                     {"stereotype", inst.stereotype},
                     {"anti_stereotype", inst.anti_stereotype},
                     {"attribute_words", inst.attribute_words}};
  if (inst.unrelated) j["unrelated"] = *inst.unrelated;
  if (!inst.pool.empty()) j["pool"] = inst.pool;
}

BiasInstance instance_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw DataError("instance record must be a JSON object");
  auto field = [&](const char* key) -> const nlohmann::json& {
    auto it = j.find(key);
    if (it == j.end()) {
      const std::string where = j.contains("id") && j["id"].is_string()
                                    ? " in instance " + j["id"].get<std::string>()
                                    : "";
      throw DataError(std::string("missing required field '") + key + "'" + where);
    }
    return *it;
  };
  auto str = [&](const char* key) {
    const auto& v = field(key);
    if (!v.is_string()) throw DataError(std::string("field '") + key + "' must be a string");
    return v.get<std::string>();
  };
  BiasInstance inst;
  inst.id = str("id");
  inst.bias_type = parse_bias_type(str("bias_type"));
  inst.context = str("context");
  inst.stereotype = str("stereotype");
  inst.anti_stereotype = str("anti_stereotype");
  if (auto it = j.find("unrelated"); it != j.end() && !it->is_null())
    inst.unrelated = it->get<std::string>();
  const auto& words = field("attribute_words");
  if (!words.is_array()) throw DataError("field 'attribute_words' must be an array");
  inst.attribute_words = words.get<std::vector<std::string>>();
  if (auto it = j.find("pool"); it != j.end()) inst.pool = it->get<std::string>();
  inst.validate();
  return inst;
}

std::vector<BiasInstance> parse_instances(const nlohmann::json& array) {
  if (!array.is_array()) throw DataError("instance file must hold a JSON array");
  std::vector<BiasInstance> out;
  std::set<std::string> ids;
  for (const auto& rec : array) {
    BiasInstance inst = instance_from_json(rec);
    if (!ids.insert(inst.id).second) throw DataError("duplicate instance id: " + inst.id);
    out.push_back(std::move(inst));
  }
  return out;
}

std::vector<BiasInstance> load_instances(const std::filesystem::path& path) {
  return parse_instances(read_json(path));
}

void save_instances(const std::filesystem::path& path, const std::vector<BiasInstance>& instances) {
  write_text(path, nlohmann::json(instances).dump(1) + "\n");
}

// ---------------------------------------------------------------- lexicon

void AttributeLexicon::add(BiasType type, std::string word, std::string counter) {
  word = to_lower(word);
  counter = to_lower(counter);
  if (word == counter) throw DataError("lexicon pair maps a word to itself: " + word);
  auto& lk = lookup_[type];
  for (const auto& [a, b] : {std::pair{word, counter}, std::pair{counter, word}}) {
    auto it = lk.find(a);
    if (it != lk.end() && it->second != b)
      throw DataError("lexicon is not an involution: '" + a + "' maps to both '" + it->second +
                      "' and '" + b + "'");
  }
  if (lk.contains(word)) return;
  lk[word] = counter;
  lk[counter] = word;
  pairs_[type].emplace_back(std::move(word), std::move(counter));
}

std::optional<std::string> AttributeLexicon::counterfactual(BiasType type,
                                                            std::string_view word) const {
  auto t = lookup_.find(type);
  if (t == lookup_.end()) return std::nullopt;
  auto it = t->second.find(to_lower(word));
  if (it == t->second.end()) return std::nullopt;
  return it->second;
}

const std::vector<std::pair<std::string, std::string>>& AttributeLexicon::pairs(
    BiasType type) const {
  static const std::vector<std::pair<std::string, std::string>> kEmpty;
  auto it = pairs_.find(type);
  return it == pairs_.end() ? kEmpty : it->second;
}

std::vector<std::string> AttributeLexicon::words(BiasType type) const {
  std::vector<std::string> out;
  for (const auto& [a, b] : pairs(type)) {
    out.push_back(a);
    out.push_back(b);
  }
  return out;
}

bool AttributeLexicon::empty() const { return pairs_.empty(); }

nlohmann::json AttributeLexicon::to_json() const {
  nlohmann::json j = nlohmann::json::object();
  for (const auto& [type, ps] : pairs_) {
    nlohmann::json arr = nlohmann::json::array();
    for (const auto& [a, b] : ps) arr.push_back({a, b});
    j[to_string(type)] = arr;
  }
  return j;
}

AttributeLexicon AttributeLexicon::from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw DataError("lexicon must be a JSON object");
  AttributeLexicon lex;
  for (const auto& [key, arr] : j.items()) {
    const BiasType t = parse_bias_type(key);
    if (!arr.is_array()) throw DataError("lexicon entry for " + key + " must be an array");
    for (const auto& pair : arr) {
      if (!pair.is_array() || pair.size() != 2)
        throw DataError("lexicon pairs must be [word, counterfact]");
      lex.add(t, pair[0].get<std::string>(), pair[1].get<std::string>());
    }
  }
  return lex;
}

AttributeLexicon AttributeLexicon::load(const std::filesystem::path& path) {
  return from_json(read_json(path));
}

void AttributeLexicon::save(const std::filesystem::path& path) const {
  write_text(path, to_json().dump(1) + "\n");
}

// ---------------------------------------------------------------- split

SplitSpec split(const std::vector<BiasInstance>& instances, std::uint64_t seed) {
  SplitSpec spec;
  spec.seed = seed;
  std::map<BiasType, std::vector<BiasInstance>> pool;
  std::set<std::string> ids;
  for (const auto& inst : instances) {
    if (!ids.insert(inst.id).second) throw DataError("duplicate instance id: " + inst.id);
    if (inst.pool == "test")
      spec.test.push_back(inst);
    else
      pool[inst.bias_type].push_back(inst);
  }

  std::set<std::string> test_terms;
  for (const auto& inst : spec.test) {
    test_terms.insert(inst.stereotype);
    test_terms.insert(inst.anti_stereotype);
  }
  auto conflicts = [&](const BiasInstance& inst) {
    return test_terms.contains(inst.stereotype) || test_terms.contains(inst.anti_stereotype);
  };

  for (auto& [type, group] : pool) {
    if (group.size() < 2)
      throw DataError(std::string("split: need at least 2 instances of type ") +
                      to_string(type) + " for non-empty train/dev");
    Rng rng(Rng::mix(seed, static_cast<std::uint64_t>(type) + 1));
    rng.shuffle(group);
    const auto n = group.size();
    const auto n_dev = std::max<std::size_t>(
        1, static_cast<std::size_t>(std::llround(static_cast<double>(n) / 9.0)));
    std::vector<BiasInstance> train(group.begin(), group.end() - static_cast<std::ptrdiff_t>(n_dev));
    std::vector<BiasInstance> dev(group.end() - static_cast<std::ptrdiff_t>(n_dev), group.end());

    std::set<std::string> conflicting;
    auto repair = [&](std::vector<BiasInstance>& part) {
      std::vector<BiasInstance> kept;
      for (auto& inst : part) {
        if (conflicts(inst)) {
          if (test_terms.contains(inst.stereotype)) conflicting.insert(inst.stereotype);
          if (test_terms.contains(inst.anti_stereotype)) conflicting.insert(inst.anti_stereotype);
        } else {
          kept.push_back(std::move(inst));
        }
      }
      part = std::move(kept);
    };
    repair(train);
    repair(dev);
    if (train.empty() || dev.empty()) {
      std::string list;
      for (const auto& t : conflicting) list += (list.empty() ? "" : ", ") + t;
      throw DataError(std::string("split: attribute-term disjointness unsatisfiable for ") +
                      to_string(type) + "; conflicting terms: " + list);
    }
    if (!conflicting.empty())
      spdlog::info("split: dropped {} {} instances sharing terms with test",
                   n - train.size() - dev.size(), to_string(type));
    spec.train.insert(spec.train.end(), train.begin(), train.end());
    spec.dev.insert(spec.dev.end(), dev.begin(), dev.end());
  }
  return spec;
}

// ---------------------------------------------------------------- reversal

namespace {

std::string match_case(const std::string& replacement, std::string_view original) {
  std::string out = replacement;
  if (!original.empty() && std::isupper(static_cast<unsigned char>(original[0])) && !out.empty())
    out[0] = static_cast<char>(std::toupper(static_cast<unsigned char>(out[0])));
  return out;
}

// Replace whole-word, case-insensitive occurrences according to `mapping`.
std::string replace_words(const std::string& text,
                          const std::map<std::string, std::string>& mapping) {
  std::string out;
  std::size_t i = 0;
  while (i < text.size()) {
    if (std::isalnum(static_cast<unsigned char>(text[i]))) {
      std::size_t j = i;
      while (j < text.size() && (std::isalnum(static_cast<unsigned char>(text[j])) ||
                                 text[j] == '_' || text[j] == '-'))
        ++j;
      const std::string word = text.substr(i, j - i);
      auto it = mapping.find(to_lower(word));
      out += it == mapping.end() ? word : match_case(it->second, word);
      i = j;
    } else {
      out.push_back(text[i++]);
    }
  }
  return out;
}

}  // namespace

std::vector<BiasInstance> build_reversal_set(const std::vector<BiasInstance>& gender_instances,
                                             const AttributeLexicon& lexicon) {
  std::vector<BiasInstance> out;
  for (const auto& inst : gender_instances) {
    if (inst.bias_type != BiasType::kGender)
      throw ContractViolation("build_reversal_set: instance " + inst.id + " is not gender bias");
    if (inst.attribute_words.empty())
      throw DataError("build_reversal_set: instance " + inst.id + " has no gender attribute words");
    std::map<std::string, std::string> mapping;
    for (const auto& w : inst.attribute_words) {
      auto cf = lexicon.counterfactual(BiasType::kGender, w);
      if (!cf)
        throw DataError("build_reversal_set: attribute word '" + w + "' of instance " + inst.id +
                        " missing from lexicon");
      mapping[to_lower(w)] = *cf;
    }
    // The counterfactual side must map back so that a second pass restores the input.
    BiasInstance rev = inst;
    rev.context = replace_words(inst.context, mapping);
    for (auto& w : rev.attribute_words) w = match_case(mapping.at(to_lower(w)), w);
    std::swap(rev.stereotype, rev.anti_stereotype);
    constexpr std::string_view kSuffix = "-rev";
    if (rev.id.ends_with(kSuffix))
      rev.id.resize(rev.id.size() - kSuffix.size());
    else
      rev.id += kSuffix;
    rev.validate();
    out.push_back(std::move(rev));
  }
  return out;
}

// ---------------------------------------------------------------- synonyms

SynonymResult apply_synonyms(const std::vector<BiasInstance>& instances,
                             const std::map<std::string, std::string>& synonyms,
                             const Tokenizer& tokenizer) {
  SynonymResult res;
  auto in_vocab = [&](const std::string& s) {
    for (const auto& w : Tokenizer::split(s))
      if (!tokenizer.contains(w)) return false;
    return true;
  };
  for (const auto& inst : instances) {
    BiasInstance out = inst;
    bool ok = true;
    for (std::string* term : {&out.stereotype, &out.anti_stereotype}) {
      auto it = synonyms.find(*term);
      if (it == synonyms.end()) continue;
      if (!in_vocab(it->second)) {
        spdlog::warn("synonyms: '{}' (for '{}') is out of vocabulary; skipping instance {}",
                     it->second, *term, inst.id);
        ok = false;
        break;
      }
      *term = it->second;
    }
    if (ok && (out.stereotype == out.anti_stereotype ||
               (out.unrelated && (*out.unrelated == out.stereotype ||
                                  *out.unrelated == out.anti_stereotype)))) {
      spdlog::warn("synonyms: substitution collapses terms of instance {}; skipping", inst.id);
      ok = false;
    }
    if (!ok) {
      ++res.skipped;
      continue;
    }
    out.id += "-syn";
    res.instances.push_back(std::move(out));
  }
  return res;
}

std::map<std::string, std::string> load_synonyms(const std::filesystem::path& path) {
  const auto j = read_json(path);
  if (!j.is_object()) throw DataError("synonym file must be a JSON object term → synonym");
  std::map<std::string, std::string> out;
  for (const auto& [k, v] : j.items()) {
    if (!v.is_string()) throw DataError("synonym for '" + k + "' must be a string");
    out[k] = v.get<std::string>();
  }
  return out;
}

// ---------------------------------------------------------------- spans

AttributeSpans extract_attribute_spans(const BiasInstance& instance, const Tokenizer& tokenizer) {
  if (instance.attribute_words.empty())
    throw DataError("instance " + instance.id + " has no attribute words");
  const auto blank = instance.context.find(kBlankMarker);
  if (blank == std::string::npos) throw DataError("instance " + instance.id + " has no BLANK");
  const auto prefix = Tokenizer::split(std::string_view(instance.context).substr(0, blank));
  if (prefix.empty())
    throw DataError("instance " + instance.id + ": attribute term has no preceding token");
  const auto tokens = Tokenizer::split(instance.x_stereo());
  (void)tokenizer;

  AttributeSpans spans;
  spans.term = prefix.size();
  spans.before_term = prefix.size() - 1;
  const std::size_t term_len = Tokenizer::split(instance.stereotype).size();
  for (const auto& w : instance.attribute_words) {
    const auto wt = Tokenizer::split(w);
    bool found = false;
    for (std::size_t i = 0; i + wt.size() <= tokens.size(); ++i) {
      if (i >= spans.term && i < spans.term + term_len) continue;
      if (std::equal(wt.begin(), wt.end(), tokens.begin() + static_cast<std::ptrdiff_t>(i))) {
        for (std::size_t k = 0; k < wt.size(); ++k) spans.attribute_words.push_back(i + k);
        found = true;
      }
    }
    if (!found)
      throw DataError("instance " + instance.id + ": attribute word '" + w +
                      "' not found after tokenization");
  }
  std::sort(spans.attribute_words.begin(), spans.attribute_words.end());
  spans.attribute_words.erase(
      std::unique(spans.attribute_words.begin(), spans.attribute_words.end()),
      spans.attribute_words.end());
  return spans;
}

Tokenizer build_tokenizer(const std::vector<std::string>& corpus,
                          const std::vector<BiasInstance>& instances,
                          const std::map<std::string, std::string>& synonyms) {
  std::vector<std::string> texts = corpus;
  for (const auto& inst : instances) {
    texts.push_back(inst.x_stereo());
    texts.push_back(inst.x_anti());
    if (inst.unrelated) texts.push_back(inst.x_mless());
  }
  for (const auto& [k, v] : synonyms) {
    texts.push_back(k);
    texts.push_back(v);
  }
  return Tokenizer::build(texts);
}

std::vector<std::string> load_corpus_jsonl(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw DataError("cannot open corpus " + path.string());
  std::vector<std::string> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      out.push_back(nlohmann::json::parse(line).at("text").get<std::string>());
    } catch (const nlohmann::json::exception& e) {
      throw DataError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  if (out.empty()) throw DataError("corpus " + path.string() + " is empty");
  return out;
}

void save_corpus_jsonl(const std::filesystem::path& path, const std::vector<std::string>& corpus) {
  std::string text;
  for (const auto& s : corpus) text += nlohmann::json{{"text", s}}.dump() + "\n";
  write_text(path, text);
}

}  // namespace biasedit
