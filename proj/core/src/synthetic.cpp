#include "biasedit/synthetic.hpp"

#include <array>
#include <cctype>
#include <cmath>
#include <set>

#include "biasedit/error.hpp"
#include "biasedit/rng.hpp"

namespace biasedit {

namespace {

struct GroupPair {
  const char* a;
  const char* b;
};

// Side A words first; lexicon pairs are (a, b).
const std::map<BiasType, std::vector<GroupPair>> kGroups{
    {BiasType::kGender,
     {{"girls", "boys"}, {"women", "men"}, {"mothers", "fathers"}, {"sisters", "brothers"}}},
    {BiasType::kRace,
     {{"northerners", "southerners"},
      {"highlanders", "lowlanders"},
      {"islanders", "mainlanders"},
      {"easterners", "westerners"}}},
    {BiasType::kReligion,
     {{"aurites", "velites"}, {"aurians", "velians"}, {"aurists", "velists"}, {"aurans", "velans"}}},
};

constexpr std::array<const char*, 48> kTraits{
    "soft",   "determined", "quiet",  "loud",   "calm",   "eager",  "neat",   "messy",
    "brisk",  "gentle",     "bold",   "shy",    "proud",  "humble", "lazy",   "busy",
    "witty",  "dull",       "sharp",  "mild",   "fierce", "meek",   "clever", "naive",
    "tidy",   "wild",       "stern",  "jolly",  "frank",  "sly",    "keen",   "timid",
    "brave",  "lucky",      "plain",  "fancy",  "rough",  "smooth", "vivid",  "pale",
    "sturdy", "frail",      "swift",  "slow",   "warm",   "cold",   "bright", "dim"};

constexpr std::array<const char*, 16> kNouns{
    "fish",   "table",  "spoon",  "carrot", "window", "bottle", "pencil", "blanket",
    "ladder", "teapot", "rocket", "basket", "candle", "mirror", "hammer", "pillow"};

// {g}: group word, {h}: its counterpart, {t}: the slot.
constexpr std::array<const char*, 8> kCores{
    "{g} tend to be more {t} than {h} .", "{g} are very {t} .",
    "most {g} seem {t} .",                "the {g} were quite {t} today .",
    "all {g} are so {t} .",               "{g} often act {t} around {h} .",
    "many {g} look {t} .",                "those {g} became {t} ."};

constexpr std::array<const char*, 6> kPrefixes{"", "i think", "people say", "everyone knows",
                                               "it seems", "they claim"};

constexpr std::array<const char*, 4> kFillers{"{g} want more {n} .", "the {n} is near the {m} .",
                                              "i saw a {n} today .", "{g} saw a {n} ."};

constexpr std::size_t kTraitsPerSide = 8;
constexpr std::size_t kTestTraitsPerSide = 2;

std::string fill(std::string s, const std::string& key, const std::string& value) {
  for (auto pos = s.find(key); pos != std::string::npos; pos = s.find(key, pos + value.size()))
    s.replace(pos, key.size(), value);
  return s;
}

std::string with_prefix(std::size_t prefix, const std::string& core) {
  const std::string p = kPrefixes[prefix];
  return p.empty() ? core : p + " " + core;
}

// "girls are very BLANK ." → "Girls are very BLANK."
std::string as_context(std::string s) {
  s = fill(std::move(s), " .", ".");
  if (!s.empty()) s[0] = static_cast<char>(std::toupper(static_cast<unsigned char>(s[0])));
  return s;
}

template <typename T>
const T& pick(Rng& rng, const std::vector<T>& v) {
  return v[rng.below(v.size())];
}

struct TypeTraits {
  std::array<std::vector<std::string>, 2> all;   // per side
  std::array<std::vector<std::string>, 2> edit;
  std::array<std::vector<std::string>, 2> test;
};

}  // namespace

void SyntheticOptions::validate() const {
  if (!(skew >= 0.5 && skew <= 1.0)) throw ConfigError("skew must lie in [0.5, 1]");
  if (n_templates == 0 || n_templates > kCores.size() * kPrefixes.size() / 2)
    throw ConfigError("n_templates must be in [1, " +
                      std::to_string(kCores.size() * kPrefixes.size() / 2) + "]");
  if (corpus_sentences == 0) throw ConfigError("corpus_sentences must be positive");
  if (edit_per_slot == 0 || test_per_slot == 0)
    throw ConfigError("instances per template slot must be positive");
  if (!(noun_slot_rate >= 0.0 && noun_slot_rate < 1.0))
    throw ConfigError("noun_slot_rate must lie in [0, 1)");
}

nlohmann::json SyntheticData::metadata() const {
  return {{"seed", options.seed},
          {"n_templates", options.n_templates},
          {"skew", options.skew},
          {"corpus_sentences", options.corpus_sentences},
          {"edit_per_slot", options.edit_per_slot},
          {"test_per_slot", options.test_per_slot},
          {"noun_slot_rate", options.noun_slot_rate},
          {"no_signal", no_signal},
          {"n_instances", instances.size()}};
}

SyntheticData gen_synthetic(const SyntheticOptions& options) {
  options.validate();
  SyntheticData data;
  data.options = options;
  data.no_signal = options.skew == 0.5;
  Rng rng(Rng::mix(options.seed, 0x5e7a));

  // Trait assignment: a seeded shuffle deals 8 traits to each side of each type.
  std::vector<std::string> traits(kTraits.begin(), kTraits.end());
  rng.shuffle(traits);
  std::map<BiasType, TypeTraits> tt;
  std::size_t next = 0;
  for (BiasType t : kAllBiasTypes)
    for (std::size_t side = 0; side < 2; ++side)
      for (std::size_t i = 0; i < kTraitsPerSide; ++i) {
        const std::string& w = traits[next++];
        tt[t].all[side].push_back(w);
        (i < kTraitsPerSide - kTestTraitsPerSide ? tt[t].edit : tt[t].test)[side].push_back(w);
      }
  for (BiasType t : kAllBiasTypes)
    for (std::size_t side = 0; side < 2; ++side) {
      const auto& ts = tt[t].test[side];
      for (std::size_t i = 0; i < ts.size(); ++i) data.synonyms[ts[i]] = ts[(i + 1) % ts.size()];
    }

  for (BiasType t : kAllBiasTypes)
    for (const auto& g : kGroups.at(t)) data.lexicon.add(t, g.a, g.b);

  // Held-out (prefix, core) combinations for instances; the rest feed the corpus.
  std::vector<std::pair<std::size_t, std::size_t>> combos;
  for (std::size_t c = 0; c < kCores.size(); ++c)
    for (std::size_t p = 0; p < kPrefixes.size(); ++p) combos.emplace_back(p, c);
  rng.shuffle(combos);
  const std::vector<std::pair<std::size_t, std::size_t>> held(
      combos.begin(), combos.begin() + static_cast<std::ptrdiff_t>(options.n_templates));
  const std::vector<std::pair<std::size_t, std::size_t>> seen(
      combos.begin() + static_cast<std::ptrdiff_t>(options.n_templates), combos.end());

  const std::vector<std::string> nouns(kNouns.begin(), kNouns.end());

  // Corpus.
  const std::size_t n_filler = options.corpus_sentences / 4;
  for (std::size_t i = 0; i < options.corpus_sentences; ++i) {
    const BiasType type = kAllBiasTypes[rng.below(3)];
    const auto& pairs = kGroups.at(type);
    const std::size_t side = rng.below(2);
    const GroupPair& gp = pairs[rng.below(pairs.size())];
    const std::string g = side == 0 ? gp.a : gp.b;
    const std::string h = side == 0 ? gp.b : gp.a;
    if (i < n_filler) {
      std::string s = kFillers[rng.below(kFillers.size())];
      s = fill(fill(fill(s, "{g}", g), "{n}", pick(rng, nouns)), "{m}", pick(rng, nouns));
      data.corpus.push_back(std::move(s));
      continue;
    }
    const auto [p, c] = seen[rng.below(seen.size())];
    std::string slot;
    if (rng.bernoulli(options.noun_slot_rate)) {
      slot = pick(rng, nouns);
    } else {
      const std::size_t trait_side = rng.bernoulli(options.skew) ? side : 1 - side;
      slot = pick(rng, tt[type].all[trait_side]);
    }
    data.corpus.push_back(fill(fill(fill(with_prefix(p, kCores[c]), "{g}", g), "{h}", h), "{t}", slot));
  }
  // Interleave filler and trait sentences deterministically.
  rng.shuffle(data.corpus);

  // Instances.
  for (BiasType type : kAllBiasTypes) {
    std::size_t counter = 0;
    for (const auto& [p, c] : held)
      for (const auto& gp : kGroups.at(type))
        for (std::size_t side = 0; side < 2; ++side) {
          const std::string g = side == 0 ? gp.a : gp.b;
          const std::string h = side == 0 ? gp.b : gp.a;
          const std::string core = kCores[c];
          const std::string ctx =
              as_context(fill(fill(fill(with_prefix(p, core), "{g}", g), "{h}", h), "{t}", "BLANK"));
          std::vector<std::string> words{g};
          if (core.find("{h}") != std::string::npos) words.push_back(h);
          const std::size_t total = options.edit_per_slot + options.test_per_slot;
          for (std::size_t k = 0; k < total; ++k) {
            const bool test = k >= options.edit_per_slot;
            const auto& pool = test ? tt[type].test : tt[type].edit;
            BiasInstance inst;
            inst.id = std::string(to_string(type)) + "-" + std::to_string(counter++);
            inst.bias_type = type;
            inst.context = ctx;
            inst.stereotype = pick(rng, pool[side]);
            inst.anti_stereotype = pick(rng, pool[1 - side]);
            inst.unrelated = pick(rng, nouns);
            inst.attribute_words = words;
            inst.pool = test ? "test" : "";
            inst.validate();
            data.instances.push_back(std::move(inst));
          }
        }
  }
  return data;
}

SyntheticData gen_synthetic(std::uint64_t seed, std::size_t n_templates, double skew) {
  SyntheticOptions o;
  o.seed = seed;
  o.n_templates = n_templates;
  o.skew = skew;
  return gen_synthetic(o);
}

}  // namespace biasedit
