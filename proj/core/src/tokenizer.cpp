#include "biasedit/tokenizer.hpp"

#include <cctype>
#include <set>

#include "biasedit/error.hpp"

namespace biasedit {

std::string to_lower(std::string_view s) {
  std::string out(s);
  for (char& c : out) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return out;
}

Tokenizer::Tokenizer() {
  add(std::string(kBosText));
  add(std::string(kUnkText));
  add(std::string(kBlankText));
}

void Tokenizer::add(const std::string& w) {
  if (index_.contains(w)) return;
  index_.emplace(w, words_.size());
  words_.push_back(w);
}

std::vector<std::string> Tokenizer::split(std::string_view text) {
  std::vector<std::string> out;
  std::string cur;
  auto flush = [&] {
    if (!cur.empty()) out.push_back(to_lower(cur));
    cur.clear();
  };
  for (char c : text) {
    const auto uc = static_cast<unsigned char>(c);
    if (std::isspace(uc)) {
      flush();
    } else if (std::ispunct(uc) && c != '<' && c != '>' && c != '_' && c != '-') {
      flush();
      out.emplace_back(1, c);
    } else {
      cur.push_back(c);
    }
  }
  flush();
  return out;
}

Tokenizer Tokenizer::build(const std::vector<std::string>& texts) {
  std::set<std::string> words;
  for (const auto& t : texts)
    for (auto& w : split(t)) words.insert(std::move(w));
  Tokenizer tok;
  for (const auto& w : words) tok.add(w);
  return tok;
}

std::vector<TokenId> Tokenizer::encode(std::string_view text) const {
  std::vector<TokenId> ids;
  for (const auto& w : split(text)) ids.push_back(id(w));
  return ids;
}

std::string Tokenizer::decode(const std::vector<TokenId>& ids) const {
  std::string out;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (i) out.push_back(' ');
    out += word(ids[i]);
  }
  return out;
}

bool Tokenizer::contains(std::string_view w) const { return index_.find(w) != index_.end(); }

TokenId Tokenizer::id(std::string_view w) const {
  auto it = index_.find(w);
  if (it == index_.end()) {
    const std::string lower = to_lower(w);
    auto jt = index_.find(lower);
    return jt == index_.end() ? kUnk : jt->second;
  }
  return it->second;
}

const std::string& Tokenizer::word(TokenId id) const {
  if (id >= words_.size()) throw ContractViolation("token id out of range");
  return words_[id];
}

nlohmann::json Tokenizer::to_json() const { return nlohmann::json{{"vocab", words_}}; }

Tokenizer Tokenizer::from_json(const nlohmann::json& j) {
  const auto words = j.at("vocab").get<std::vector<std::string>>();
  if (words.size() < 3 || words[0] != kBosText || words[1] != kUnkText || words[2] != kBlankText)
    throw DataError("vocabulary does not start with the reserved specials");
  Tokenizer tok;
  for (std::size_t i = 3; i < words.size(); ++i) tok.add(words[i]);
  if (tok.size() != words.size()) throw DataError("vocabulary contains duplicate words");
  return tok;
}

}  // namespace biasedit
