#pragma once

#include <cstddef>
#include <map>
#include <nlohmann/json.hpp>
#include <string>
#include <string_view>
#include <vector>

namespace biasedit {

using TokenId = std::size_t;

/// Word-level tokenizer. Text is lower-cased and split on whitespace; every
/// punctuation character is its own token. Ids 0..2 are reserved specials.
class Tokenizer {
 public:
  static constexpr TokenId kBos = 0;
  static constexpr TokenId kUnk = 1;
  static constexpr TokenId kBlank = 2;
  static constexpr std::string_view kBosText = "<bos>";
  static constexpr std::string_view kUnkText = "<unk>";
  static constexpr std::string_view kBlankText = "<blank>";

  Tokenizer();
  /// Vocabulary = specials followed by the sorted set of words seen in `texts`.
  static Tokenizer build(const std::vector<std::string>& texts);

  static std::vector<std::string> split(std::string_view text);

  std::vector<TokenId> encode(std::string_view text) const;
  std::string decode(const std::vector<TokenId>& ids) const;

  bool contains(std::string_view word) const;
  TokenId id(std::string_view word) const;  // kUnk when absent
  const std::string& word(TokenId id) const;
  std::size_t size() const noexcept { return words_.size(); }

  nlohmann::json to_json() const;
  static Tokenizer from_json(const nlohmann::json& j);

 private:
  void add(const std::string& w);
  std::vector<std::string> words_;
  std::map<std::string, TokenId, std::less<>> index_;
};

std::string to_lower(std::string_view s);

}  // namespace biasedit
