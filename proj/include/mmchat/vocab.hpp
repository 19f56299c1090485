#pragma once

#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include <nlohmann/json.hpp>

namespace mmchat::corpus {

// Reserved ids. The first six are the dialogue specials; <cls> and <sep> are
// the retriever's pooling and separator tokens.
enum SpecialId : int {
  kPad = 0,
  kUnk = 1,
  kBos = 2,
  kEos = 3,
  kUser = 4,
  kBot = 5,
  kCls = 6,
  kSep = 7,
};
inline constexpr int kNumSpecials = 8;

// Lowercases, then splits into maximal alphanumeric runs (apostrophes between
// letters stay inside, so "she's" is one token); any other non-space
// character is a token of its own. Bytes >= 0x80 count as word characters.
std::vector<std::string> tokenize(std::string_view text);

class Vocabulary {
 public:
  Vocabulary();  // specials only

  // Keeps tokens with count >= min_freq, most frequent first, ties
  // lexicographic, until the total size (specials included) reaches max_size.
  static Vocabulary build(std::span<const std::string> texts, int min_freq = 2, int max_size = 8192);

  int size() const { return static_cast<int>(tokens_.size()); }
  int id(std::string_view token) const;  // kUnk when absent
  const std::string& token(int id) const;
  bool contains(std::string_view token) const;

  std::vector<int> encode(std::string_view text) const;
  // Joins tokens with single spaces; specials are dropped unless keep_specials.
  std::string decode(std::span<const int> ids, bool keep_specials = false) const;

  const std::vector<std::string>& tokens() const { return tokens_; }
  nlohmann::json to_json() const;
  static Vocabulary from_json(const nlohmann::json& j);
  void save(const std::filesystem::path& path) const;
  static Vocabulary load(const std::filesystem::path& path);

 private:
  explicit Vocabulary(std::vector<std::string> tokens);
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, int> index_;
};

const std::vector<std::string>& special_tokens();

}  // namespace mmchat::corpus
