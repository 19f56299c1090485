#include "mmchat/vocab.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <map>

#include "mmchat/error.hpp"

namespace mmchat::corpus {
namespace {

bool is_word_byte(unsigned char c) { return std::isalnum(c) || c >= 0x80; }

}  // namespace

const std::vector<std::string>& special_tokens() {
  static const std::vector<std::string> specials = {"<pad>", "<unk>", "<bos>", "<eos>",
                                                    "<user>", "<bot>", "<cls>", "<sep>"};
  return specials;
}

std::vector<std::string> tokenize(std::string_view text) {
  std::vector<std::string> out;
  std::string word;
  const auto flush = [&] {
    if (!word.empty()) out.push_back(std::move(word));
    word.clear();
  };
  for (std::size_t i = 0; i < text.size(); ++i) {
    const auto c = static_cast<unsigned char>(text[i]);
    if (is_word_byte(c)) {
      word.push_back(static_cast<char>(std::tolower(c)));
    } else if (c == '\'' && !word.empty() && i + 1 < text.size() &&
               is_word_byte(static_cast<unsigned char>(text[i + 1]))) {
      word.push_back('\'');
    } else {
      flush();
      if (!std::isspace(c)) out.emplace_back(1, static_cast<char>(c));
    }
  }
  flush();
  return out;
}

Vocabulary::Vocabulary() : Vocabulary(special_tokens()) {}

Vocabulary::Vocabulary(std::vector<std::string> tokens) : tokens_(std::move(tokens)) {
  for (int i = 0; i < size(); ++i) {
    if (!index_.emplace(tokens_[i], i).second) throw ValidationError("duplicate vocabulary token '" + tokens_[i] + "'");
  }
}

Vocabulary Vocabulary::build(std::span<const std::string> texts, int min_freq, int max_size) {
  if (max_size < kNumSpecials) throw ValidationError("max_size must cover the special tokens");
  std::map<std::string, long> counts;
  for (const auto& text : texts) {
    for (auto& tok : tokenize(text)) ++counts[tok];
  }
  std::vector<std::pair<std::string, long>> ranked;
  for (auto& [tok, n] : counts) {
    if (n >= min_freq && std::find(special_tokens().begin(), special_tokens().end(), tok) == special_tokens().end()) {
      ranked.emplace_back(tok, n);
    }
  }
  std::stable_sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) { return a.second > b.second; });

  std::vector<std::string> tokens = special_tokens();
  for (auto& [tok, _] : ranked) {
    if (static_cast<int>(tokens.size()) >= max_size) break;
    tokens.push_back(tok);
  }
  return Vocabulary(std::move(tokens));
}

int Vocabulary::id(std::string_view token) const {
  auto it = index_.find(std::string(token));
  return it == index_.end() ? kUnk : it->second;
}

const std::string& Vocabulary::token(int id) const {
  if (id < 0 || id >= size()) throw ValidationError("token id " + std::to_string(id) + " out of range");
  return tokens_[id];
}

bool Vocabulary::contains(std::string_view token) const { return index_.count(std::string(token)) != 0; }

std::vector<int> Vocabulary::encode(std::string_view text) const {
  std::vector<int> ids;
  for (const auto& tok : tokenize(text)) ids.push_back(id(tok));
  return ids;
}

std::string Vocabulary::decode(std::span<const int> ids, bool keep_specials) const {
  std::string out;
  for (int id : ids) {
    if (!keep_specials && id >= 0 && id < kNumSpecials) continue;
    if (!out.empty()) out.push_back(' ');
    out += token(id);
  }
  return out;
}

nlohmann::json Vocabulary::to_json() const { return {{"tokens", tokens_}}; }

Vocabulary Vocabulary::from_json(const nlohmann::json& j) {
  auto tokens = j.at("tokens").get<std::vector<std::string>>();
  const auto& specials = special_tokens();
  if (tokens.size() < specials.size() || !std::equal(specials.begin(), specials.end(), tokens.begin())) {
    throw ParseError("vocabulary does not start with the reserved special tokens");
  }
  return Vocabulary(std::move(tokens));
}

void Vocabulary::save(const std::filesystem::path& path) const {
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path.string());
  out << to_json().dump(1) << '\n';
}

Vocabulary Vocabulary::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw NotFoundError("cannot open vocabulary " + path.string());
  try {
    return from_json(nlohmann::json::parse(in));
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(path.string() + ": " + e.what());
  }
}

}  // namespace mmchat::corpus
