#pragma once

// Brute-force reference implementations, written independently of the library
// (no maps, no shared helpers) so they can cross-check it.

#include <algorithm>
#include <cmath>
#include <random>
#include <string>
#include <vector>

namespace mmchat::oracle {

using Words = std::vector<std::string>;

inline std::vector<Words> grams(const Words& w, int n) {
  std::vector<Words> out;
  for (int i = 0; i + n <= static_cast<int>(w.size()); ++i) out.emplace_back(w.begin() + i, w.begin() + i + n);
  return out;
}

inline int count_of(const std::vector<Words>& all, const Words& g) {
  return static_cast<int>(std::count(all.begin(), all.end(), g));
}

inline double bleu(const Words& cand, const Words& ref, int n) {
  if (cand.empty()) return 0.0;
  double log_p = 0.0;
  for (int k = 1; k <= n; ++k) {
    const auto cg = grams(cand, k);
    const auto rg = grams(ref, k);
    if (cg.empty()) return 0.0;
    // Clip each occurrence position by position: the j-th copy of a gram
    // matches only if the reference holds at least j copies.
    int matched = 0;
    for (std::size_t i = 0; i < cg.size(); ++i) {
      int seen_before = 0;
      for (std::size_t j = 0; j < i; ++j) seen_before += cg[j] == cg[i];
      if (seen_before < count_of(rg, cg[i])) ++matched;
    }
    if (matched == 0) return 0.0;
    log_p += std::log(static_cast<double>(matched) / static_cast<double>(cg.size()));
  }
  const double c = static_cast<double>(cand.size());
  const double r = static_cast<double>(ref.size());
  const double bp = c > r ? 1.0 : std::exp(1.0 - r / c);
  return bp * std::exp(log_p / n);
}

inline double distinct(const Words& cand, int n) {
  const auto g = grams(cand, n);
  if (g.empty()) return 0.0;
  int unique = 0;
  for (std::size_t i = 0; i < g.size(); ++i) {
    bool first = true;
    for (std::size_t j = 0; j < i && first; ++j) first = g[j] != g[i];
    unique += first;
  }
  return static_cast<double>(unique) / static_cast<double>(g.size());
}

// Gold rank from raw scores: 1 + number of candidates that sort ahead of gold
// (strictly higher score, or equal score at a lower row).
inline int rank_of(const std::vector<float>& scores, int gold) {
  int r = 1;
  for (int i = 0; i < static_cast<int>(scores.size()); ++i) {
    if (scores[i] > scores[gold] || (scores[i] == scores[gold] && i < gold)) ++r;
  }
  return r;
}

inline double mean(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

inline double perplexity(const std::vector<double>& nll) { return std::exp(mean(nll)); }

// Random word sequence over a small alphabet so n-grams collide often.
inline Words random_words(std::mt19937_64& rng, int max_len, int alphabet = 5) {
  std::uniform_int_distribution<int> len(0, max_len), sym(0, alphabet - 1);
  Words w(len(rng));
  for (auto& s : w) s = std::string(1, static_cast<char>('a' + sym(rng)));
  return w;
}

}  // namespace mmchat::oracle
