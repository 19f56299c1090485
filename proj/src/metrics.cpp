#include "mmchat/metrics.hpp"

#include <cmath>
#include <map>
#include <sstream>

namespace mmchat::metrics {
namespace {

using Gram = std::vector<std::string>;

std::map<Gram, int> ngram_counts(std::span<const std::string> toks, int n) {
  std::map<Gram, int> counts;
  for (std::size_t i = 0; i + n <= toks.size(); ++i) ++counts[Gram(toks.begin() + i, toks.begin() + i + n)];
  return counts;
}

std::string fmt(double v) {
  std::ostringstream os;
  os.precision(6);
  os << std::fixed << v;
  return os.str();
}

}  // namespace

int recall_at_k(int rank, int k) {
  if (k < 1) throw ValidationError("recall@K needs K >= 1");
  if (rank < 1) throw ValidationError("gold rank must be >= 1");
  return rank <= k ? 1 : 0;
}

double reciprocal_rank(int rank) {
  if (rank < 1) throw ValidationError("gold rank must be >= 1");
  return 1.0 / rank;
}

double perplexity(std::span<const double> token_nll) {
  if (token_nll.empty()) throw ValidationError("perplexity of an empty token set");
  double sum = 0.0;
  for (double v : token_nll) sum += v;
  return std::exp(sum / static_cast<double>(token_nll.size()));
}

double bleu(std::span<const std::string> candidate, std::span<const std::string> reference, int n, Diagnostics* diag) {
  if (n < 1) throw ValidationError("BLEU order must be >= 1");
  if (candidate.empty()) {
    if (diag) diag->warn("bleu", "empty candidate scores 0");
    return 0.0;
  }
  double log_sum = 0.0;
  for (int k = 1; k <= n; ++k) {
    const auto cand = ngram_counts(candidate, k);
    const auto ref = ngram_counts(reference, k);
    long matched = 0, total = 0;
    for (const auto& [gram, c] : cand) {
      total += c;
      auto it = ref.find(gram);
      if (it != ref.end()) matched += std::min(c, it->second);
    }
    if (matched == 0 || total == 0) return 0.0;
    log_sum += std::log(static_cast<double>(matched) / static_cast<double>(total));
  }
  const double c = static_cast<double>(candidate.size());
  const double r = static_cast<double>(reference.size());
  const double bp = std::min(1.0, std::exp(1.0 - r / c));
  return bp * std::exp(log_sum / n);
}

double distinct(std::span<const std::string> candidate, int n, Diagnostics* diag) {
  if (n < 1) throw ValidationError("distinct order must be >= 1");
  if (static_cast<int>(candidate.size()) < n) {
    if (diag) diag->warn("distinct", "response shorter than n scores 0");
    return 0.0;
  }
  const auto counts = ngram_counts(candidate, n);
  const double total = static_cast<double>(candidate.size() - n + 1);
  return static_cast<double>(counts.size()) / total;
}

RetrievalReport retrieval_report(std::span<const int> gold_ranks, int candidates) {
  RetrievalReport r;
  r.candidates = candidates;
  r.samples = static_cast<int>(gold_ranks.size());
  if (gold_ranks.empty()) return r;
  for (int rank : gold_ranks) {
    r.recall1 += recall_at_k(rank, 1);
    r.recall5 += recall_at_k(rank, 5);
    r.recall10 += recall_at_k(rank, 10);
    r.mrr += reciprocal_rank(rank);
  }
  const double n = static_cast<double>(gold_ranks.size());
  r.recall1 /= n;
  r.recall5 /= n;
  r.recall10 /= n;
  r.mrr /= n;
  return r;
}

GenerationReport generation_report(std::span<const GenerationCase> cases, std::span<const double> token_nll,
                                   Diagnostics* diag) {
  GenerationReport r;
  r.samples = static_cast<int>(cases.size());
  r.scored_tokens = static_cast<long>(token_nll.size());
  if (!token_nll.empty()) r.ppl = perplexity(token_nll);
  if (cases.empty()) return r;
  for (const auto& c : cases) {
    r.bleu1 += bleu(c.candidate, c.reference, 1, diag);
    r.bleu2 += bleu(c.candidate, c.reference, 2, diag);
    r.distinct1 += distinct(c.candidate, 1, diag);
    r.distinct2 += distinct(c.candidate, 2, diag);
  }
  const double n = static_cast<double>(cases.size());
  r.bleu1 /= n;
  r.bleu2 /= n;
  r.distinct1 /= n;
  r.distinct2 /= n;
  return r;
}

nlohmann::json to_json(const RetrievalReport& r) {
  return {{"recall@1", r.recall1}, {"recall@5", r.recall5}, {"recall@10", r.recall10},
          {"mrr", r.mrr},          {"candidates", r.candidates}, {"samples", r.samples}};
}

nlohmann::json to_json(const GenerationReport& r) {
  return {{"ppl", r.ppl},           {"bleu1", r.bleu1},     {"bleu2", r.bleu2},
          {"distinct1", r.distinct1}, {"distinct2", r.distinct2}, {"samples", r.samples},
          {"scored_tokens", r.scored_tokens}};
}

std::string csv_header(const RetrievalReport&) { return "recall@1,recall@5,recall@10,mrr,candidates,samples"; }

std::string csv_row(const RetrievalReport& r) {
  return fmt(r.recall1) + "," + fmt(r.recall5) + "," + fmt(r.recall10) + "," + fmt(r.mrr) + "," +
         std::to_string(r.candidates) + "," + std::to_string(r.samples);
}

std::string csv_header(const GenerationReport&) { return "ppl,bleu1,bleu2,distinct1,distinct2,samples"; }

std::string csv_row(const GenerationReport& r) {
  return fmt(r.ppl) + "," + fmt(r.bleu1) + "," + fmt(r.bleu2) + "," + fmt(r.distinct1) + "," + fmt(r.distinct2) + "," +
         std::to_string(r.samples);
}

}  // namespace mmchat::metrics
