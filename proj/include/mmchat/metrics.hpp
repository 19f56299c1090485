#pragma once

#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mmchat/error.hpp"

namespace mmchat::metrics {

// 1 when the gold rank r (1-based) is within the top K. Throws for K < 1 or r < 1.
int recall_at_k(int rank, int k);
double reciprocal_rank(int rank);

// exp of the token-weighted mean NLL. Throws ValidationError on an empty set.
double perplexity(std::span<const double> token_nll);

// Sentence-level cumulative BLEU-n (uniform weights) with brevity penalty
// min(1, exp(1 - r/c)); 0 when any clipped precision is 0. An empty
// candidate scores 0 (warning through `diag`).
double bleu(std::span<const std::string> candidate, std::span<const std::string> reference, int n,
            Diagnostics* diag = nullptr);

// Unique n-grams over total n-grams of one response; 0 (with a warning) when
// the response is shorter than n.
double distinct(std::span<const std::string> candidate, int n, Diagnostics* diag = nullptr);

struct RetrievalReport {
  double recall1 = 0, recall5 = 0, recall10 = 0;
  double mrr = 0;
  int candidates = 0;
  int samples = 0;
};

// Aggregates 1-based gold ranks.
RetrievalReport retrieval_report(std::span<const int> gold_ranks, int candidates);

struct GenerationReport {
  double ppl = 0;
  double bleu1 = 0, bleu2 = 0;
  double distinct1 = 0, distinct2 = 0;
  int samples = 0;
  long scored_tokens = 0;
};

struct GenerationCase {
  std::vector<std::string> candidate;
  std::vector<std::string> reference;
};

// BLEU and Distinct are averaged per response; PPL pools all token NLLs.
GenerationReport generation_report(std::span<const GenerationCase> cases, std::span<const double> token_nll,
                                   Diagnostics* diag = nullptr);

nlohmann::json to_json(const RetrievalReport& r);
nlohmann::json to_json(const GenerationReport& r);
std::string csv_header(const RetrievalReport&);
std::string csv_row(const RetrievalReport& r);
std::string csv_header(const GenerationReport&);
std::string csv_row(const GenerationReport& r);

}  // namespace mmchat::metrics
