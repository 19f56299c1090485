#include "mmchat/sampling.hpp"

#include <algorithm>
#include <numeric>

#include "mmchat/autograd.hpp"
#include "mmchat/error.hpp"

namespace mmchat::generator {

Strategy strategy_from_string(const std::string& s) {
  if (s == "greedy") return Strategy::kGreedy;
  if (s == "nucleus") return Strategy::kNucleus;
  throw ValidationError("unknown decoding strategy '" + s + "' (greedy|nucleus)");
}

const char* to_string(Strategy s) { return s == Strategy::kGreedy ? "greedy" : "nucleus"; }

int argmax(std::span<const float> values) {
  if (values.empty()) throw ValidationError("argmax of an empty vector");
  return static_cast<int>(std::max_element(values.begin(), values.end()) - values.begin());
}

std::vector<int> nucleus_set(std::span<const float> probs, float top_p) {
  if (!(top_p > 0.0f && top_p <= 1.0f)) throw ValidationError("top_p must be in (0, 1]");
  std::vector<int> order(probs.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return probs[a] > probs[b]; });
  double mass = 0.0;
  std::size_t keep = 0;
  while (keep < order.size()) {
    mass += probs[order[keep++]];
    if (mass >= top_p) break;
  }
  order.resize(keep);
  return order;
}

int sample_nucleus(std::span<const float> logits, float top_p, std::mt19937_64& rng) {
  const nn::Tensor probs = nn::softmax(logits);
  const auto kept = nucleus_set(probs.values(), top_p);
  if (kept.size() == 1) return kept.front();
  double total = 0.0;
  for (int id : kept) total += probs[id];
  std::uniform_real_distribution<double> unif(0.0, total);
  const double u = unif(rng);
  double acc = 0.0;
  for (int id : kept) {
    acc += probs[id];
    if (u < acc) return id;
  }
  return kept.back();
}

}  // namespace mmchat::generator
