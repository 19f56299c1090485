#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <vector>

namespace mmchat::generator {

enum class Strategy { kGreedy, kNucleus };

struct SamplingConfig {
  Strategy strategy = Strategy::kNucleus;
  float top_p = 0.1f;
  std::uint64_t seed = 0;
  int max_new_tokens = 40;
};

Strategy strategy_from_string(const std::string& s);
const char* to_string(Strategy s);

// Index of the largest value; the lowest index wins ties.
int argmax(std::span<const float> values);

// Token ids of the smallest probability-sorted prefix whose mass reaches
// top_p, most probable first (ties by id). Throws ValidationError unless
// 0 < top_p <= 1.
std::vector<int> nucleus_set(std::span<const float> probs, float top_p);

// Samples from the renormalized nucleus of softmax(logits).
int sample_nucleus(std::span<const float> logits, float top_p, std::mt19937_64& rng);

}  // namespace mmchat::generator
