#pragma once

#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "mmchat/autograd.hpp"

namespace mmchat::nn {

struct NamedParameter {
  std::string name;
  Var var;
  bool decay = true;      // AdamW weight decay applies
  bool trainable = true;  // frozen parameters are skipped by the optimizer and gradient checks
};

// Ordered, name-addressable view over a model's parameters.
class ParameterSet {
 public:
  void add(std::string name, Var var, bool decay = true);
  const std::vector<NamedParameter>& items() const noexcept { return items_; }
  std::vector<NamedParameter>& items() noexcept { return items_; }
  const NamedParameter* find(const std::string& name) const;
  NamedParameter* find(const std::string& name);
  void zero_grad();
  std::size_t scalar_count() const;

 private:
  std::vector<NamedParameter> items_;
};

// Truncated normal (cut at two standard deviations) for weights.
class Initializer {
 public:
  explicit Initializer(std::uint64_t seed, float stddev = 0.02f) : rng_(seed), stddev_(stddev) {}
  Tensor truncated_normal(int rows, int cols);
  Tensor constant(int rows, int cols, float v) { return Tensor({rows, cols}, v); }

 private:
  std::mt19937_64 rng_;
  float stddev_;
};

class Linear {
 public:
  Linear() = default;
  Linear(int in, int out, Initializer& init, bool bias = true);
  Var operator()(const Var& x) const;
  void register_parameters(ParameterSet& set, const std::string& prefix) const;
  int in_features() const { return weight_.rows(); }
  int out_features() const { return weight_.cols(); }

 private:
  Var weight_;  // [in, out]
  Var bias_;    // [1, out] or empty
};

class LayerNorm {
 public:
  LayerNorm() = default;
  explicit LayerNorm(int dim);
  Var operator()(const Var& x) const;
  void register_parameters(ParameterSet& set, const std::string& prefix) const;

 private:
  Var gain_;
  Var bias_;
};

// Scaled dot-product attention split over `heads` column groups. q is [Tq,d],
// k and v are [Tk,d]; mask (if any) is [Tq,Tk].
Var attention(const Var& q, const Var& k, const Var& v, const AttentionMask* mask, int heads);

class MultiHeadAttention {
 public:
  MultiHeadAttention() = default;
  MultiHeadAttention(int d_model, int heads, Initializer& init);
  // Self-attention when memory is the query source; cross-attention otherwise.
  Var operator()(const Var& x, const Var& memory, const AttentionMask* mask) const;
  void register_parameters(ParameterSet& set, const std::string& prefix) const;

 private:
  int heads_ = 1;
  Linear query_, key_, value_, out_;
};

class FeedForward {
 public:
  FeedForward() = default;
  FeedForward(int d_model, int hidden, Initializer& init);
  Var operator()(const Var& x) const;
  void register_parameters(ParameterSet& set, const std::string& prefix) const;

 private:
  Linear up_, down_;
};

struct BlockConfig {
  int d_model = 64;
  int heads = 4;
  int ff_mult = 4;
  bool cross_attention = false;
};

// Pre-norm transformer block: self-attention, optional cross-attention over a
// memory sequence, feedforward; each wrapped in a residual connection.
class TransformerBlock {
 public:
  TransformerBlock() = default;
  TransformerBlock(const BlockConfig& config, Initializer& init);
  Var operator()(const Var& x, const AttentionMask* self_mask, const Var* memory = nullptr,
                 const AttentionMask* memory_mask = nullptr) const;
  void register_parameters(ParameterSet& set, const std::string& prefix) const;
  bool has_cross_attention() const { return config_.cross_attention; }

 private:
  BlockConfig config_;
  LayerNorm ln_self_, ln_cross_, ln_ff_;
  MultiHeadAttention self_attn_, cross_attn_;
  FeedForward ff_;
};

}  // namespace mmchat::nn
