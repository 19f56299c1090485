#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <vector>

#include "mmchat/tensor.hpp"

namespace mmchat::nn {

// One value in the computation trace. Leaves with requires_grad are parameters;
// interior nodes keep their inputs alive until the trace is dropped.
struct Node {
  Tensor value;
  Tensor grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(Node&)> backward;
  const char* op = "leaf";
};

class Var {
 public:
  Var() = default;
  explicit Var(std::shared_ptr<Node> node) : node_(std::move(node)) {}

  const Tensor& value() const { return node_->value; }
  Tensor& value() { return node_->value; }
  // Allocates a zero gradient on first access.
  Tensor& grad();
  const Tensor& grad() const { return node_->grad; }
  bool has_grad() const { return node_ && !node_->grad.empty(); }
  void zero_grad();
  bool requires_grad() const { return node_ && node_->requires_grad; }

  int rows() const { return node_->value.rows(); }
  int cols() const { return node_->value.cols(); }
  float item() const;

  Node* node() const noexcept { return node_.get(); }
  const std::shared_ptr<Node>& shared() const noexcept { return node_; }
  explicit operator bool() const noexcept { return static_cast<bool>(node_); }

 private:
  std::shared_ptr<Node> node_;
};

Var constant(Tensor value);
Var parameter(Tensor value);

// Reverse-mode sweep from a scalar root (seed 1) or from any root with an
// explicit upstream gradient. Parameter gradients accumulate across calls.
void backward(const Var& root);
void backward(const Var& root, const Tensor& seed);

// While alive, ops on this thread record no trace.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};
bool grad_enabled() noexcept;

// Boolean attention pattern: allowed(r, c) == true means query r may attend key c.
class AttentionMask {
 public:
  AttentionMask(int rows, int cols, bool allowed = true);
  static AttentionMask causal(int n);
  // Queries attend only the first `valid` keys.
  static AttentionMask key_padding(int queries, int keys, int valid);

  int rows() const noexcept { return rows_; }
  int cols() const noexcept { return cols_; }
  bool allowed(int r, int c) const { return bits_[static_cast<std::size_t>(r) * cols_ + c] != 0; }
  void set(int r, int c, bool allowed) { bits_[static_cast<std::size_t>(r) * cols_ + c] = allowed; }

 private:
  int rows_;
  int cols_;
  std::vector<std::uint8_t> bits_;
};

inline constexpr int kIgnoreIndex = -100;

Var matmul(const Var& a, const Var& b);     // [m,k] x [k,n]
Var matmul_nt(const Var& a, const Var& b);  // [m,k] x [n,k]^T
Var transpose(const Var& a);
Var add(const Var& a, const Var& b);
Var add_row(const Var& x, const Var& bias);  // bias [1,n] broadcast over rows
Var scale(const Var& x, float s);
Var mul_scalar(const Var& x, const Var& s);  // s is [1,1]
Var exp_clamped(const Var& x, float lo, float hi);
Var gelu(const Var& x);
Var layer_norm(const Var& x, const Var& gain, const Var& bias, float eps = 1e-5f);
Var embedding(const Var& table, std::span<const int> ids);
Var softmax_rows(const Var& x);
// Masked entries behave as -inf logits; a row with no allowed entry yields zeros.
Var masked_softmax_rows(const Var& x, const AttentionMask& mask);
Var concat_rows(std::span<const Var> parts);
Var concat_cols(std::span<const Var> parts);
Var slice_rows(const Var& x, int begin, int end);
Var slice_cols(const Var& x, int begin, int end);
Var mean_rows(const Var& x);
Var l2_normalize_rows(const Var& x, float eps = 1e-12f);
// Scalar sum(x .* weights); weights are a constant tensor of x's shape.
Var weighted_sum(const Var& x, const Tensor& weights);

// Mean negative log-softmax over rows whose target is not kIgnoreIndex.
// With `normalizer`, the summed loss is divided by it instead of the valid count.
Var cross_entropy(const Var& logits, std::span<const int> targets, std::optional<float> normalizer = {});

// Per-row negative log-likelihood of the target (0 for ignored rows); no trace.
std::vector<double> token_nll(const Tensor& logits, std::span<const int> targets);

Tensor softmax(std::span<const float> logits);

}  // namespace mmchat::nn
