#include "mmchat/layers.hpp"

#include <cmath>

#include "mmchat/error.hpp"

namespace mmchat::nn {

void ParameterSet::add(std::string name, Var var, bool decay) {
  if (find(name)) throw ValidationError("duplicate parameter name " + name);
  items_.push_back({std::move(name), std::move(var), decay, true});
}

const NamedParameter* ParameterSet::find(const std::string& name) const {
  for (const auto& p : items_)
    if (p.name == name) return &p;
  return nullptr;
}

NamedParameter* ParameterSet::find(const std::string& name) {
  for (auto& p : items_)
    if (p.name == name) return &p;
  return nullptr;
}

void ParameterSet::zero_grad() {
  for (auto& p : items_) p.var.zero_grad();
}

std::size_t ParameterSet::scalar_count() const {
  std::size_t n = 0;
  for (const auto& p : items_) n += p.var.value().size();
  return n;
}

Tensor Initializer::truncated_normal(int rows, int cols) {
  std::normal_distribution<float> dist(0.0f, 1.0f);
  Tensor t({rows, cols});
  for (float& v : t.values()) {
    float z;
    do {
      z = dist(rng_);
    } while (std::fabs(z) > 2.0f);
    v = z * stddev_;
  }
  return t;
}

Linear::Linear(int in, int out, Initializer& init, bool bias) : weight_(parameter(init.truncated_normal(in, out))) {
  if (bias) bias_ = parameter(Tensor::zeros(1, out));
}

Var Linear::operator()(const Var& x) const {
  Var y = matmul(x, weight_);
  return bias_ ? add_row(y, bias_) : y;
}

void Linear::register_parameters(ParameterSet& set, const std::string& prefix) const {
  set.add(prefix + ".weight", weight_);
  if (bias_) set.add(prefix + ".bias", bias_, false);
}

LayerNorm::LayerNorm(int dim)
    : gain_(parameter(Tensor({1, dim}, 1.0f))), bias_(parameter(Tensor::zeros(1, dim))) {}

Var LayerNorm::operator()(const Var& x) const { return layer_norm(x, gain_, bias_); }

void LayerNorm::register_parameters(ParameterSet& set, const std::string& prefix) const {
  set.add(prefix + ".gain", gain_, false);
  set.add(prefix + ".bias", bias_, false);
}

Var attention(const Var& q, const Var& k, const Var& v, const AttentionMask* mask, int heads) {
  const int d = q.cols();
  if (heads <= 0 || d % heads != 0) {
    throw DimensionError("attention: " + std::to_string(heads) + " heads do not divide model dim " +
                         std::to_string(d));
  }
  if (k.cols() != d || v.cols() != d || k.rows() != v.rows()) {
    throw DimensionError("attention: q " + q.value().shape_string() + ", k " + k.value().shape_string() +
                         ", v " + v.value().shape_string());
  }
  const AttentionMask full(q.rows(), k.rows(), true);
  const AttentionMask& m = mask ? *mask : full;
  const int dh = d / heads;
  const float inv_sqrt = 1.0f / std::sqrt(static_cast<float>(dh));
  std::vector<Var> outputs;
  outputs.reserve(heads);
  for (int h = 0; h < heads; ++h) {
    Var qh = heads == 1 ? q : slice_cols(q, h * dh, (h + 1) * dh);
    Var kh = heads == 1 ? k : slice_cols(k, h * dh, (h + 1) * dh);
    Var vh = heads == 1 ? v : slice_cols(v, h * dh, (h + 1) * dh);
    Var weights = masked_softmax_rows(scale(matmul_nt(qh, kh), inv_sqrt), m);
    outputs.push_back(matmul(weights, vh));
  }
  return heads == 1 ? outputs.front() : concat_cols(outputs);
}

MultiHeadAttention::MultiHeadAttention(int d_model, int heads, Initializer& init)
    : heads_(heads),
      query_(d_model, d_model, init),
      key_(d_model, d_model, init, /*bias=*/false),  // a key bias shifts every score of a query equally
      value_(d_model, d_model, init),
      out_(d_model, d_model, init) {
  if (d_model % heads != 0) throw DimensionError("attention: heads must divide d_model");
}

Var MultiHeadAttention::operator()(const Var& x, const Var& memory, const AttentionMask* mask) const {
  return out_(attention(query_(x), key_(memory), value_(memory), mask, heads_));
}

void MultiHeadAttention::register_parameters(ParameterSet& set, const std::string& prefix) const {
  query_.register_parameters(set, prefix + ".query");
  key_.register_parameters(set, prefix + ".key");
  value_.register_parameters(set, prefix + ".value");
  out_.register_parameters(set, prefix + ".out");
}

FeedForward::FeedForward(int d_model, int hidden, Initializer& init)
    : up_(d_model, hidden, init), down_(hidden, d_model, init) {}

Var FeedForward::operator()(const Var& x) const { return down_(gelu(up_(x))); }

void FeedForward::register_parameters(ParameterSet& set, const std::string& prefix) const {
  up_.register_parameters(set, prefix + ".up");
  down_.register_parameters(set, prefix + ".down");
}

TransformerBlock::TransformerBlock(const BlockConfig& config, Initializer& init)
    : config_(config),
      ln_self_(config.d_model),
      ln_ff_(config.d_model),
      self_attn_(config.d_model, config.heads, init),
      ff_(config.d_model, config.d_model * config.ff_mult, init) {
  if (config.cross_attention) {
    ln_cross_ = LayerNorm(config.d_model);
    cross_attn_ = MultiHeadAttention(config.d_model, config.heads, init);
  }
}

Var TransformerBlock::operator()(const Var& x, const AttentionMask* self_mask, const Var* memory,
                                 const AttentionMask* memory_mask) const {
  Var h = ln_self_(x);
  Var y = add(x, self_attn_(h, h, self_mask));
  if (config_.cross_attention) {
    if (!memory) throw ValidationError("cross-attention block requires a memory sequence");
    y = add(y, cross_attn_(ln_cross_(y), *memory, memory_mask));
  }
  return add(y, ff_(ln_ff_(y)));
}

void TransformerBlock::register_parameters(ParameterSet& set, const std::string& prefix) const {
  ln_self_.register_parameters(set, prefix + ".ln_self");
  self_attn_.register_parameters(set, prefix + ".self_attn");
  if (config_.cross_attention) {
    ln_cross_.register_parameters(set, prefix + ".ln_cross");
    cross_attn_.register_parameters(set, prefix + ".cross_attn");
  }
  ln_ff_.register_parameters(set, prefix + ".ln_ff");
  ff_.register_parameters(set, prefix + ".ff");
}

}  // namespace mmchat::nn
