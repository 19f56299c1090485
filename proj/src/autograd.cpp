#include "mmchat/autograd.hpp"

#include <algorithm>
#include <cmath>
#include <string>
#include <unordered_set>

#include "mmchat/error.hpp"

namespace mmchat::nn {
namespace {

thread_local bool g_grad_enabled = true;

// C[m,n] += A[m,k] * B[k,n]
void gemm_nn(const float* a, const float* b, float* c, int m, int k, int n) {
  for (int i = 0; i < m; ++i) {
    float* crow = c + static_cast<std::size_t>(i) * n;
    const float* arow = a + static_cast<std::size_t>(i) * k;
    for (int p = 0; p < k; ++p) {
      const float av = arow[p];
      if (av == 0.0f) continue;
      const float* brow = b + static_cast<std::size_t>(p) * n;
      for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// C[m,n] += A[m,k] * B[n,k]^T
void gemm_nt(const float* a, const float* b, float* c, int m, int k, int n) {
  for (int i = 0; i < m; ++i) {
    const float* arow = a + static_cast<std::size_t>(i) * k;
    float* crow = c + static_cast<std::size_t>(i) * n;
    for (int j = 0; j < n; ++j) {
      const float* brow = b + static_cast<std::size_t>(j) * k;
      float acc = 0.0f;
      for (int p = 0; p < k; ++p) acc += arow[p] * brow[p];
      crow[j] += acc;
    }
  }
}

// C[k,n] += A[m,k]^T * B[m,n]
void gemm_tn(const float* a, const float* b, float* c, int m, int k, int n) {
  for (int i = 0; i < m; ++i) {
    const float* arow = a + static_cast<std::size_t>(i) * k;
    const float* brow = b + static_cast<std::size_t>(i) * n;
    for (int p = 0; p < k; ++p) {
      const float av = arow[p];
      if (av == 0.0f) continue;
      float* crow = c + static_cast<std::size_t>(p) * n;
      for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

Tensor& ensure_grad(Node& n) {
  if (n.grad.empty()) n.grad = Tensor(n.value.shape());
  return n.grad;
}

// Wraps a computed value into a trace node. The backward closure is attached
// only when gradients are enabled and some input requires them.
Var make_result(const char* op, Tensor value, std::vector<std::shared_ptr<Node>> inputs,
                std::function<void(Node&)> backward_fn) {
  if (!value.all_finite()) {
    throw NonFiniteError(std::string("non-finite value produced by ") + op);
  }
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  node->op = op;
  bool needs = false;
  if (g_grad_enabled) {
    for (const auto& in : inputs) needs = needs || in->requires_grad;
  }
  if (needs) {
    node->requires_grad = true;
    node->inputs = std::move(inputs);
    node->backward = std::move(backward_fn);
  }
  return Var(std::move(node));
}

void require_rank2(const Var& v, const char* op) {
  if (!v || v.value().rank() != 2) {
    throw DimensionError(std::string(op) + ": expected rank-2 input");
  }
}

[[noreturn]] void shape_error(const char* op, const Tensor& a, const Tensor& b) {
  throw DimensionError(std::string(op) + ": incompatible shapes " + a.shape_string() + " and " +
                       b.shape_string());
}

}  // namespace

Tensor& Var::grad() { return ensure_grad(*node_); }

void Var::zero_grad() {
  if (node_ && !node_->grad.empty()) node_->grad.fill(0.0f);
}

float Var::item() const {
  if (node_->value.size() != 1) throw DimensionError("item: tensor is not a scalar");
  return node_->value[0];
}

Var constant(Tensor value) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  return Var(std::move(node));
}

Var parameter(Tensor value) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  node->requires_grad = true;
  node->op = "parameter";
  return Var(std::move(node));
}

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }
bool grad_enabled() noexcept { return g_grad_enabled; }

void backward(const Var& root) {
  if (root.value().size() != 1) throw DimensionError("backward: root is not a scalar; pass a seed");
  backward(root, Tensor(root.value().shape(), 1.0f));
}

void backward(const Var& root, const Tensor& seed) {
  if (!seed.same_shape(root.value())) shape_error("backward seed", root.value(), seed);
  if (!root.requires_grad()) return;

  // Iterative post-order DFS; reversed it is a valid topological order.
  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  std::vector<std::pair<Node*, std::size_t>> stack;
  stack.emplace_back(root.node(), 0);
  visited.insert(root.node());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      Node* child = node->inputs[next++].get();
      if (child->requires_grad && !visited.count(child)) {
        visited.insert(child);
        stack.emplace_back(child, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  Tensor& g = ensure_grad(*root.node());
  for (std::size_t i = 0; i < g.size(); ++i) g[i] += seed[i];
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backward && !n->grad.empty()) n->backward(*n);
  }
  // Interior gradients are single-use; drop them so a second sweep over a
  // shared sub-trace starts clean.
  for (Node* n : order) {
    if (n->backward) n->grad = Tensor();
  }
}

AttentionMask::AttentionMask(int rows, int cols, bool allowed)
    : rows_(rows), cols_(cols), bits_(static_cast<std::size_t>(rows) * cols, allowed ? 1 : 0) {}

AttentionMask AttentionMask::causal(int n) {
  AttentionMask m(n, n, false);
  for (int r = 0; r < n; ++r) {
    for (int c = 0; c <= r; ++c) m.set(r, c, true);
  }
  return m;
}

AttentionMask AttentionMask::key_padding(int queries, int keys, int valid) {
  AttentionMask m(queries, keys, false);
  for (int r = 0; r < queries; ++r) {
    for (int c = 0; c < std::min(valid, keys); ++c) m.set(r, c, true);
  }
  return m;
}

Var matmul(const Var& a, const Var& b) {
  require_rank2(a, "matmul");
  require_rank2(b, "matmul");
  const int m = a.rows(), k = a.cols(), n = b.cols();
  if (b.rows() != k) shape_error("matmul", a.value(), b.value());
  Tensor out = Tensor::zeros(m, n);
  gemm_nn(a.value().data(), b.value().data(), out.data(), m, k, n);
  return make_result("matmul", std::move(out), {a.shared(), b.shared()}, [m, k, n](Node& self) {
    Node& an = *self.inputs[0];
    Node& bn = *self.inputs[1];
    if (an.requires_grad) gemm_nt(self.grad.data(), bn.value.data(), ensure_grad(an).data(), m, n, k);
    if (bn.requires_grad) gemm_tn(an.value.data(), self.grad.data(), ensure_grad(bn).data(), m, k, n);
  });
}

Var matmul_nt(const Var& a, const Var& b) {
  require_rank2(a, "matmul_nt");
  require_rank2(b, "matmul_nt");
  const int m = a.rows(), k = a.cols(), n = b.rows();
  if (b.cols() != k) shape_error("matmul_nt", a.value(), b.value());
  Tensor out = Tensor::zeros(m, n);
  gemm_nt(a.value().data(), b.value().data(), out.data(), m, k, n);
  return make_result("matmul_nt", std::move(out), {a.shared(), b.shared()}, [m, k, n](Node& self) {
    Node& an = *self.inputs[0];
    Node& bn = *self.inputs[1];
    // dA[m,k] = dC[m,n] B[n,k];  dB[n,k] = dC^T[n,m] A[m,k]
    if (an.requires_grad) gemm_nn(self.grad.data(), bn.value.data(), ensure_grad(an).data(), m, n, k);
    if (bn.requires_grad) gemm_tn(self.grad.data(), an.value.data(), ensure_grad(bn).data(), m, n, k);
  });
}

Var transpose(const Var& a) {
  require_rank2(a, "transpose");
  const int m = a.rows(), n = a.cols();
  Tensor out = Tensor::zeros(n, m);
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) out.at(j, i) = a.value().at(i, j);
  return make_result("transpose", std::move(out), {a.shared()}, [m, n](Node& self) {
    Tensor& g = ensure_grad(*self.inputs[0]);
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < n; ++j) g.at(i, j) += self.grad.at(j, i);
  });
}

Var add(const Var& a, const Var& b) {
  if (!a.value().same_shape(b.value())) shape_error("add", a.value(), b.value());
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += b.value()[i];
  return make_result("add", std::move(out), {a.shared(), b.shared()}, [](Node& self) {
    for (auto& in : self.inputs) {
      if (!in->requires_grad) continue;
      Tensor& g = ensure_grad(*in);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
  });
}

Var add_row(const Var& x, const Var& bias) {
  require_rank2(x, "add_row");
  require_rank2(bias, "add_row");
  const int m = x.rows(), n = x.cols();
  if (bias.rows() != 1 || bias.cols() != n) shape_error("add_row", x.value(), bias.value());
  Tensor out = x.value();
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) out.at(i, j) += bias.value()[j];
  return make_result("add_row", std::move(out), {x.shared(), bias.shared()}, [m, n](Node& self) {
    Node& xn = *self.inputs[0];
    Node& bn = *self.inputs[1];
    if (xn.requires_grad) {
      Tensor& g = ensure_grad(xn);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
    if (bn.requires_grad) {
      Tensor& g = ensure_grad(bn);
      for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) g[j] += self.grad.at(i, j);
    }
  });
}

Var scale(const Var& x, float s) {
  Tensor out = x.value();
  for (float& v : out.values()) v *= s;
  return make_result("scale", std::move(out), {x.shared()}, [s](Node& self) {
    Tensor& g = ensure_grad(*self.inputs[0]);
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += s * self.grad[i];
  });
}

Var mul_scalar(const Var& x, const Var& s) {
  if (s.value().size() != 1) shape_error("mul_scalar", x.value(), s.value());
  const float sv = s.value()[0];
  Tensor out = x.value();
  for (float& v : out.values()) v *= sv;
  return make_result("mul_scalar", std::move(out), {x.shared(), s.shared()}, [](Node& self) {
    Node& xn = *self.inputs[0];
    Node& sn = *self.inputs[1];
    const float sv = sn.value[0];
    if (xn.requires_grad) {
      Tensor& g = ensure_grad(xn);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += sv * self.grad[i];
    }
    if (sn.requires_grad) {
      double acc = 0.0;
      for (std::size_t i = 0; i < xn.value.size(); ++i) acc += double(self.grad[i]) * xn.value[i];
      ensure_grad(sn)[0] += static_cast<float>(acc);
    }
  });
}

Var exp_clamped(const Var& x, float lo, float hi) {
  Tensor out = x.value();
  for (float& v : out.values()) v = std::clamp(std::exp(v), lo, hi);
  return make_result("exp_clamped", std::move(out), {x.shared()}, [lo, hi](Node& self) {
    Tensor& g = ensure_grad(*self.inputs[0]);
    for (std::size_t i = 0; i < g.size(); ++i) {
      const float y = self.value[i];
      const float raw = std::exp(self.inputs[0]->value[i]);
      if (raw > lo && raw < hi) g[i] += self.grad[i] * y;
    }
  });
}

Var gelu(const Var& x) {
  constexpr float kC = 0.7978845608028654f;  // sqrt(2/pi)
  constexpr float kA = 0.044715f;
  Tensor out = x.value();
  for (float& v : out.values()) {
    const float t = std::tanh(kC * (v + kA * v * v * v));
    v = 0.5f * v * (1.0f + t);
  }
  return make_result("gelu", std::move(out), {x.shared()}, [](Node& self) {
    Node& xn = *self.inputs[0];
    Tensor& g = ensure_grad(xn);
    for (std::size_t i = 0; i < g.size(); ++i) {
      const float v = xn.value[i];
      const float t = std::tanh(kC * (v + kA * v * v * v));
      const float d = 0.5f * (1.0f + t) + 0.5f * v * (1.0f - t * t) * kC * (1.0f + 3.0f * kA * v * v);
      g[i] += self.grad[i] * d;
    }
  });
}

Var layer_norm(const Var& x, const Var& gain, const Var& bias, float eps) {
  require_rank2(x, "layer_norm");
  const int m = x.rows(), n = x.cols();
  if (gain.value().size() != static_cast<std::size_t>(n) || bias.value().size() != static_cast<std::size_t>(n)) {
    shape_error("layer_norm", x.value(), gain.value());
  }
  Tensor out = Tensor::zeros(m, n);
  auto xhat = std::make_shared<Tensor>(Tensor::zeros(m, n));
  auto inv_std = std::make_shared<std::vector<float>>(m);
  for (int i = 0; i < m; ++i) {
    auto row = x.value().row(i);
    double mean = 0.0;
    for (float v : row) mean += v;
    mean /= n;
    double var = 0.0;
    for (float v : row) var += (v - mean) * (v - mean);
    var /= n;
    const float is = static_cast<float>(1.0 / std::sqrt(var + eps));
    (*inv_std)[i] = is;
    for (int j = 0; j < n; ++j) {
      const float h = static_cast<float>(row[j] - mean) * is;
      xhat->at(i, j) = h;
      out.at(i, j) = h * gain.value()[j] + bias.value()[j];
    }
  }
  return make_result("layer_norm", std::move(out), {x.shared(), gain.shared(), bias.shared()},
                     [m, n, xhat, inv_std](Node& self) {
                       Node& xn = *self.inputs[0];
                       Node& gn = *self.inputs[1];
                       Node& bn = *self.inputs[2];
                       if (gn.requires_grad) {
                         Tensor& g = ensure_grad(gn);
                         for (int i = 0; i < m; ++i)
                           for (int j = 0; j < n; ++j) g[j] += self.grad.at(i, j) * xhat->at(i, j);
                       }
                       if (bn.requires_grad) {
                         Tensor& g = ensure_grad(bn);
                         for (int i = 0; i < m; ++i)
                           for (int j = 0; j < n; ++j) g[j] += self.grad.at(i, j);
                       }
                       if (xn.requires_grad) {
                         Tensor& g = ensure_grad(xn);
                         std::vector<float> dh(n);
                         for (int i = 0; i < m; ++i) {
                           double mean_dh = 0.0, mean_dh_h = 0.0;
                           for (int j = 0; j < n; ++j) {
                             dh[j] = self.grad.at(i, j) * gn.value[j];
                             mean_dh += dh[j];
                             mean_dh_h += double(dh[j]) * xhat->at(i, j);
                           }
                           mean_dh /= n;
                           mean_dh_h /= n;
                           for (int j = 0; j < n; ++j) {
                             g.at(i, j) += (*inv_std)[i] *
                                           static_cast<float>(dh[j] - mean_dh - xhat->at(i, j) * mean_dh_h);
                           }
                         }
                       }
                     });
}

Var embedding(const Var& table, std::span<const int> ids) {
  require_rank2(table, "embedding");
  const int vocab = table.rows(), d = table.cols();
  const int t = static_cast<int>(ids.size());
  Tensor out = Tensor::zeros(t, d);
  for (int i = 0; i < t; ++i) {
    if (ids[i] < 0 || ids[i] >= vocab) {
      throw DimensionError("embedding: id " + std::to_string(ids[i]) + " outside table of " +
                           std::to_string(vocab) + " rows");
    }
    std::copy_n(table.value().row(ids[i]).data(), d, out.row(i).data());
  }
  std::vector<int> ids_copy(ids.begin(), ids.end());
  return make_result("embedding", std::move(out), {table.shared()}, [ids_copy, d](Node& self) {
    Tensor& g = ensure_grad(*self.inputs[0]);
    for (std::size_t i = 0; i < ids_copy.size(); ++i) {
      float* dst = g.row(ids_copy[i]).data();
      const float* src = self.grad.row(static_cast<int>(i)).data();
      for (int j = 0; j < d; ++j) dst[j] += src[j];
    }
  });
}

namespace {

void softmax_backward(Node& self) {
  Tensor& g = ensure_grad(*self.inputs[0]);
  const int m = self.value.rows(), n = self.value.cols();
  for (int i = 0; i < m; ++i) {
    double dot = 0.0;
    for (int j = 0; j < n; ++j) dot += double(self.value.at(i, j)) * self.grad.at(i, j);
    for (int j = 0; j < n; ++j) {
      g.at(i, j) += self.value.at(i, j) * static_cast<float>(self.grad.at(i, j) - dot);
    }
  }
}

}  // namespace

Var softmax_rows(const Var& x) {
  require_rank2(x, "softmax");
  return masked_softmax_rows(x, AttentionMask(x.rows(), x.cols(), true));
}

Var masked_softmax_rows(const Var& x, const AttentionMask& mask) {
  require_rank2(x, "softmax");
  const int m = x.rows(), n = x.cols();
  if (mask.rows() != m || mask.cols() != n) {
    throw DimensionError("attention: mask " + std::to_string(mask.rows()) + "x" + std::to_string(mask.cols()) +
                         " does not match scores " + x.value().shape_string());
  }
  Tensor out = Tensor::zeros(m, n);
  for (int i = 0; i < m; ++i) {
    float mx = -std::numeric_limits<float>::infinity();
    for (int j = 0; j < n; ++j)
      if (mask.allowed(i, j)) mx = std::max(mx, x.value().at(i, j));
    if (!std::isfinite(mx)) continue;  // fully masked row
    double total = 0.0;
    for (int j = 0; j < n; ++j) {
      if (!mask.allowed(i, j)) continue;
      const float e = std::exp(x.value().at(i, j) - mx);
      out.at(i, j) = e;
      total += e;
    }
    const float inv = static_cast<float>(1.0 / total);
    for (int j = 0; j < n; ++j) out.at(i, j) *= inv;
  }
  return make_result("softmax", std::move(out), {x.shared()}, softmax_backward);
}

Var concat_rows(std::span<const Var> parts) {
  if (parts.empty()) throw DimensionError("concat_rows: no inputs");
  const int n = parts[0].cols();
  int total = 0;
  std::vector<std::shared_ptr<Node>> inputs;
  for (const auto& p : parts) {
    require_rank2(p, "concat_rows");
    if (p.cols() != n) shape_error("concat_rows", parts[0].value(), p.value());
    total += p.rows();
    inputs.push_back(p.shared());
  }
  Tensor out = Tensor::zeros(total, n);
  std::size_t offset = 0;
  for (const auto& p : parts) {
    std::copy(p.value().storage().begin(), p.value().storage().end(), out.storage().begin() + offset);
    offset += p.value().size();
  }
  return make_result("concat_rows", std::move(out), std::move(inputs), [](Node& self) {
    std::size_t offset = 0;
    for (auto& in : self.inputs) {
      const std::size_t len = in->value.size();
      if (in->requires_grad) {
        Tensor& g = ensure_grad(*in);
        for (std::size_t i = 0; i < len; ++i) g[i] += self.grad[offset + i];
      }
      offset += len;
    }
  });
}

Var concat_cols(std::span<const Var> parts) {
  if (parts.empty()) throw DimensionError("concat_cols: no inputs");
  const int m = parts[0].rows();
  int total = 0;
  std::vector<std::shared_ptr<Node>> inputs;
  for (const auto& p : parts) {
    require_rank2(p, "concat_cols");
    if (p.rows() != m) shape_error("concat_cols", parts[0].value(), p.value());
    total += p.cols();
    inputs.push_back(p.shared());
  }
  Tensor out = Tensor::zeros(m, total);
  int offset = 0;
  for (const auto& p : parts) {
    const int w = p.cols();
    for (int i = 0; i < m; ++i) std::copy_n(p.value().row(i).data(), w, out.row(i).data() + offset);
    offset += w;
  }
  return make_result("concat_cols", std::move(out), std::move(inputs), [m](Node& self) {
    int offset = 0;
    for (auto& in : self.inputs) {
      const int w = in->value.cols();
      if (in->requires_grad) {
        Tensor& g = ensure_grad(*in);
        for (int i = 0; i < m; ++i)
          for (int j = 0; j < w; ++j) g.at(i, j) += self.grad.at(i, offset + j);
      }
      offset += w;
    }
  });
}

Var slice_rows(const Var& x, int begin, int end) {
  require_rank2(x, "slice_rows");
  if (begin < 0 || end > x.rows() || begin >= end) {
    throw DimensionError("slice_rows: range [" + std::to_string(begin) + "," + std::to_string(end) +
                         ") outside " + x.value().shape_string());
  }
  const int n = x.cols();
  Tensor out = Tensor::zeros(end - begin, n);
  std::copy_n(x.value().row(begin).data(), static_cast<std::size_t>(end - begin) * n, out.data());
  return make_result("slice_rows", std::move(out), {x.shared()}, [begin, n](Node& self) {
    Tensor& g = ensure_grad(*self.inputs[0]);
    float* dst = g.row(begin).data();
    for (std::size_t i = 0; i < self.grad.size(); ++i) dst[i] += self.grad[i];
    (void)n;
  });
}

Var slice_cols(const Var& x, int begin, int end) {
  require_rank2(x, "slice_cols");
  if (begin < 0 || end > x.cols() || begin >= end) {
    throw DimensionError("slice_cols: range [" + std::to_string(begin) + "," + std::to_string(end) +
                         ") outside " + x.value().shape_string());
  }
  const int m = x.rows(), w = end - begin;
  Tensor out = Tensor::zeros(m, w);
  for (int i = 0; i < m; ++i) std::copy_n(x.value().row(i).data() + begin, w, out.row(i).data());
  return make_result("slice_cols", std::move(out), {x.shared()}, [begin, m, w](Node& self) {
    Tensor& g = ensure_grad(*self.inputs[0]);
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < w; ++j) g.at(i, begin + j) += self.grad.at(i, j);
  });
}

Var mean_rows(const Var& x) {
  require_rank2(x, "mean_rows");
  const int m = x.rows(), n = x.cols();
  Tensor out = Tensor::zeros(1, n);
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) out[j] += x.value().at(i, j);
  for (float& v : out.values()) v /= static_cast<float>(m);
  return make_result("mean_rows", std::move(out), {x.shared()}, [m, n](Node& self) {
    Tensor& g = ensure_grad(*self.inputs[0]);
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < n; ++j) g.at(i, j) += self.grad[j] / static_cast<float>(m);
  });
}

Var l2_normalize_rows(const Var& x, float eps) {
  require_rank2(x, "l2_normalize");
  const int m = x.rows(), n = x.cols();
  Tensor out = x.value();
  auto norms = std::make_shared<std::vector<float>>(m);
  for (int i = 0; i < m; ++i) {
    double ss = 0.0;
    for (float v : x.value().row(i)) ss += double(v) * v;
    const float nrm = static_cast<float>(std::sqrt(ss + eps));
    (*norms)[i] = nrm;
    for (float& v : out.row(i)) v /= nrm;
  }
  return make_result("l2_normalize", std::move(out), {x.shared()}, [m, n, norms](Node& self) {
    Tensor& g = ensure_grad(*self.inputs[0]);
    for (int i = 0; i < m; ++i) {
      double dot = 0.0;
      for (int j = 0; j < n; ++j) dot += double(self.value.at(i, j)) * self.grad.at(i, j);
      for (int j = 0; j < n; ++j) {
        g.at(i, j) += static_cast<float>((self.grad.at(i, j) - self.value.at(i, j) * dot) / (*norms)[i]);
      }
    }
  });
}

Var weighted_sum(const Var& x, const Tensor& weights) {
  if (!weights.same_shape(x.value())) shape_error("weighted_sum", x.value(), weights);
  double acc = 0.0;
  for (std::size_t i = 0; i < weights.size(); ++i) acc += double(x.value()[i]) * weights[i];
  return make_result("weighted_sum", Tensor::scalar(static_cast<float>(acc)), {x.shared()},
                     [weights](Node& self) {
                       Tensor& g = ensure_grad(*self.inputs[0]);
                       const float up = self.grad[0];
                       for (std::size_t i = 0; i < g.size(); ++i) g[i] += up * weights[i];
                     });
}

Var cross_entropy(const Var& logits, std::span<const int> targets, std::optional<float> normalizer) {
  require_rank2(logits, "cross_entropy");
  const int m = logits.rows(), v = logits.cols();
  if (static_cast<int>(targets.size()) != m) {
    throw DimensionError("cross_entropy: " + std::to_string(targets.size()) + " targets for " +
                         std::to_string(m) + " rows");
  }
  int valid = 0;
  for (int t : targets) {
    if (t == kIgnoreIndex) continue;
    if (t < 0 || t >= v) throw ValidationError("cross_entropy: target " + std::to_string(t) + " out of range");
    ++valid;
  }
  if (valid == 0) throw ValidationError("cross_entropy: every target is ignored");
  const float denom = normalizer ? *normalizer : static_cast<float>(valid);
  if (!(denom > 0.0f)) throw ValidationError("cross_entropy: normalizer must be positive");

  auto probs = std::make_shared<Tensor>(Tensor::zeros(m, v));
  double total = 0.0;
  for (int i = 0; i < m; ++i) {
    if (targets[i] == kIgnoreIndex) continue;
    auto row = logits.value().row(i);
    const float mx = *std::max_element(row.begin(), row.end());
    double z = 0.0;
    for (int j = 0; j < v; ++j) {
      const float e = std::exp(row[j] - mx);
      probs->at(i, j) = e;
      z += e;
    }
    for (int j = 0; j < v; ++j) probs->at(i, j) = static_cast<float>(probs->at(i, j) / z);
    total += (std::log(z) + mx) - row[targets[i]];
  }
  std::vector<int> tcopy(targets.begin(), targets.end());
  return make_result("cross_entropy", Tensor::scalar(static_cast<float>(total / denom)), {logits.shared()},
                     [probs, tcopy, denom, m, v](Node& self) {
                       Tensor& g = ensure_grad(*self.inputs[0]);
                       const float up = self.grad[0] / denom;
                       for (int i = 0; i < m; ++i) {
                         if (tcopy[i] == kIgnoreIndex) continue;
                         for (int j = 0; j < v; ++j) g.at(i, j) += up * probs->at(i, j);
                         g.at(i, tcopy[i]) -= up;
                       }
                     });
}

std::vector<double> token_nll(const Tensor& logits, std::span<const int> targets) {
  const int m = logits.rows(), v = logits.cols();
  if (static_cast<int>(targets.size()) != m) throw DimensionError("token_nll: target count mismatch");
  std::vector<double> out(m, 0.0);
  for (int i = 0; i < m; ++i) {
    if (targets[i] == kIgnoreIndex) continue;
    if (targets[i] < 0 || targets[i] >= v) throw ValidationError("token_nll: target out of range");
    auto row = logits.row(i);
    const float mx = *std::max_element(row.begin(), row.end());
    double z = 0.0;
    for (float x : row) z += std::exp(double(x) - mx);
    out[i] = std::log(z) + mx - row[targets[i]];
  }
  return out;
}

Tensor softmax(std::span<const float> logits) {
  Tensor out({1, static_cast<int>(logits.size())});
  if (logits.empty()) return out;
  const float mx = *std::max_element(logits.begin(), logits.end());
  double z = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    out[i] = std::exp(logits[i] - mx);
    z += out[i];
  }
  for (float& p : out.values()) p = static_cast<float>(p / z);
  return out;
}

}  // namespace mmchat::nn
