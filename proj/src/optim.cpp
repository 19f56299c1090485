#include "mmchat/optim.hpp"

#include <algorithm>
#include <cmath>

#include "mmchat/error.hpp"

namespace mmchat::nn {

AdamW::AdamW(ParameterSet& params, AdamWConfig config) : params_(params), config_(config) {
  for (const auto& p : params_.items()) {
    first_.emplace_back(p.var.value().shape());
    second_.emplace_back(p.var.value().shape());
  }
}

void AdamW::step(float lr) {
  if (first_.size() != params_.items().size()) {
    throw StateError("AdamW: parameter set changed after optimizer construction");
  }
  for (const auto& p : params_.items()) {
    if (p.trainable && !p.var.has_grad()) throw ValidationError("AdamW: missing gradient for " + p.name);
  }
  ++steps_;
  const double bc1 = 1.0 - std::pow(static_cast<double>(config_.beta1), static_cast<double>(steps_));
  const double bc2 = 1.0 - std::pow(static_cast<double>(config_.beta2), static_cast<double>(steps_));
  const float step_size = static_cast<float>(lr / bc1);
  const float bc2_sqrt = static_cast<float>(std::sqrt(bc2));
  for (std::size_t i = 0; i < params_.items().size(); ++i) {
    auto& p = params_.items()[i];
    if (!p.trainable) continue;
    Tensor& w = p.var.value();
    const Tensor& g = p.var.grad();
    Tensor& m = first_[i];
    Tensor& v = second_[i];
    const float shrink = p.decay ? 1.0f - lr * config_.weight_decay : 1.0f;
    for (std::size_t j = 0; j < w.size(); ++j) {
      w[j] *= shrink;
      m[j] = config_.beta1 * m[j] + (1.0f - config_.beta1) * g[j];
      v[j] = config_.beta2 * v[j] + (1.0f - config_.beta2) * g[j] * g[j];
      const float denom = std::sqrt(v[j]) / bc2_sqrt + config_.eps;
      w[j] -= step_size * m[j] / denom;
    }
  }
}

float LinearSchedule::lr(std::int64_t step) const {
  if (total_steps <= 0) return 0.0f;
  step = std::clamp<std::int64_t>(step, 0, total_steps);
  if (warmup_steps > 0 && step < warmup_steps) {
    return base_lr * static_cast<float>(step) / static_cast<float>(warmup_steps);
  }
  const auto span = std::max<std::int64_t>(1, total_steps - warmup_steps);
  return base_lr * static_cast<float>(total_steps - step) / static_cast<float>(span);
}

}  // namespace mmchat::nn
