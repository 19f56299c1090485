#pragma once

#include <cstdint>
#include <vector>

#include "mmchat/layers.hpp"

namespace mmchat::nn {

struct AdamWConfig {
  float lr = 5e-5f;
  float beta1 = 0.9f;
  float beta2 = 0.999f;
  float eps = 1e-8f;
  float weight_decay = 0.01f;
};

// Decoupled weight decay Adam with bias correction. The parameter set must
// outlive the optimizer; moments are indexed in parameter-set order.
class AdamW {
 public:
  AdamW(ParameterSet& params, AdamWConfig config);

  // Applies one update with learning rate `lr` using the accumulated gradients.
  // Throws ValidationError if a trainable parameter has no gradient.
  void step(float lr);
  void step() { step(config_.lr); }

  std::int64_t step_count() const noexcept { return steps_; }
  const AdamWConfig& config() const noexcept { return config_; }
  const Tensor& first_moment(std::size_t i) const { return first_[i]; }
  const Tensor& second_moment(std::size_t i) const { return second_[i]; }

 private:
  ParameterSet& params_;
  AdamWConfig config_;
  std::vector<Tensor> first_;
  std::vector<Tensor> second_;
  std::int64_t steps_ = 0;
};

struct LinearSchedule {
  float base_lr = 5e-5f;
  std::int64_t total_steps = 1;
  std::int64_t warmup_steps = 0;

  // Linear warmup (if any) then linear decay to zero at total_steps; clamps past the end.
  float lr(std::int64_t step) const;
};

}  // namespace mmchat::nn
