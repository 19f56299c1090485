#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "mmchat/layers.hpp"

namespace mmchat::nn {

struct GradCheckOptions {
  float eps = 2e-2f;
  // Entries probed per parameter tensor; larger tensors are sampled with `seed`.
  int max_entries = 48;
  std::uint64_t seed = 0;
  // Lower bound on a tensor's normalizer, as a fraction of the largest gradient
  // magnitude seen anywhere in the check.
  double scale_floor = 0.1;
  // Fourth-order estimate from steps eps and 2*eps; plain central difference when false.
  bool richardson = true;
};

struct GradCheckEntry {
  std::string parameter;
  double relative_error = 0.0;
  double max_abs_analytic = 0.0;
};

struct GradCheckResult {
  double max_relative_error = 0.0;
  std::string worst_parameter;
  std::vector<GradCheckEntry> parameters;
};

// Compares analytic gradients of `loss` against central differences.
//
// The error for one parameter tensor is max_i |a_i - n_i| / s over the probed
// entries, where s = max(max_i |a_i|, max_i |n_i|, scale_floor * global scale).
// Normalizing by gradient scale rather than per entry keeps float32 rounding in
// near-zero entries from dominating. With the default fourth-order stencil a
// step near 2e-2 balances truncation against float32 rounding. Frozen
// parameters, and parameters not named in `subset` when it is non-empty, are
// skipped. Throws DimensionError if `loss` is not a scalar.
GradCheckResult finite_diff_check(const std::function<Var()>& loss, ParameterSet& params,
                                  const std::vector<std::string>& subset = {}, const GradCheckOptions& options = {});

}  // namespace mmchat::nn
