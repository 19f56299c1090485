#include "mmchat/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "mmchat/error.hpp"

namespace mmchat::nn {

GradCheckResult finite_diff_check(const std::function<Var()>& loss, ParameterSet& params,
                                  const std::vector<std::string>& subset, const GradCheckOptions& options) {
  params.zero_grad();
  Var root = loss();
  if (root.value().size() != 1) throw DimensionError("finite_diff_check: loss is not a scalar");
  backward(root);

  auto evaluate = [&loss]() {
    NoGradGuard guard;
    return static_cast<double>(loss().item());
  };

  std::mt19937_64 rng(options.seed);
  struct Probe {
    std::string name;
    double max_diff = 0.0, max_a = 0.0, max_n = 0.0;
  };
  std::vector<Probe> probes;
  double global_scale = 0.0;
  for (auto& p : params.items()) {
    if (!p.trainable) continue;
    if (!subset.empty() && std::find(subset.begin(), subset.end(), p.name) == subset.end()) continue;

    Tensor& w = p.var.value();
    const Tensor analytic = p.var.has_grad() ? p.var.grad() : Tensor(w.shape());
    std::vector<std::size_t> entries(w.size());
    std::iota(entries.begin(), entries.end(), 0);
    if (static_cast<int>(entries.size()) > options.max_entries) {
      std::shuffle(entries.begin(), entries.end(), rng);
      entries.resize(options.max_entries);
      std::sort(entries.begin(), entries.end());
    }

    Probe probe{p.name};
    for (std::size_t idx : entries) {
      // Central differences at h and 2h combined by Richardson extrapolation,
      // (4 D(h) - D(2h)) / 3, which cancels the O(h^2) truncation term. Each
      // quotient uses the step float32 actually applied.
      const float original = w[idx];
      const auto central = [&](float h) {
        const float up = original + h;
        const float down = original - h;
        w[idx] = up;
        const double plus = evaluate();
        w[idx] = down;
        const double minus = evaluate();
        w[idx] = original;
        return (plus - minus) / (static_cast<double>(up) - static_cast<double>(down));
      };
      const double d1 = central(options.eps);
      const double numeric = options.richardson ? (4.0 * d1 - central(2.0f * options.eps)) / 3.0 : d1;
      probe.max_diff = std::max(probe.max_diff, std::fabs(numeric - analytic[idx]));
      probe.max_a = std::max(probe.max_a, std::fabs(static_cast<double>(analytic[idx])));
      probe.max_n = std::max(probe.max_n, std::fabs(numeric));
    }
    global_scale = std::max({global_scale, probe.max_a, probe.max_n});
    probes.push_back(std::move(probe));
  }

  GradCheckResult result;
  for (const auto& probe : probes) {
    const double scale = std::max({probe.max_a, probe.max_n, options.scale_floor * global_scale});
    const double rel = scale > 0.0 ? probe.max_diff / scale : 0.0;
    result.parameters.push_back({probe.name, rel, probe.max_a});
    if (result.worst_parameter.empty() || rel > result.max_relative_error) {
      result.max_relative_error = rel;
      result.worst_parameter = probe.name;
    }
  }
  params.zero_grad();
  return result;
}

}  // namespace mmchat::nn
