#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <random>
#include <span>
#include <vector>

#include "cdnet/autograd.hpp"

namespace cdnet {

struct GradCheckReport {
  double max_rel_error = 0.0;
  double max_abs_error = 0.0;
  std::size_t coordinates = 0;
};

/// Relative error with a floor on the denominator so coordinates whose true gradient is
/// ~0 (e.g. attention key biases, which softmax shift-invariance cancels) are judged on
/// absolute error rather than on ratios of round-off.
inline double relative_error(double analytic, double numeric, double floor = 1e-6) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

/// Compares reverse-mode gradients of `loss_fn` against central differences on `samples`
/// coordinates drawn uniformly over all entries of `params`.
///
/// `loss_fn` must rebuild the graph from the current parameter values on every call and
/// return a scalar Var. Parameter values are restored exactly after each probe.
template <class LossFn>
GradCheckReport finite_diff_check(LossFn&& loss_fn, std::span<Var> params, double step, std::size_t samples,
                                  std::uint64_t seed = 7) {
  for (auto& p : params) p.zero_grad();
  Var loss = loss_fn();
  backward(loss);

  std::vector<std::size_t> offsets{0};
  for (auto& p : params) offsets.push_back(offsets.back() + p.value().size());
  const std::size_t total = offsets.back();

  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> pick(0, total - 1);
  GradCheckReport report;
  report.coordinates = std::min(samples, total);
  for (std::size_t s = 0; s < report.coordinates; ++s) {
    // Exhaustive when the request covers every coordinate.
    const std::size_t flat = samples >= total ? s : pick(rng);
    const std::size_t which =
        static_cast<std::size_t>(std::upper_bound(offsets.begin(), offsets.end(), flat) - offsets.begin()) - 1;
    const std::size_t idx = flat - offsets[which];
    Var& p = params[which];
    const double analytic = p.grad()[idx];
    const double saved = p.value()[idx];
    double plus = 0.0, minus = 0.0;
    {
      NoGradGuard guard;
      p.value()[idx] = saved + step;
      plus = loss_fn().item();
      p.value()[idx] = saved - step;
      minus = loss_fn().item();
      p.value()[idx] = saved;
    }
    const double numeric = (plus - minus) / (2.0 * step);
    report.max_rel_error = std::max(report.max_rel_error, relative_error(analytic, numeric));
    report.max_abs_error = std::max(report.max_abs_error, std::abs(analytic - numeric));
  }
  return report;
}

}  // namespace cdnet
