#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>

#include "gentle/numkit/mlp.hpp"

namespace gentle::nk {

struct GradCheckResult {
  double max_relative_error = 0.0;
  double max_absolute_error = 0.0;
  std::size_t checked = 0;
  std::size_t worst_index = 0;
  std::size_t kinks = 0;  // parameters excluded as straddling a non-differentiable point
};

/// Relative error |a - n| / max(|a|, |n|, floor). The floor keeps gradients
/// that are zero up to round-off from dominating the statistic.
inline double relative_error(double analytic, double numeric, double floor = 1e-6) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

/// Compares `analytic` against central differences of `loss()` w.r.t. every
/// parameter of `params`. `loss` must read the current values of `params`.
/// `stride` > 1 checks every stride-th parameter only.
///
/// With `kink_tolerance` > 0, an entry whose relative error exceeds it is
/// probed again with one-sided differences at h / 10. If exactly one side
/// agrees with the analytic value while the sides disagree with each other,
/// the step straddles a kink (a ReLU switching): the entry is counted in
/// `kinks` and left out of the statistics. Otherwise the entry is scored by
/// the better of the coarse and the refined central difference, so a wrong
/// gradient, which matches neither, still fails.
template <class Loss>
GradCheckResult check_gradient(MlpParams& params, const MlpGrads& analytic, Loss&& loss, double h = 1e-5,
                               std::size_t stride = 1, double floor = 1e-6, double kink_tolerance = 0.0) {
  std::vector<double> a;
  a.reserve(params.parameter_count());
  for_each_gradient(analytic, [&](double g) { a.push_back(g); });

  constexpr double kSideMatch = 1e-2;
  GradCheckResult r;
  std::size_t idx = 0;
  for_each_parameter(params, [&](double& w) {
    const std::size_t i = idx++;
    if (i % stride != 0) return;
    const double saved = w;
    w = saved + h;
    const double up = loss();
    w = saved - h;
    const double down = loss();
    w = saved;
    double numeric = (up - down) / (2.0 * h);
    double rel = relative_error(a[i], numeric, floor);
    if (kink_tolerance > 0.0 && rel > kink_tolerance) {
      const double hs = h / 10.0;
      const double base = loss();
      w = saved + hs;
      const double fwd = (loss() - base) / hs;
      w = saved - hs;
      const double bwd = (base - loss()) / hs;
      w = saved;
      const double e_fwd = relative_error(a[i], fwd, floor);
      const double e_bwd = relative_error(a[i], bwd, floor);
      const double best = std::min(e_fwd, e_bwd);
      if (best <= kSideMatch && relative_error(fwd, bwd, floor) > 10.0 * std::max(best, kink_tolerance)) {
        ++r.kinks;
        return;
      }
      const double refined = 0.5 * (fwd + bwd);
      if (relative_error(a[i], refined, floor) < rel) numeric = refined;
    }
    rel = relative_error(a[i], numeric, floor);
    r.max_absolute_error = std::max(r.max_absolute_error, std::abs(a[i] - numeric));
    if (rel > r.max_relative_error) {
      r.max_relative_error = rel;
      r.worst_index = i;
    }
    ++r.checked;
  });
  return r;
}

}  // namespace gentle::nk
