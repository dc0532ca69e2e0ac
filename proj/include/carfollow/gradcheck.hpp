#pragma once

#include <cmath>
#include <functional>
#include <span>
#include <vector>

namespace carfollow::diff {

struct GradCheckResult {
  double max_rel_err = 0.0;
  bool finite = true;  // false if f was non-finite at any perturbed point
  long worst_coord = -1;
};

// Central-difference verification of an analytic gradient. The relative error
// for coordinate i is |analytic_i - fd_i| / (|analytic_i| + floor); the floor
// keeps near-zero components from blowing up the ratio. Functions with kinks
// at the evaluation point show up as large errors, non-finite values at
// perturbed points as finite=false.
inline GradCheckResult grad_check(
    const std::function<double(std::span<const double>)>& f,
    std::span<const double> analytic, std::span<const double> x, double step,
    double floor = 1e-8) {
  GradCheckResult res;
  std::vector<double> p(x.begin(), x.end());
  for (size_t i = 0; i < p.size(); ++i) {
    double xi = p[i];
    p[i] = xi + step;
    double fp = f(p);
    p[i] = xi - step;
    double fm = f(p);
    p[i] = xi;
    if (!std::isfinite(fp) || !std::isfinite(fm)) {
      res.finite = false;
      res.worst_coord = static_cast<long>(i);
      continue;
    }
    double fd = (fp - fm) / (2.0 * step);
    double rel = std::abs(analytic[i] - fd) / (std::abs(analytic[i]) + floor);
    if (rel > res.max_rel_err) {
      res.max_rel_err = rel;
      res.worst_coord = static_cast<long>(i);
    }
  }
  return res;
}

}  // namespace carfollow::diff
