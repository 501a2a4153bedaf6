#pragma once

// Adam with per-group learning-rate multipliers, a multi-step decay schedule,
// and the post-step projections that keep Gaussian parameters valid.

#include "d3ga/params.hpp"

#include <cmath>
#include <map>
#include <string>
#include <vector>

namespace d3ga {

struct AdamConfig {
  double lr = 5e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  /// Multiplier per parameter group; groups not listed use 1.
  std::map<std::string, double> group_lr;
};

/// lr · rate^(number of milestones ≤ step).
struct MultiStepSchedule {
  double base = 5e-4;
  double rate = 0.33;
  std::vector<int> milestones;

  double at(int step) const {
    double lr = base;
    for (int m : milestones)
      if (step >= m) lr *= rate;
    return lr;
  }
};

inline std::vector<int> milestones_from_fractions(const std::vector<double>& fractions, int steps) {
  std::vector<int> m;
  for (double f : fractions) m.push_back(static_cast<int>(std::lround(f * steps)));
  return m;
}

class Adam {
public:
  AdamConfig cfg;
  int t = 0;
  std::vector<std::vector<double>> m, v;

  Adam() = default;
  explicit Adam(AdamConfig c) : cfg(std::move(c)) {}

  void bind(const ParamList& params) {
    m.resize(params.size());
    v.resize(params.size());
    for (std::size_t i = 0; i < params.size(); ++i) {
      if (m[i].size() != params[i].size) m[i].assign(params[i].size, 0.0);
      if (v[i].size() != params[i].size) v[i].assign(params[i].size, 0.0);
    }
  }

  double multiplier(const std::string& group) const {
    const auto it = cfg.group_lr.find(group);
    return it == cfg.group_lr.end() ? 1.0 : it->second;
  }

  /// One update with learning rate `lr`. Moments advance even when lr is 0;
  /// parameters are left untouched in that case.
  void step(const ParamList& params, double lr) {
    bind(params);
    ++t;
    const double bc1 = 1.0 - std::pow(cfg.beta1, t);
    const double bc2 = 1.0 - std::pow(cfg.beta2, t);
    for (std::size_t i = 0; i < params.size(); ++i) {
      const auto& p = params[i];
      const double a = lr * multiplier(p.group);
      auto& mi = m[i];
      auto& vi = v[i];
      for (std::size_t k = 0; k < p.size; ++k) {
        const double g = p.grad[k];
        mi[k] = cfg.beta1 * mi[k] + (1.0 - cfg.beta1) * g;
        vi[k] = cfg.beta2 * vi[k] + (1.0 - cfg.beta2) * g * g;
        if (a == 0.0) continue;
        p.data[k] -= a * (mi[k] / bc1) / (std::sqrt(vi[k] / bc2) + cfg.eps);
      }
    }
  }

  /// Index of the first moment buffer for the named parameter, or -1.
  static int find(const ParamList& params, const std::string& name) {
    for (std::size_t i = 0; i < params.size(); ++i)
      if (params[i].name == name) return static_cast<int>(i);
    return -1;
  }
};

// ---------------------------------------------------------------------------
// Projections

/// Closest point (Euclidean) with Σb = 1 and lo ≤ b ≤ hi, by bisection on the
/// shift. Columns already feasible within `tol` are left bitwise unchanged.
inline bool project_barycentric(double* b, double lo = -0.2, double hi = 1.2, double tol = 1e-12) {
  double s = 0;
  bool in_box = true;
  for (int k = 0; k < 4; ++k) {
    s += b[k];
    in_box = in_box && b[k] >= lo - tol && b[k] <= hi + tol;
  }
  if (in_box && std::abs(s - 1.0) <= tol) return false;
  auto sum_at = [&](double shift) {
    double r = 0;
    for (int k = 0; k < 4; ++k) r += std::clamp(b[k] - shift, lo, hi);
    return r;
  };
  double a = -2.0 - std::abs(hi) - std::abs(lo), c = -a;
  for (int k = 0; k < 4; ++k) {
    a = std::min(a, b[k] - hi - 1.0);
    c = std::max(c, b[k] - lo + 1.0);
  }
  for (int it = 0; it < 200; ++it) {
    const double mid = 0.5 * (a + c);
    if (sum_at(mid) > 1.0)
      a = mid;
    else
      c = mid;
  }
  const double shift = 0.5 * (a + c);
  for (int k = 0; k < 4; ++k) b[k] = std::clamp(b[k] - shift, lo, hi);
  // Remove the residual of the bisection from a free coordinate.
  double r = 1.0;
  for (int k = 0; k < 4; ++k) r -= b[k];
  for (int k = 0; k < 4 && r != 0.0; ++k) {
    const double nb = std::clamp(b[k] + r, lo, hi);
    r -= nb - b[k];
    b[k] = nb;
  }
  return true;
}

/// Renormalizes (if off by more than `tol`) and moves to the w ≥ 0 hemisphere.
/// A sign flip also flips the matching Adam first moment so the update
/// direction stays consistent; second moments are sign-invariant.
inline bool canonicalize_quaternion(double* q, double* adam_m = nullptr, double tol = 1e-12) {
  bool changed = false;
  double n2 = 0;
  for (int k = 0; k < 4; ++k) n2 += q[k] * q[k];
  const double n = std::sqrt(n2);
  if (!(n > 0)) {
    q[0] = 1;
    q[1] = q[2] = q[3] = 0;
    return true;
  }
  if (std::abs(n - 1.0) > tol) {
    for (int k = 0; k < 4; ++k) q[k] /= n;
    changed = true;
  }
  if (q[0] < 0) {
    for (int k = 0; k < 4; ++k) {
      q[k] = -q[k];
      if (adam_m) adam_m[k] = -adam_m[k];
    }
    changed = true;
  }
  return changed;
}

} // namespace d3ga
