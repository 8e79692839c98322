#pragma once

// Reference computations used by the tests. Written independently of the
// library code they check: no shared helpers beyond the core containers.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <numeric>
#include <vector>

#include "proxattack/core.hpp"
#include "proxattack/rng.hpp"

namespace oracle {

/// Marginal objective of the prox problem as a function of the sup-norm
/// bound beta, evaluated on a uniform grid of step `step` over [0, upper].
/// Returns the smallest grid value. O(n log n + grid) via sorted suffix sums.
struct GridResult {
  double objective = 0.0;
  double beta = 0.0;
};

inline GridResult prox_grid_search(const std::vector<double>& delta, const std::vector<double>& x,
                                   const std::vector<double>& metric, double lambda, double step) {
  const std::size_t n = delta.size();
  struct Item {
    double mag, s, signed_delta, delta_sq, const_term;
  };
  std::vector<Item> items(n);
  double upper = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double lo = -x[i], hi = 1.0 - x[i];
    const double p = delta[i] < lo ? lo : (delta[i] > hi ? hi : delta[i]);
    const double sign = p < 0.0 ? -1.0 : 1.0;
    items[i] = {std::abs(p), metric[i], sign * delta[i], delta[i] * delta[i],
                0.5 * metric[i] * (p - delta[i]) * (p - delta[i])};
    upper = std::max(upper, std::abs(p));
  }
  std::sort(items.begin(), items.end(), [](const Item& a, const Item& b) { return a.mag < b.mag; });

  // Entries with mag > beta are clipped to sign * beta:
  //   1/2 s (beta^2 - 2 sign delta beta + delta^2).
  double a2 = 0.0, a1 = 0.0, a0 = 0.0, fixed = 0.0;
  for (const auto& it : items) {
    a2 += 0.5 * it.s;
    a1 += it.s * it.signed_delta;
    a0 += 0.5 * it.s * it.delta_sq;
  }
  std::size_t k = 0;
  GridResult best{std::numeric_limits<double>::infinity(), 0.0};
  const auto points = static_cast<std::size_t>(std::floor(upper / step)) + 1;
  for (std::size_t g = 0; g <= points; ++g) {
    const double beta = std::min(upper, static_cast<double>(g) * step);
    while (k < n && items[k].mag <= beta) {
      a2 -= 0.5 * items[k].s;
      a1 -= items[k].s * items[k].signed_delta;
      a0 -= 0.5 * items[k].s * items[k].delta_sq;
      fixed += items[k].const_term;
      ++k;
    }
    const double f = fixed + a2 * beta * beta - a1 * beta + a0 + lambda * beta;
    if (f < best.objective) best = {f, beta};
  }
  return best;
}

/// 1/2 ||p - delta||_H^2 + lambda ||p||_inf, plain loops.
inline double prox_objective(const std::vector<double>& p, const std::vector<double>& delta,
                             const std::vector<double>& metric, double lambda) {
  double quad = 0.0, sup = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    quad += metric[i] * (p[i] - delta[i]) * (p[i] - delta[i]);
    sup = std::max(sup, std::abs(p[i]));
  }
  return 0.5 * quad + lambda * sup;
}

/// Euclidean projection onto the l1 ball by bisection on the soft threshold.
inline std::vector<double> project_l1_bisect(const std::vector<double>& v, double radius) {
  double l1 = 0.0, hi = 0.0;
  for (double a : v) {
    l1 += std::abs(a);
    hi = std::max(hi, std::abs(a));
  }
  if (l1 <= radius) return v;
  double lo = 0.0;
  for (int it = 0; it < 200; ++it) {
    const double mid = 0.5 * (lo + hi);
    double s = 0.0;
    for (double a : v) s += std::max(std::abs(a) - mid, 0.0);
    (s > radius ? lo : hi) = mid;
  }
  std::vector<double> out(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) {
    out[i] = std::copysign(std::max(std::abs(v[i]) - hi, 0.0), v[i]);
  }
  return out;
}

/// Argmax with ties to the lowest index.
inline std::size_t argmax(const std::vector<double>& z) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < z.size(); ++i) {
    if (z[i] > z[best]) best = i;
  }
  return best;
}

/// Adam with first-moment decay beta1 and second-moment decay beta2.
struct Adam {
  double beta1, beta2, eps;
  std::vector<double> m, v;
  int t = 0;

  Adam(std::size_t n, double b1, double b2, double e) : beta1(b1), beta2(b2), eps(e), m(n, 0.0), v(n, 0.0) {}

  void step(std::vector<double>& param, const std::vector<double>& grad, double lr) {
    ++t;
    for (std::size_t i = 0; i < param.size(); ++i) {
      m[i] = beta1 * m[i] + (1.0 - beta1) * grad[i];
      v[i] = beta2 * v[i] + (1.0 - beta2) * grad[i] * grad[i];
      const double mhat = m[i] / (1.0 - std::pow(beta1, t));
      const double vhat = v[i] / (1.0 - std::pow(beta2, t));
      param[i] -= lr * mhat / (std::sqrt(vhat) + eps);
    }
  }
};

/// Smallest eps such that some x' in [0,1]^C with ||x' - x||_inf <= eps gets a
/// score for class j at least that of class y, for a per-pixel affine model
/// z = W x + b (W row-major K x C). The best x' for a fixed eps moves every
/// coordinate by eps towards the sign of (w_j - w_y), clipped to the box, so
/// the margin is monotone in eps and bisection is exact up to `tol`.
inline double affine_boundary_distance(const std::vector<double>& w, const std::vector<double>& b,
                                       std::size_t classes, const std::vector<double>& x, std::size_t y,
                                       double tol = 1e-12) {
  const std::size_t c = x.size();
  double best = std::numeric_limits<double>::infinity();
  for (std::size_t j = 0; j < classes; ++j) {
    if (j == y) continue;
    const auto gap = [&](double eps) {
      double g = b[j] - b[y];
      for (std::size_t k = 0; k < c; ++k) {
        const double a = w[j * c + k] - w[y * c + k];
        const double moved = a > 0.0 ? std::min(1.0, x[k] + eps) : std::max(0.0, x[k] - eps);
        g += a * moved;
      }
      return g;
    };
    if (gap(1.0) < 0.0) continue;
    double lo = 0.0, hi = 1.0;
    if (gap(0.0) >= 0.0) return 0.0;
    while (hi - lo > tol) {
      const double mid = 0.5 * (lo + hi);
      (gap(mid) >= 0.0 ? hi : lo) = mid;
    }
    best = std::min(best, hi);
  }
  return best;
}

}  // namespace oracle
