#pragma once

#include <cstddef>
#include <optional>
#include <span>

#include "proxattack/core.hpp"

namespace proxattack {

// Proximity operator of g = lambda * ||.||_inf + indicator(Lambda), with
// Lambda = [0,1]^n - anchor, optionally in a diagonal metric H = Diag(s):
//
//   prox(delta) = argmin_p  1/2 ||p - delta||_H^2 + lambda ||p||_inf,  p in Lambda.

struct ProxProblem {
  TensorGrid delta;
  TensorGrid anchor;  ///< image x in [0,1]; defines Lambda
  double lambda = 1.0;
  std::optional<TensorGrid> metric;  ///< diagonal of H, strictly positive
  double precision = 1e-5;           ///< ternary-search tolerance on beta

  /// Throws ConfigError if shapes or parameter ranges are invalid.
  void validate() const;
};

struct ProxSolverReport {
  TensorGrid solution;
  double beta_star = 0.0;
  double objective = 0.0;
  std::size_t iterations = 0;
  double wall_time = 0.0;  ///< seconds
  bool converged = true;
};

struct IterativeProxOptions {
  double stop_tol = 1e-5;  ///< on ||p(t+1) - p(t)||_inf
  std::size_t max_iterations = 10000;
  double dual_step = 1.0;   ///< DFB/ADFB step, in units of 1/L
  double inertia_a = 3.0;   ///< ADFB inertial parameter, alpha_n = (n-1)/(n+a)
  double dr_gamma = 1.0;    ///< DR prox step
  double relaxation = 1.0;  ///< DR relaxation
};

/// Componentwise clamp to [lo, hi]. Throws ConfigError if lo > hi anywhere.
TensorGrid project_box(const TensorGrid& v, const TensorGrid& lo, const TensorGrid& hi);
TensorGrid project_box(const TensorGrid& v, double lo, double hi);

/// proj_Lambda(v) with Lambda = [0,1]^n - anchor. The same map under any
/// positive diagonal metric, since the problem is separable.
TensorGrid project_feasible(const TensorGrid& v, const TensorGrid& anchor);

/// Euclidean projection onto {u : ||u||_1 <= radius}, in place.
void project_l1_ball(std::span<double> v, double radius);

/// ceil(log(precision / upper) / log(2/3)), clamped at zero.
std::size_t ternary_iteration_count(double precision, double upper);

/// 1/2 ||p - delta||_H^2 + lambda ||p||_inf (the box is not checked).
double prox_objective(const ProxProblem& problem, std::span<const double> p);

/// Ternary search over beta on the marginal objective.
ProxSolverReport prox_ternary(const ProxProblem& problem);

/// Dual forward-backward splitting.
ProxSolverReport prox_dfb(const ProxProblem& problem, const IterativeProxOptions& options = {});
/// Dual forward-backward with Nesterov-type inertia on the dual.
ProxSolverReport prox_adfb(const ProxProblem& problem, const IterativeProxOptions& options = {});
/// Douglas-Rachford splitting.
ProxSolverReport prox_dr(const ProxProblem& problem, const IterativeProxOptions& options = {});

}  // namespace proxattack
