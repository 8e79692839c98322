#include "proxattack/prox.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <functional>
#include <limits>
#include <vector>

namespace proxattack {
namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point start) {
  return std::chrono::duration<double>(Clock::now() - start).count();
}

double metric_at(const ProxProblem& problem, std::size_t i) {
  return problem.metric ? (*problem.metric)[i] : 1.0;
}

/// p(v) = argmin_{p in Lambda} 1/2 ||p - delta||_H^2 + <v, p> = proj_Lambda(delta - v / s).
void dual_to_primal(const ProxProblem& problem, std::span<const double> v, std::span<double> p) {
  const auto delta = problem.delta.values();
  const auto x = problem.anchor.values();
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double u = delta[i] - v[i] / metric_at(problem, i);
    p[i] = std::clamp(u, -x[i], 1.0 - x[i]);
  }
}

double linf_distance(std::span<const double> a, std::span<const double> b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

double min_metric(const ProxProblem& problem) {
  if (!problem.metric) return 1.0;
  const auto s = problem.metric->values();
  return *std::min_element(s.begin(), s.end());
}

ProxSolverReport finish(const ProxProblem& problem, std::vector<double> p, std::size_t iterations,
                        bool converged, Clock::time_point start) {
  ProxSolverReport report;
  report.iterations = iterations;
  report.converged = converged;
  report.solution = TensorGrid(problem.delta.shape(), std::move(p));
  report.beta_star = report.solution.linf_norm();
  report.objective = prox_objective(problem, report.solution.values());
  report.wall_time = seconds_since(start);
  return report;
}

/// Shared driver for the two dual forward-backward variants.
ProxSolverReport dual_forward_backward(const ProxProblem& problem,
                                       const IterativeProxOptions& options, bool accelerated) {
  problem.validate();
  if (!(options.stop_tol > 0.0)) throw ConfigError("stop_tol must be positive");
  const auto start = Clock::now();
  const std::size_t n = problem.delta.size();
  const double step = options.dual_step * min_metric(problem);

  std::vector<double> v(n, 0.0), v_prev(n, 0.0), y(n, 0.0);
  std::vector<double> p(n), p_next(n), p_y(n);
  dual_to_primal(problem, v, p);

  std::size_t iterations = 0;
  bool converged = false;
  while (iterations < options.max_iterations) {
    ++iterations;
    if (accelerated) {
      const double k = static_cast<double>(iterations);
      const double inertia = (k - 1.0) / (k + options.inertia_a);
      for (std::size_t i = 0; i < n; ++i) y[i] = v[i] + inertia * (v[i] - v_prev[i]);
      dual_to_primal(problem, y, p_y);
      v_prev = v;
      for (std::size_t i = 0; i < n; ++i) v[i] = y[i] + step * p_y[i];
    } else {
      for (std::size_t i = 0; i < n; ++i) v[i] += step * p[i];
    }
    project_l1_ball(v, problem.lambda);
    dual_to_primal(problem, v, p_next);
    const double change = linf_distance(p_next, p);
    p.swap(p_next);
    if (change <= options.stop_tol) {
      converged = true;
      break;
    }
  }
  return finish(problem, std::move(p), iterations, converged, start);
}

}  // namespace

void ProxProblem::validate() const {
  if (delta.empty()) throw ConfigError("prox problem: empty input");
  if (!(anchor.shape() == delta.shape())) throw ConfigError("prox problem: anchor shape mismatch");
  if (!(lambda > 0.0) || !std::isfinite(lambda)) throw ConfigError("prox problem: lambda must be positive");
  if (!(precision > 0.0)) throw ConfigError("prox problem: precision must be positive");
  for (double v : anchor.values()) {
    if (v < 0.0 || v > 1.0) throw ConfigError("prox problem: anchor outside [0,1]");
  }
  if (metric) {
    if (!(metric->shape() == delta.shape())) throw ConfigError("prox problem: metric shape mismatch");
    for (double s : metric->values()) {
      if (!(s > 0.0)) throw ConfigError("prox problem: metric must be strictly positive");
    }
  }
}

TensorGrid project_box(const TensorGrid& v, const TensorGrid& lo, const TensorGrid& hi) {
  if (!(lo.shape() == v.shape()) || !(hi.shape() == v.shape())) {
    throw ConfigError("project_box: shape mismatch");
  }
  TensorGrid out = v;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (lo[i] > hi[i]) throw ConfigError("project_box: lower bound exceeds upper bound at " + std::to_string(i));
    out[i] = std::clamp(v[i], lo[i], hi[i]);
  }
  return out;
}

TensorGrid project_box(const TensorGrid& v, double lo, double hi) {
  if (lo > hi) throw ConfigError("project_box: lower bound exceeds upper bound");
  TensorGrid out = v;
  for (double& e : out.values()) e = std::clamp(e, lo, hi);
  return out;
}

TensorGrid project_feasible(const TensorGrid& v, const TensorGrid& anchor) {
  if (!(anchor.shape() == v.shape())) throw ConfigError("project_feasible: shape mismatch");
  TensorGrid out = v;
  for (std::size_t i = 0; i < v.size(); ++i) out[i] = std::clamp(v[i], -anchor[i], 1.0 - anchor[i]);
  return out;
}

void project_l1_ball(std::span<double> v, double radius) {
  if (radius <= 0.0) {
    std::fill(v.begin(), v.end(), 0.0);
    return;
  }
  double l1 = 0.0;
  for (double e : v) l1 += std::abs(e);
  if (l1 <= radius) return;

  // Sort-based threshold search on the magnitudes.
  std::vector<double> mags(v.size());
  std::transform(v.begin(), v.end(), mags.begin(), [](double e) { return std::abs(e); });
  std::sort(mags.begin(), mags.end(), std::greater<>());
  double cumulative = 0.0;
  double theta = 0.0;
  for (std::size_t k = 0; k < mags.size(); ++k) {
    cumulative += mags[k];
    const double candidate = (cumulative - radius) / static_cast<double>(k + 1);
    if (k + 1 == mags.size() || mags[k + 1] <= candidate) {
      theta = candidate;
      break;
    }
  }
  for (double& e : v) e = std::copysign(std::max(std::abs(e) - theta, 0.0), e);
}

std::size_t ternary_iteration_count(double precision, double upper) {
  if (!(upper > 0.0) || upper <= precision) return 0;
  return static_cast<std::size_t>(std::ceil(std::log(precision / upper) / std::log(2.0 / 3.0)));
}

double prox_objective(const ProxProblem& problem, std::span<const double> p) {
  const auto delta = problem.delta.values();
  double quad = 0.0;
  double norm = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double diff = p[i] - delta[i];
    quad += metric_at(problem, i) * diff * diff;
    norm = std::max(norm, std::abs(p[i]));
  }
  return 0.5 * quad + problem.lambda * norm;
}

ProxSolverReport prox_ternary(const ProxProblem& problem) {
  problem.validate();
  const auto start = Clock::now();
  const std::size_t n = problem.delta.size();
  const auto delta = problem.delta.values();
  const auto x = problem.anchor.values();

  std::vector<double> projected(n);
  double upper = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    projected[i] = std::clamp(delta[i], -x[i], 1.0 - x[i]);
    upper = std::max(upper, std::abs(projected[i]));
  }

  const auto marginal = [&](double beta) {
    double quad = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const double diff = std::clamp(projected[i], -beta, beta) - delta[i];
      quad += metric_at(problem, i) * diff * diff;
    }
    return 0.5 * quad + problem.lambda * beta;
  };

  double lo = 0.0;
  double hi = upper;
  const std::size_t steps = ternary_iteration_count(problem.precision, upper);
  for (std::size_t t = 0; t < steps; ++t) {
    const double beta_lo = lo + (hi - lo) / 3.0;
    const double beta_hi = hi - (hi - lo) / 3.0;
    if (marginal(beta_lo) >= marginal(beta_hi)) {
      lo = beta_lo;
    } else {
      hi = beta_hi;
    }
  }
  const double beta = upper > 0.0 ? (lo + hi) / 2.0 : 0.0;

  std::vector<double> p(n);
  for (std::size_t i = 0; i < n; ++i) p[i] = std::clamp(projected[i], -beta, beta);

  ProxSolverReport report;
  report.solution = TensorGrid(problem.delta.shape(), std::move(p));
  report.beta_star = beta;
  report.objective = marginal(beta);
  report.iterations = steps;
  report.converged = true;
  report.wall_time = seconds_since(start);
  return report;
}

ProxSolverReport prox_dfb(const ProxProblem& problem, const IterativeProxOptions& options) {
  return dual_forward_backward(problem, options, false);
}

ProxSolverReport prox_adfb(const ProxProblem& problem, const IterativeProxOptions& options) {
  return dual_forward_backward(problem, options, true);
}

ProxSolverReport prox_dr(const ProxProblem& problem, const IterativeProxOptions& options) {
  problem.validate();
  if (!(options.stop_tol > 0.0)) throw ConfigError("stop_tol must be positive");
  const auto start = Clock::now();
  const std::size_t n = problem.delta.size();
  const auto delta = problem.delta.values();
  const auto x = problem.anchor.values();
  const double gamma = options.dr_gamma;

  // F = 1/2 ||. - delta||_H^2 + indicator(Lambda), G = lambda ||.||_inf.
  const auto prox_f = [&](std::span<const double> z, std::span<double> out) {
    for (std::size_t i = 0; i < n; ++i) {
      const double s = metric_at(problem, i);
      const double u = (gamma * s * delta[i] + z[i]) / (gamma * s + 1.0);
      out[i] = std::clamp(u, -x[i], 1.0 - x[i]);
    }
  };

  std::vector<double> z(delta.begin(), delta.end());
  std::vector<double> p(n), p_next(n), reflected(n), shrink(n);
  prox_f(z, p);

  std::size_t iterations = 0;
  bool converged = false;
  while (iterations < options.max_iterations) {
    ++iterations;
    for (std::size_t i = 0; i < n; ++i) reflected[i] = 2.0 * p[i] - z[i];
    // prox of gamma*lambda*||.||_inf via Moreau: u - proj_{B1(gamma*lambda)}(u).
    shrink = reflected;
    project_l1_ball(shrink, gamma * problem.lambda);
    // p can sit still on a box face while z drifts along the normal cone, so
    // the stopping test watches both.
    double z_change = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const double q = reflected[i] - shrink[i];
      const double step = options.relaxation * (q - p[i]);
      z[i] += step;
      z_change = std::max(z_change, std::abs(step));
    }
    prox_f(z, p_next);
    const double change = std::max(linf_distance(p_next, p), z_change);
    p.swap(p_next);
    if (change <= options.stop_tol) {
      converged = true;
      break;
    }
  }
  return finish(problem, std::move(p), iterations, converged, start);
}

}  // namespace proxattack
