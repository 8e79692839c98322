#include <cmath>

#include "attack_common.hpp"
#include "proxattack/attacks.hpp"
#include "proxattack/bench.hpp"
#include "proxattack/prox.hpp"

namespace proxattack {

double pdpgd_initial_dual(std::size_t active_pixels, double ratio) {
  if (!(ratio > 0.0)) throw ConfigError("pdpgd: ratio must be positive");
  if (active_pixels == 0) throw ConfigError("pdpgd: empty mask");
  return -std::log(ratio * static_cast<double>(active_pixels));
}

SimplexWeights simplex_weights(std::span<const double> log_dual, const BinaryMask& mask) {
  if (log_dual.size() != mask.pixels()) throw ConfigError("pdpgd: dual size mismatch");
  // Padded softmax: the norm term is the extra entry with logit 0.
  double shift = 0.0;
  for (std::size_t i = 0; i < log_dual.size(); ++i) {
    if (mask[i]) shift = std::max(shift, log_dual[i]);
  }
  SimplexWeights out;
  out.constraint.assign(log_dual.size(), 0.0);
  double total = std::exp(-shift);
  for (std::size_t i = 0; i < log_dual.size(); ++i) {
    if (!mask[i]) continue;
    out.constraint[i] = std::exp(log_dual[i] - shift);
    total += out.constraint[i];
  }
  for (double& v : out.constraint) v /= total;
  out.norm = std::exp(-shift) / total;
  return out;
}

AttackResult pdpgd_linf(const AttackProblem& problem, const PdpgdConfig& config) {
  problem.validate();
  if (config.iterations == 0) throw ConfigError("pdpgd: iterations must be positive");
  if (!(config.primal_step > 0.0 && config.primal_decay > 0.0 && config.dual_step >= 0.0)) {
    throw ConfigError("pdpgd: step sizes must be positive");
  }
  if (!(config.nu > 0.0 && config.nu <= 1.0)) throw ConfigError("pdpgd: nu must be in (0, 1]");
  const detail::CallCounter counter(problem.model);
  const TensorGrid& x = problem.image;
  const std::size_t pixels = x.shape().pixels();
  const double n_iter = static_cast<double>(config.iterations);

  TensorGrid delta(x.shape());
  DiagonalMetric metric(x.size(), config.alpha, config.metric_epsilon);
  std::vector<double> log_dual(pixels, pdpgd_initial_dual(problem.mask.count(), config.ratio));

  AttackResult result;
  result.best_delta = TensorGrid(x.shape());
  double best_norm = 1.0;

  for (std::size_t t = 1; t <= config.iterations; ++t) {
    const TensorGrid input = detail::add(x, delta);
    const TensorGrid logits = problem.model.forward(input);
    const std::vector<double> d = evaluate_constraints(logits, problem.labels, problem.targeted);
    const double rate = apsr(logits, problem.labels, problem.mask, problem.targeted);
    const double norm = delta.linf_norm();
    if (rate >= config.nu && (!result.success || norm < best_norm)) {
      result.success = true;
      result.best_delta = delta;
      best_norm = norm;
    }

    const BinaryMask active = strategy_mask(config.masking, d, problem.mask, t, config.iterations, config.nu);
    const SimplexWeights weights = simplex_weights(log_dual, active);
    double lagrangian = weights.norm * norm;
    for (std::size_t i = 0; i < pixels; ++i) lagrangian += weights.constraint[i] * d[i];

    TraceEntry e;
    e.iteration = t;
    e.apsr = rate;
    e.norm = norm;
    e.best_norm = best_norm;
    e.loss = lagrangian;
    e.mean_multiplier = 1.0 - weights.norm;  // m^T lambda_Delta
    result.trace.push_back(e);
    if (t == config.iterations) break;

    // Primal: metric gradient step on the constraint term, prox on the norm term.
    const TensorGrid dz = constraints_vjp(logits, problem.labels, problem.targeted, weights.constraint);
    const TensorGrid grad = problem.model.vjp(input, dz);
    detail::require_finite(grad.values(), "pdpgd");
    const std::vector<double>& s = metric.update(grad.values());
    const double step = config.primal_step * std::pow(config.primal_decay, static_cast<double>(t - 1) / n_iter);
    ProxProblem prox{TensorGrid(x.shape(), metric.forward_step(delta.values(), grad.values(), step)), x,
                     step * weights.norm, TensorGrid(x.shape(), s), config.prox_precision};
    delta = prox_ternary(prox).solution;
    detail::clamp_to_image(delta.values(), x);

    // Dual: ascent in the log domain along the constraint values.
    const double dual_step = config.dual_step * (1.0 - static_cast<double>(t - 1) / n_iter);
    for (std::size_t i = 0; i < pixels; ++i) {
      if (!active[i]) continue;
      log_dual[i] += dual_step * d[i];
    }
  }

  if (!result.success) result.best_delta = delta;
  result.best_norm = result.success ? best_norm : 1.0;
  counter.finish(result);
  return result;
}

}  // namespace proxattack
