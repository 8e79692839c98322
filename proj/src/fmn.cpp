#include <cmath>
#include <numbers>

#include "attack_common.hpp"
#include "proxattack/attacks.hpp"
#include "proxattack/bench.hpp"
#include "proxattack/losses.hpp"

namespace proxattack {
namespace {

double cosine_anneal(double start, double end, std::size_t t, std::size_t total) {
  const double frac = static_cast<double>(t) / static_cast<double>(total);
  return end + 0.5 * (start - end) * (1.0 + std::cos(std::numbers::pi * frac));
}

}  // namespace

AttackResult fmn_linf(const AttackProblem& problem, const FmnConfig& config) {
  problem.validate();
  if (config.iterations == 0) throw ConfigError("fmn: iterations must be positive");
  if (!(config.alpha_init > 0.0 && config.alpha_final > 0.0)) throw ConfigError("fmn: alpha must be positive");
  if (!(config.gamma_init >= 0.0 && config.gamma_init < 1.0 && config.gamma_final >= 0.0)) {
    throw ConfigError("fmn: gamma must be in [0, 1)");
  }
  if (!(config.nu > 0.0 && config.nu <= 1.0)) throw ConfigError("fmn: nu must be in (0, 1]");
  const detail::CallCounter counter(problem.model);
  const TensorGrid& x = problem.image;

  TensorGrid delta(x.shape());
  AttackResult result;
  result.best_delta = TensorGrid(x.shape());
  double best_norm = 1.0;
  double eps = 0.0;

  for (std::size_t t = 1; t <= config.iterations; ++t) {
    const TensorGrid input = detail::add(x, delta);
    const TensorGrid logits = problem.model.forward(input);
    const double rate = apsr(logits, problem.labels, problem.mask, problem.targeted);
    const double norm = delta.linf_norm();
    const bool adversarial = rate >= config.nu;
    if (adversarial && (!result.success || norm < best_norm)) {
      result.success = true;
      result.best_delta = delta;
      best_norm = norm;
    }

    TraceEntry e;
    e.iteration = t;
    e.apsr = rate;
    e.norm = norm;
    e.best_norm = best_norm;
    if (t == config.iterations) {
      e.epsilon = eps;
      result.trace.push_back(e);
      break;
    }

    TensorGrid dz;
    const double loss = masked_logit_margin(logits, problem.labels, problem.mask, problem.targeted, &dz);
    const TensorGrid grad = problem.model.vjp(input, dz);
    detail::require_finite(grad.values(), "fmn");

    const double gamma = cosine_anneal(config.gamma_init, config.gamma_final, t - 1, config.iterations);
    const double alpha = cosine_anneal(config.alpha_init, config.alpha_final, t - 1, config.iterations);
    if (adversarial) {
      eps = std::min(eps * (1.0 - gamma), best_norm);
    } else if (result.success) {
      eps = eps * (1.0 + gamma);
    } else {
      const double dual = detail::l1(grad.values());
      eps = dual > 0.0 ? norm + std::abs(loss) / dual : norm;
    }
    eps = std::clamp(eps, 0.0, 1.0);
    e.epsilon = eps;
    e.loss = loss;
    result.trace.push_back(e);

    const double g2 = detail::l2(grad.values());
    if (g2 > 0.0) {
      for (std::size_t i = 0; i < delta.size(); ++i) delta[i] -= alpha * grad[i] / g2;
    }
    detail::project_ball_and_box(delta.values(), x, eps);
  }

  if (!result.success) result.best_delta = delta;
  result.best_norm = result.success ? best_norm : 1.0;
  counter.finish(result);
  return result;
}

}  // namespace proxattack
