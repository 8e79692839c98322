#include <cmath>

#include "attack_common.hpp"
#include "proxattack/attacks.hpp"
#include "proxattack/bench.hpp"
#include "proxattack/losses.hpp"
#include "proxattack/rng.hpp"

namespace proxattack {
namespace {

void check_budget(const AttackProblem& problem, double eps, std::size_t steps) {
  problem.validate();
  if (!(eps >= 0.0)) throw ConfigError("attack budget must be non-negative");
  if (steps == 0) throw ConfigError("number of steps must be positive");
}

/// Gradient w.r.t. the input of the loss the attacker ascends.
TensorGrid ascent_gradient(const AttackProblem& problem, const TensorGrid& input, PgdLoss kind,
                           double* loss_out = nullptr, double* apsr_out = nullptr) {
  const TensorGrid logits = problem.model.forward(input);
  TensorGrid dz;
  double loss = 0.0;
  if (kind == PgdLoss::CrossEntropy) {
    loss = masked_cross_entropy(logits, problem.labels, problem.mask, &dz);
    if (problem.targeted) {
      loss = -loss;
      for (double& v : dz.values()) v = -v;
    }
  } else {
    loss = -masked_dlr(logits, problem.labels, problem.mask, problem.targeted, &dz);
    for (double& v : dz.values()) v = -v;
  }
  if (loss_out) *loss_out = loss;
  if (apsr_out) *apsr_out = apsr(logits, problem.labels, problem.mask, problem.targeted);
  TensorGrid grad = problem.model.vjp(input, dz);
  detail::require_finite(grad.values(), "fixed-budget attack");
  return grad;
}

double sign_of(double v) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); }

TensorGrid fgsm_family(const AttackProblem& problem, double eps, const FgsmConfig& config, bool momentum) {
  check_budget(problem, eps, config.steps);
  const TensorGrid& x = problem.image;
  const double step = eps / static_cast<double>(config.steps);
  TensorGrid delta(x.shape());
  std::vector<double> velocity(x.size(), 0.0);
  for (std::size_t s = 0; s < config.steps; ++s) {
    const TensorGrid grad = ascent_gradient(problem, detail::add(x, delta), PgdLoss::CrossEntropy);
    if (momentum) {
      const double norm = detail::l1(grad.values());
      for (std::size_t i = 0; i < velocity.size(); ++i) {
        velocity[i] = config.momentum * velocity[i] + (norm > 0.0 ? grad[i] / norm : 0.0);
      }
    }
    for (std::size_t i = 0; i < delta.size(); ++i) {
      delta[i] += step * sign_of(momentum ? velocity[i] : grad[i]);
    }
    detail::project_ball_and_box(delta.values(), x, eps);
  }
  return delta;
}

}  // namespace

TensorGrid ifgsm(const AttackProblem& problem, double eps, const FgsmConfig& config) {
  return fgsm_family(problem, eps, config, false);
}

TensorGrid mifgsm(const AttackProblem& problem, double eps, const FgsmConfig& config) {
  return fgsm_family(problem, eps, config, true);
}

TensorGrid pgd(const AttackProblem& problem, double eps, const PgdConfig& config) {
  check_budget(problem, eps, config.steps);
  if (config.restarts == 0) throw ConfigError("pgd: restarts must be positive");
  const TensorGrid& x = problem.image;
  const double step = 2.0 * eps / static_cast<double>(config.steps);
  Rng rng(config.seed);

  TensorGrid best(x.shape());
  double best_rate = -1.0;
  const auto consider = [&](const TensorGrid& delta, double rate) {
    if (rate > best_rate) {
      best_rate = rate;
      best = delta;
    }
  };

  for (std::size_t r = 0; r < config.restarts; ++r) {
    TensorGrid delta(x.shape());
    if (config.restarts > 1) {
      for (double& v : delta.values()) v = rng.uniform(-eps, eps);
      detail::project_ball_and_box(delta.values(), x, eps);
    }
    for (std::size_t s = 0; s < config.steps; ++s) {
      double rate = 0.0;
      const TensorGrid grad = ascent_gradient(problem, detail::add(x, delta), config.loss, nullptr, &rate);
      consider(delta, rate);
      for (std::size_t i = 0; i < delta.size(); ++i) delta[i] += step * sign_of(grad[i]);
      detail::project_ball_and_box(delta.values(), x, eps);
    }
    consider(delta, evaluate_apsr(problem, delta));
  }
  return best;
}

}  // namespace proxattack
