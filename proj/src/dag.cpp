#include <algorithm>

#include "attack_common.hpp"
#include "proxattack/attacks.hpp"
#include "proxattack/bench.hpp"

namespace proxattack {

AttackResult dag(const AttackProblem& problem, const DagConfig& config) {
  problem.validate();
  if (!(config.step > 0.0)) throw ConfigError("dag: step must be positive");
  if (config.iterations == 0) throw ConfigError("dag: iterations must be positive");
  const detail::CallCounter counter(problem.model);
  const TensorGrid& x = problem.image;
  const Shape& shape = x.shape();
  const std::size_t pixels = shape.pixels();
  const double sign = problem.targeted ? -1.0 : 1.0;

  std::vector<double> delta(x.size(), 0.0);
  AttackResult result;
  bool stuck = false;
  TensorGrid perturbed;

  for (std::size_t t = 1; t <= config.iterations && !stuck; ++t) {
    std::vector<double> clipped(x.size());
    for (std::size_t i = 0; i < clipped.size(); ++i) clipped[i] = std::clamp(x[i] + delta[i], 0.0, 1.0);
    perturbed = TensorGrid(shape, clipped);
    const TensorGrid logits = problem.model.forward(perturbed);
    const std::size_t k = logits.shape().channels;

    // Margin per pixel and the runner-up class it was measured against.
    std::vector<double> margin(pixels);
    std::vector<std::size_t> runner(pixels);
    std::vector<std::uint8_t> fooled(pixels);
    for (std::size_t i = 0; i < pixels; ++i) {
      const std::size_t y = problem.labels[i];
      std::size_t best = y == 0 ? 1 : 0;
      for (std::size_t c = 0; c < k; ++c) {
        if (c != y && logits.at(c, i) > logits.at(best, i)) best = c;
      }
      runner[i] = best;
      margin[i] = sign * (logits.at(y, i) - logits.at(best, i));
      fooled[i] = margin[i] < 0.0;
    }

    const double rate = masked_fraction(fooled, problem.mask);
    const double norm = detail::linf(delta);
    double loss = 0.0;
    TensorGrid dz(logits.shape());
    for (std::size_t i = 0; i < pixels; ++i) {
      if (!problem.mask[i] || margin[i] <= 0.0) continue;
      loss += margin[i];
      dz.at(problem.labels[i], i) += sign;
      dz.at(runner[i], i) -= sign;
    }

    TraceEntry e;
    e.iteration = t;
    e.apsr = apsr(logits, problem.labels, problem.mask, problem.targeted);
    e.norm = norm;
    e.loss = loss;
    if (rate >= config.nu) {
      result.success = e.apsr >= config.nu;
      e.best_norm = result.success ? norm : 1.0;
      result.trace.push_back(e);
      break;
    }
    e.best_norm = 1.0;
    result.trace.push_back(e);
    if (t == config.iterations) break;

    TensorGrid grad = problem.model.vjp(perturbed, dz);
    detail::require_finite(grad.values(), "dag");
    // Chain through the clamp: no gradient where x + delta left [0, 1].
    for (std::size_t i = 0; i < delta.size(); ++i) {
      const double v = x[i] + delta[i];
      if (v < 0.0 || v > 1.0) grad[i] = 0.0;
    }
    const double scale = grad.linf_norm();
    if (scale == 0.0) {
      stuck = true;
      break;
    }
    for (std::size_t i = 0; i < delta.size(); ++i) delta[i] -= config.step * grad[i] / scale;
  }

  std::vector<double> effective(x.size());
  for (std::size_t i = 0; i < effective.size(); ++i) effective[i] = perturbed[i] - x[i];
  detail::clamp_to_image(effective, x);
  result.best_delta = TensorGrid(shape, std::move(effective));
  result.best_norm = result.success ? result.best_delta.linf_norm() : 1.0;
  counter.finish(result);
  return result;
}

}  // namespace proxattack
