#include "attack_common.hpp"
#include "proxattack/attacks.hpp"
#include "proxattack/bench.hpp"

namespace proxattack {

EpsilonSearch bisect_epsilon(const std::function<std::optional<TensorGrid>(double)>& probe,
                             std::size_t steps) {
  if (steps == 0) throw ConfigError("binary search: steps must be positive");
  EpsilonSearch search;
  for (std::size_t i = 0; i < steps; ++i) {
    const double mid = 0.5 * (search.lower + search.upper);
    std::optional<TensorGrid> found = probe(mid);
    ++search.probes;
    if (found) {
      search.upper = mid;
      search.best = std::move(found);
    } else {
      search.lower = mid;
    }
  }
  return search;
}

AttackResult binary_search_attack(const AttackProblem& problem, const FixedBudgetAttack& inner,
                                  std::size_t steps, double nu) {
  problem.validate();
  if (!(nu > 0.0 && nu <= 1.0)) throw ConfigError("binary search: nu must be in (0, 1]");
  const detail::CallCounter counter(problem.model);
  AttackResult result;

  const auto probe = [&](double eps) -> std::optional<TensorGrid> {
    TensorGrid delta = inner(problem, eps);
    const double rate = evaluate_apsr(problem, delta);
    const bool ok = rate >= nu;
    TraceEntry e;
    e.iteration = result.trace.size() + 1;
    e.apsr = rate;
    e.norm = delta.linf_norm();
    e.epsilon = eps;
    e.best_norm = result.trace.empty() ? 1.0 : result.trace.back().best_norm;
    if (ok && e.norm < e.best_norm) e.best_norm = e.norm;
    result.trace.push_back(e);
    if (!ok) return std::nullopt;
    return delta;
  };

  EpsilonSearch search = bisect_epsilon(probe, steps);
  if (search.best) {
    result.success = true;
    result.best_delta = std::move(*search.best);
    result.best_norm = result.best_delta.linf_norm();
  } else {
    result.best_delta = TensorGrid(problem.image.shape());
    result.best_norm = 1.0;
  }
  counter.finish(result);
  return result;
}

}  // namespace proxattack
