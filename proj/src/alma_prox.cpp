#include <cmath>
#include <deque>

#include "attack_common.hpp"
#include "proxattack/attacks.hpp"
#include "proxattack/bench.hpp"
#include "proxattack/prox.hpp"

namespace proxattack {

void AttackProblem::validate() const {
  require_same_pixels(image, labels, mask);
  if (!(image.shape() == model.input_shape())) {
    throw ConfigError("image shape " + image.shape().str() + " does not match model input " +
                      model.input_shape().str());
  }
  if (labels.num_classes() > model.num_classes()) {
    throw ConfigError("label map declares more classes than the model outputs");
  }
  for (double v : image.values()) {
    if (v < 0.0 || v > 1.0) throw ConfigError("image values must lie in [0, 1]");
  }
}

DiagonalMetric::DiagonalMetric(std::size_t size, double alpha, double epsilon)
    : alpha_(alpha), epsilon_(epsilon), v_(size, 0.0), s_(size, 1.0) {
  if (!(alpha >= 0.0 && alpha < 1.0)) throw ConfigError("metric smoothing must be in [0, 1)");
  if (!(epsilon > 0.0)) throw ConfigError("metric epsilon must be positive");
}

const std::vector<double>& DiagonalMetric::update(std::span<const double> gradient) {
  if (gradient.size() != v_.size()) throw ConfigError("metric: gradient size mismatch");
  ++t_;
  alpha_power_ *= alpha_;
  const double correction = 1.0 - alpha_power_;
  for (std::size_t i = 0; i < v_.size(); ++i) {
    v_[i] = alpha_ * v_[i] + (1.0 - alpha_) * gradient[i] * gradient[i];
    s_[i] = std::sqrt(v_[i] / correction) + epsilon_;
  }
  return s_;
}

std::vector<double> DiagonalMetric::forward_step(std::span<const double> delta,
                                                 std::span<const double> gradient, double step) const {
  std::vector<double> out(delta.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = delta[i] - step * gradient[i] / s_[i];
  return out;
}

void AlmaProxConfig::validate() const {
  if (iterations == 0) throw ConfigError("alma_prox: iterations must be positive");
  if (!(step_init > 0.0 && step_final > 0.0)) throw ConfigError("alma_prox: step sizes must be positive");
  if (!(alpha >= 0.0 && alpha < 1.0)) throw ConfigError("alma_prox: alpha must be in [0, 1)");
  if (!(nu > 0.0 && nu <= 1.0)) throw ConfigError("alma_prox: nu must be in (0, 1]");
  if (!(w_min > 0.0 && w_min <= 1.0)) throw ConfigError("alma_prox: w_min must be in (0, 1]");
  if (!(gamma_w >= 0.0 && gamma_w < 1.0)) throw ConfigError("alma_prox: gamma_w must be in [0, 1)");
  if (!(gamma >= 1.0)) throw ConfigError("alma_prox: gamma must be >= 1");
  if (!(mu_min > 0.0 && mu_min <= mu_init && mu_init <= mu_max)) {
    throw ConfigError("alma_prox: need 0 < mu_min <= mu_init <= mu_max");
  }
  if (!(rho_init > 0.0)) throw ConfigError("alma_prox: rho_init must be positive");
  if (!(prox_precision > 0.0)) throw ConfigError("alma_prox: prox precision must be positive");
  if (check_period == 0) throw ConfigError("alma_prox: check period must be positive");
}

double alma_step_size(const AlmaProxConfig& config, std::size_t t) {
  const double frac = static_cast<double>(t) / static_cast<double>(config.iterations);
  return config.step_init * std::pow(config.step_final / config.step_init, frac);
}

AttackResult alma_prox(const AttackProblem& problem, const AlmaProxConfig& config) {
  problem.validate();
  config.validate();
  const detail::CallCounter counter(problem.model);
  const TensorGrid& x = problem.image;
  const std::size_t pixels = x.shape().pixels();
  const std::size_t n = x.size();

  TensorGrid delta(x.shape());
  DiagonalMetric metric(n, config.alpha, config.metric_epsilon);
  ScaleState scale{1.0, config.gamma_w, config.w_min, config.nu};
  PenaltyParams params = PenaltyParams::uniform(pixels, config.rho_init, config.mu_init);
  params.mu_min = config.mu_min;
  params.mu_max = config.mu_max;
  params.gamma = config.gamma;
  params.check_period = config.check_period;
  params.improvement_rate = config.improvement_rate;
  params.alpha = config.alpha;
  std::deque<std::vector<double>> history;

  AttackResult result;
  result.best_delta = TensorGrid(x.shape());
  double best_norm = 1.0;

  std::vector<double> upstream(pixels);
  for (std::size_t t = 1; t <= config.iterations; ++t) {
    const TensorGrid logits = problem.model.forward(detail::add(x, delta));
    const std::vector<double> d =
        evaluate_constraints(logits, problem.labels, problem.targeted, config.constraint_margin);

    const double rate = apsr(logits, problem.labels, problem.mask, problem.targeted);
    const double norm = delta.linf_norm();
    if (rate >= config.nu && (!result.success || norm < best_norm)) {
      result.success = true;
      result.best_delta = delta;
      best_norm = norm;
    }

    std::vector<std::uint8_t> satisfied(pixels);
    for (std::size_t i = 0; i < pixels; ++i) satisfied[i] = d[i] <= 0.0;
    scale = update_scale(scale, masked_fraction(satisfied, problem.mask));
    const double w = scale.w;

    const BinaryMask active =
        strategy_mask(config.masking, d, problem.mask, t, config.iterations, config.nu, config.percentile_scope);
    params = update_multipliers(std::move(params), d, w, active);
    history.push_back(d);
    if (history.size() > config.check_period + 1) history.pop_front();
    if (t % config.check_period == 0) params = update_rho(std::move(params), history, active);

    double loss = 0.0;
    double mu_sum = 0.0;
    for (std::size_t i = 0; i < pixels; ++i) {
      mu_sum += params.mu[i];
      if (!active[i]) {
        upstream[i] = 0.0;
        continue;
      }
      loss += penalty(w * d[i], params.rho[i], params.mu[i]);
      upstream[i] = w * penalty_dy(w * d[i], params.rho[i], params.mu[i]);
    }

    const TensorGrid dz = constraints_vjp(logits, problem.labels, problem.targeted, upstream);
    const TensorGrid grad = problem.model.vjp(detail::add(x, delta), dz);
    detail::require_finite(grad.values(), "alma_prox");

    const std::vector<double>& s = metric.update(grad.values());
    const double step = alma_step_size(config, t);
    ProxProblem prox{TensorGrid(x.shape(), metric.forward_step(delta.values(), grad.values(), step)), x, step,
                     TensorGrid(x.shape(), s), config.prox_precision};
    delta = prox_ternary(prox).solution;
    detail::clamp_to_image(delta.values(), x);

    if (config.record_trace) {
      TraceEntry e;
      e.iteration = t;
      e.apsr = rate;
      e.norm = norm;
      e.best_norm = best_norm;
      e.loss = loss;
      e.scale = w;
      e.mean_multiplier = mu_sum / static_cast<double>(pixels);
      result.trace.push_back(e);
    }
  }

  if (!result.success) result.best_delta = delta;
  result.best_norm = result.success ? best_norm : 1.0;
  counter.finish(result);
  return result;
}

}  // namespace proxattack
