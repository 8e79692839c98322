#include "proxattack/objective.hpp"

#include <algorithm>
#include <array>
#include <cmath>

namespace proxattack {
namespace {

struct LogitOrder {
  std::size_t first = 0;   // pi_1
  std::size_t third = 0;   // pi_3
  std::size_t runner = 0;  // argmax over k != excluded
};

/// Top-3 ordering with ties resolved towards the lower index.
LogitOrder order_logits(std::span<const double> z, std::size_t excluded) {
  const std::size_t k = z.size();
  if (k < 3) throw ConfigError("DLR constraint needs at least 3 classes");
  if (excluded >= k) throw ConfigError("label out of range for logits");
  std::array<std::size_t, 3> top{k, k, k};
  for (std::size_t i = 0; i < k; ++i) {
    for (std::size_t slot = 0; slot < 3; ++slot) {
      if (top[slot] == k || z[i] > z[top[slot]]) {
        for (std::size_t s = 2; s > slot; --s) top[s] = top[s - 1];
        top[slot] = i;
        break;
      }
    }
  }
  LogitOrder order;
  order.first = top[0];
  order.third = top[2];
  order.runner = top[0] != excluded ? top[0] : top[1];
  if (!(z[order.first] - z[order.third] > 0.0)) throw NumericError("degenerate logits");
  return order;
}

}  // namespace

double dlr_plus(std::span<const double> logits, std::size_t label) {
  const LogitOrder o = order_logits(logits, label);
  return (logits[label] - logits[o.runner]) / (logits[o.first] - logits[o.third]);
}

double dlr_targeted(std::span<const double> logits, std::size_t target) {
  const LogitOrder o = order_logits(logits, target);
  return (logits[o.runner] - logits[target]) / (logits[o.first] - logits[o.third]);
}

double constraint_with_grad(std::span<const double> logits, std::size_t label, bool targeted,
                            std::span<double> grad) {
  const LogitOrder o = order_logits(logits, label);
  const double denom = logits[o.first] - logits[o.third];
  const double sign = targeted ? -1.0 : 1.0;
  const double numer = sign * (logits[label] - logits[o.runner]);
  const double value = numer / denom;

  std::fill(grad.begin(), grad.end(), 0.0);
  grad[label] += sign / denom;
  grad[o.runner] -= sign / denom;
  grad[o.first] -= value / denom;
  grad[o.third] += value / denom;
  return value;
}

std::vector<double> evaluate_constraints(const TensorGrid& logits, const LabelMap& labels,
                                         bool targeted, double margin) {
  const Shape& s = logits.shape();
  if (labels.height() != s.height || labels.width() != s.width) {
    throw ConfigError("constraints: label map does not match logits " + s.str());
  }
  const std::size_t pixels = s.pixels();
  std::vector<double> z(s.channels);
  std::vector<double> out(pixels);
  for (std::size_t i = 0; i < pixels; ++i) {
    for (std::size_t k = 0; k < s.channels; ++k) z[k] = logits.at(k, i);
    out[i] = (targeted ? dlr_targeted(z, labels[i]) : dlr_plus(z, labels[i])) + margin;
  }
  return out;
}

TensorGrid constraints_vjp(const TensorGrid& logits, const LabelMap& labels, bool targeted,
                           std::span<const double> upstream) {
  const Shape& s = logits.shape();
  const std::size_t pixels = s.pixels();
  if (upstream.size() != pixels) throw ConfigError("constraints_vjp: upstream size mismatch");
  TensorGrid out(s);
  std::vector<double> z(s.channels), g(s.channels);
  for (std::size_t i = 0; i < pixels; ++i) {
    if (upstream[i] == 0.0) continue;
    for (std::size_t k = 0; k < s.channels; ++k) z[k] = logits.at(k, i);
    constraint_with_grad(z, labels[i], targeted, g);
    for (std::size_t k = 0; k < s.channels; ++k) out.at(k, i) = upstream[i] * g[k];
  }
  return out;
}

double penalty(double y, double rho, double mu) {
  if (y >= 0.0) return mu * y + mu * rho * y * y + rho * rho * y * y * y / 6.0;
  return mu * y / (1.0 - std::max(1.0, rho) * y);
}

double penalty_dy(double y, double rho, double mu) {
  if (y >= 0.0) return mu + 2.0 * mu * rho * y + 0.5 * rho * rho * y * y;
  const double denom = 1.0 - std::max(1.0, rho) * y;
  return mu / (denom * denom);
}

double mask_percentile_level(std::size_t t, std::size_t total, double nu) {
  if (total <= 1) return 1.0;
  if (t >= total) return nu;
  return 1.0 - (1.0 - nu) * static_cast<double>(t - 1) / static_cast<double>(total - 1);
}

double percentile_threshold(std::span<const double> values, const BinaryMask& mask, double q,
                            PercentileScope scope) {
  if (values.size() != mask.pixels()) throw ConfigError("percentile: shape mismatch");
  std::vector<double> selected;
  selected.reserve(scope == PercentileScope::MaskedOnly ? mask.count() : values.size());
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (scope == PercentileScope::AllPixels || mask[i]) selected.push_back(values[i]);
  }
  const double n = static_cast<double>(selected.size());
  auto rank = static_cast<std::size_t>(std::ceil(q * n - 1e-9));
  rank = std::clamp<std::size_t>(rank, 1, selected.size());
  std::nth_element(selected.begin(), selected.begin() + static_cast<std::ptrdiff_t>(rank - 1),
                   selected.end());
  return selected[rank - 1];
}

BinaryMask compute_mask(std::span<const double> constraints, const BinaryMask& mask,
                        std::size_t t, std::size_t total, double nu, PercentileScope scope) {
  if (t < 1 || t > total) throw ConfigError("compute_mask: iteration out of range");
  if (!(nu > 0.0 && nu <= 1.0)) throw ConfigError("compute_mask: nu must be in (0, 1]");
  const double q = mask_percentile_level(t, total, nu);
  if (q >= 1.0) return mask;
  const double xi = percentile_threshold(constraints, mask, q, scope);
  std::vector<std::uint8_t> bits(mask.pixels());
  for (std::size_t i = 0; i < bits.size(); ++i) bits[i] = mask[i] && constraints[i] <= xi;
  return BinaryMask(mask.height(), mask.width(), std::move(bits));
}

BinaryMask strategy_mask(MaskingStrategy strategy, std::span<const double> constraints,
                         const BinaryMask& mask, std::size_t t, std::size_t total, double nu,
                         PercentileScope scope) {
  switch (strategy) {
    case MaskingStrategy::Labeled:
      return mask;
    case MaskingStrategy::Fixed:
      // Constant level nu: the schedule evaluated at its last iteration.
      return compute_mask(constraints, mask, 2, 2, nu, scope);
    case MaskingStrategy::Scheduled:
      return compute_mask(constraints, mask, t, total, nu, scope);
  }
  return mask;
}

ScaleState update_scale(ScaleState state, double success_rate) {
  const double raw = success_rate < state.nu ? state.w / (1.0 - state.gamma_w)
                                             : state.w / (1.0 + state.gamma_w);
  state.w = std::clamp(raw, state.w_min, 1.0);
  return state;
}

PenaltyParams PenaltyParams::uniform(std::size_t pixels, double rho0, double mu0) {
  PenaltyParams p;
  p.rho.assign(pixels, rho0);
  p.mu.assign(pixels, mu0);
  return p;
}

PenaltyParams update_multipliers(PenaltyParams params, std::span<const double> constraints,
                                 double w, const BinaryMask& active) {
  const std::size_t n = constraints.size();
  if (params.mu.size() != n || params.rho.size() != n || active.pixels() != n) {
    throw ConfigError("update_multipliers: shape mismatch");
  }
  for (std::size_t i = 0; i < n; ++i) {
    const double mu_hat = active[i] ? w * penalty_dy(w * constraints[i], params.rho[i], params.mu[i]) : 0.0;
    params.mu[i] = std::clamp(params.alpha * params.mu[i] + (1.0 - params.alpha) * mu_hat,
                              params.mu_min, params.mu_max);
  }
  return params;
}

PenaltyParams update_rho(PenaltyParams params, const std::deque<std::vector<double>>& history,
                         const BinaryMask& active) {
  if (history.empty()) throw ConfigError("update_rho: empty constraint history");
  const std::size_t n = params.rho.size();
  const std::size_t m = params.check_period;
  const std::size_t newest = history.size() - 1;
  const std::vector<double>& current = history[newest];
  // d^(t - M), or the oldest recorded vector when fewer than M + 1 exist.
  const std::vector<double>& reference = history[newest >= m ? newest - m : 0];
  if (current.size() != n || active.pixels() != n) throw ConfigError("update_rho: shape mismatch");

  for (std::size_t i = 0; i < n; ++i) {
    bool satisfied = false;
    for (std::size_t j = 0; j < m && j <= newest; ++j) {
      if (history[newest - j][i] <= 0.0) {
        satisfied = true;
        break;
      }
    }
    const bool improved = current[i] <= params.improvement_rate * reference[i];
    if (!(active[i] && (satisfied || improved))) params.rho[i] *= params.gamma;
  }
  return params;
}

}  // namespace proxattack
