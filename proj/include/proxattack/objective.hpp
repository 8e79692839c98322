#pragma once

#include <cstddef>
#include <deque>
#include <span>
#include <vector>

#include "proxattack/core.hpp"

namespace proxattack {

// ---------------------------------------------------------------------------
// Per-pixel constraints
// ---------------------------------------------------------------------------

/// (z_y - max_{i != y} z_i) / (z_pi1 - z_pi3), pi_k the index of the k-th
/// largest logit. Negative iff argmax != y. Requires K >= 3 and non-flat logits.
double dlr_plus(std::span<const double> logits, std::size_t label);

/// (max_{k != t} z_k - z_t) / (z_pi1 - z_pi3). Negative iff argmax == t.
double dlr_targeted(std::span<const double> logits, std::size_t target);

/// Constraint value and its gradient w.r.t. the K logits of one pixel.
double constraint_with_grad(std::span<const double> logits, std::size_t label, bool targeted,
                            std::span<double> grad);

/// Constraint values d_i (+ margin) for every pixel of a (K, H, W) logits grid.
std::vector<double> evaluate_constraints(const TensorGrid& logits, const LabelMap& labels,
                                         bool targeted, double margin = 0.0);

/// Backpropagates per-pixel weights dL/dd_i to dL/dz, shape (K, H, W).
TensorGrid constraints_vjp(const TensorGrid& logits, const LabelMap& labels, bool targeted,
                           std::span<const double> upstream);

// ---------------------------------------------------------------------------
// Penalty-Lagrangian function
// ---------------------------------------------------------------------------

/// mu*y + mu*rho*y^2 + rho^2*y^3/6 for y >= 0, mu*y / (1 - max(1, rho)*y) otherwise.
double penalty(double y, double rho, double mu);
/// d/dy of penalty().
double penalty_dy(double y, double rho, double mu);

// ---------------------------------------------------------------------------
// Augmented Lagrangian controller
// ---------------------------------------------------------------------------

enum class MaskingStrategy {
  Labeled,    ///< m: only the validity mask
  Fixed,      ///< m~: drop the largest (1 - nu) fraction every iteration
  Scheduled,  ///< m~(t): percentile decays linearly from 100% to nu
};

enum class PercentileScope {
  MaskedOnly,  ///< percentile over {d_i : m_i = 1}
  AllPixels,   ///< percentile over every d_i
};

/// 1 - (1 - nu) * (t - 1) / (N - 1); 1 when N == 1.
double mask_percentile_level(std::size_t t, std::size_t total, double nu);

/// Nearest-rank q-percentile of the selected values.
double percentile_threshold(std::span<const double> values, const BinaryMask& mask, double q,
                            PercentileScope scope = PercentileScope::MaskedOnly);

/// m~_i = m_i and d_i <= xi, with xi the level-q percentile for iteration t of N.
BinaryMask compute_mask(std::span<const double> constraints, const BinaryMask& mask,
                        std::size_t t, std::size_t total, double nu,
                        PercentileScope scope = PercentileScope::MaskedOnly);

/// Mask for iteration t under the given strategy.
BinaryMask strategy_mask(MaskingStrategy strategy, std::span<const double> constraints,
                         const BinaryMask& mask, std::size_t t, std::size_t total, double nu,
                         PercentileScope scope = PercentileScope::MaskedOnly);

struct ScaleState {
  double w = 1.0;
  double gamma_w = 0.02;
  double w_min = 0.1;
  double nu = 0.99;
};

/// Grows w by 1/(1 - gamma_w) when success_rate < nu, shrinks it by
/// 1/(1 + gamma_w) otherwise, then clamps to [w_min, 1].
ScaleState update_scale(ScaleState state, double success_rate);

struct PenaltyParams {
  std::vector<double> rho;
  std::vector<double> mu;
  double mu_min = 1e-6;
  double mu_max = 1e6;
  double gamma = 2.0;             ///< rho growth factor
  std::size_t check_period = 10;  ///< M
  double improvement_rate = 0.95; ///< tau
  double alpha = 0.8;             ///< multiplier smoothing

  static PenaltyParams uniform(std::size_t pixels, double rho0, double mu0);
};

/// mu_hat_i = m~_i * w * P'(w d_i, rho_i, mu_i);
/// mu_i <- clamp(alpha mu_i + (1 - alpha) mu_hat_i, mu_min, mu_max).
PenaltyParams update_multipliers(PenaltyParams params, std::span<const double> constraints,
                                 double w, const BinaryMask& active);

/// Rho schedule at a check iteration. `history` holds constraint vectors,
/// oldest first, newest last; at most M + 1 of the most recent are used. A
/// pixel keeps its rho when active and either satisfied at some point in the
/// last M iterations or improved by tau against M iterations ago; every
/// other pixel gets rho <- gamma * rho.
PenaltyParams update_rho(PenaltyParams params, const std::deque<std::vector<double>>& history,
                         const BinaryMask& active);

}  // namespace proxattack
