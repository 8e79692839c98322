#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "proxattack/core.hpp"
#include "proxattack/models.hpp"
#include "proxattack/objective.hpp"

namespace proxattack {

/// Everything an attack needs about one sample. `labels` holds y for
/// untargeted runs and the target map t for targeted runs.
struct AttackProblem {
  const SegmentationModel& model;
  const TensorGrid& image;
  const LabelMap& labels;
  const BinaryMask& mask;
  bool targeted = false;

  void validate() const;
};

struct TraceEntry {
  std::size_t iteration = 0;
  double apsr = 0.0;
  double norm = 0.0;       ///< ||delta||_inf of the evaluated iterate
  double best_norm = 1.0;  ///< smallest successful norm so far, 1 before any success
  double loss = 0.0;
  double scale = 1.0;            ///< ALMA constraint scale w
  double mean_multiplier = 0.0;  ///< ALMA mean mu, PDPGD total constraint weight
  double epsilon = 0.0;          ///< FMN radius or binary-search probe
};

struct AttackResult {
  TensorGrid best_delta;
  double best_norm = 1.0;  ///< 1 when no adversarial example was found
  bool success = false;
  std::vector<TraceEntry> trace;
  std::size_t forwards = 0;
  std::size_t backwards = 0;
};

// ---------------------------------------------------------------------------
// Variable metric (diagonal, Adam-like second-moment estimate)
// ---------------------------------------------------------------------------

/// v <- alpha v + (1 - alpha) g^2,  s = sqrt(v / (1 - alpha^t)) + eps.
class DiagonalMetric {
public:
  DiagonalMetric(std::size_t size, double alpha, double epsilon);

  /// Folds in a new gradient and returns the metric diagonal s for this step.
  const std::vector<double>& update(std::span<const double> gradient);
  /// delta - step * s^-1 * gradient, using the current diagonal.
  std::vector<double> forward_step(std::span<const double> delta, std::span<const double> gradient,
                                   double step) const;

  std::size_t steps() const { return t_; }
  const std::vector<double>& diagonal() const { return s_; }

private:
  double alpha_;
  double epsilon_;
  std::size_t t_ = 0;
  double alpha_power_ = 1.0;
  std::vector<double> v_;
  std::vector<double> s_;
};

// ---------------------------------------------------------------------------
// ALMA prox
// ---------------------------------------------------------------------------

struct AlmaProxConfig {
  std::size_t iterations = 500;
  double step_init = 1e-3;
  double step_final = 1e-4;
  double alpha = 0.8;
  double mu_init = 1.0;
  double rho_init = 0.01;
  double gamma = 2.0;
  double gamma_w = 0.02;
  double w_min = 0.1;
  double nu = 0.99;
  double prox_precision = 1e-5;
  double metric_epsilon = 1e-8;
  double mu_min = 1e-6;
  double mu_max = 1e6;
  double improvement_rate = 0.95;
  std::size_t check_period = 10;
  double constraint_margin = 0.0;
  MaskingStrategy masking = MaskingStrategy::Scheduled;
  PercentileScope percentile_scope = PercentileScope::MaskedOnly;
  bool record_trace = true;

  void validate() const;
};

/// Geometric decay from step_init at t = 0 to step_final at t = N.
double alma_step_size(const AlmaProxConfig& config, std::size_t t);

AttackResult alma_prox(const AttackProblem& problem, const AlmaProxConfig& config = {});

// ---------------------------------------------------------------------------
// DAG
// ---------------------------------------------------------------------------

struct DagConfig {
  double step = 0.003;  ///< eta
  std::size_t iterations = 500;
  double nu = 0.99;
};

AttackResult dag(const AttackProblem& problem, const DagConfig& config = {});

// ---------------------------------------------------------------------------
// Fixed-budget attacks and the binary search over epsilon
// ---------------------------------------------------------------------------

enum class PgdLoss { CrossEntropy, Dlr };

struct FgsmConfig {
  std::size_t steps = 20;
  double momentum = 1.0;  ///< MI-FGSM decay
};

struct PgdConfig {
  std::size_t steps = 40;
  std::size_t restarts = 1;
  PgdLoss loss = PgdLoss::CrossEntropy;
  std::uint64_t seed = 0;
};

/// Each returns a perturbation with ||delta||_inf <= eps and x + delta in [0,1].
TensorGrid ifgsm(const AttackProblem& problem, double eps, const FgsmConfig& config = {});
TensorGrid mifgsm(const AttackProblem& problem, double eps, const FgsmConfig& config = {});
TensorGrid pgd(const AttackProblem& problem, double eps, const PgdConfig& config = {});

using FixedBudgetAttack = std::function<TensorGrid(const AttackProblem&, double eps)>;

struct EpsilonSearch {
  double lower = 0.0;
  double upper = 1.0;
  std::size_t probes = 0;
  std::optional<TensorGrid> best;  ///< perturbation found at `upper`
};

/// Bisection on [0, 1]. `probe(eps)` returns a perturbation when the attack
/// at budget eps succeeds. Exactly `steps` probes; final bracket 2^-steps.
EpsilonSearch bisect_epsilon(const std::function<std::optional<TensorGrid>(double)>& probe,
                             std::size_t steps = 13);

AttackResult binary_search_attack(const AttackProblem& problem, const FixedBudgetAttack& inner,
                                  std::size_t steps = 13, double nu = 0.99);

// ---------------------------------------------------------------------------
// FMN (l_inf) and PDPGD (l_inf), adapted to per-pixel constraints
// ---------------------------------------------------------------------------

struct FmnConfig {
  std::size_t iterations = 500;
  double alpha_init = 10.0;
  double alpha_final = 0.1;
  double gamma_init = 0.05;
  double gamma_final = 0.001;
  double nu = 0.99;
};

AttackResult fmn_linf(const AttackProblem& problem, const FmnConfig& config = {});

struct PdpgdConfig {
  std::size_t iterations = 500;
  double primal_step = 0.01;
  double primal_decay = 0.01;  ///< primal step reaches primal_step * primal_decay at N
  double dual_step = 0.1;      ///< decays linearly to 0
  double ratio = 1.0;          ///< initial norm-to-constraint weight ratio r
  double alpha = 0.8;          ///< metric smoothing
  double metric_epsilon = 1e-8;
  double prox_precision = 1e-5;
  double nu = 0.99;
  MaskingStrategy masking = MaskingStrategy::Labeled;
};

/// omega = -log(r ||m||_1), so that m^T exp(omega 1) = 1 / r.
double pdpgd_initial_dual(std::size_t active_pixels, double ratio);

struct SimplexWeights {
  std::vector<double> constraint;  ///< lambda_Delta = m * exp(l) / (1 + m^T exp(l))
  double norm = 1.0;               ///< weight of the padded entry, equals 1 - m^T lambda_Delta
};

SimplexWeights simplex_weights(std::span<const double> log_dual, const BinaryMask& mask);

AttackResult pdpgd_linf(const AttackProblem& problem, const PdpgdConfig& config = {});

}  // namespace proxattack
