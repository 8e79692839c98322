#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "proxattack/attacks.hpp"
#include "proxattack/core.hpp"
#include "proxattack/prox.hpp"

namespace proxattack {

// ---------------------------------------------------------------------------
// Per-sample metrics
// ---------------------------------------------------------------------------

/// 1 where the pixel is fooled: argmax != y (untargeted) or argmax == t
/// (targeted). Argmax ties resolve to the lowest class index.
std::vector<std::uint8_t> fooled_pixels(const TensorGrid& logits, const LabelMap& labels, bool targeted);

/// Attack pixel success rate over the masked pixels.
double apsr(const TensorGrid& logits, const LabelMap& labels, const BinaryMask& mask, bool targeted);

/// Runs the model on x + delta and returns the APSR.
double evaluate_apsr(const AttackProblem& problem, const TensorGrid& delta);

struct BenchRecord {
  std::string sample_id;
  std::string attack;
  bool success = false;
  double linf_norm = 1.0;
  double apsr = 0.0;
  double wall_time = 0.0;
  std::size_t forwards = 0;
  std::size_t backwards = 0;
};

// ---------------------------------------------------------------------------
// Aggregates
// ---------------------------------------------------------------------------

struct CurvePoint {
  double epsilon = 0.0;
  double failure_rate = 0.0;
};

/// Fraction of records that failed or needed a norm above epsilon.
std::vector<CurvePoint> failure_curve(std::span<const BenchRecord> records, std::span<const double> grid);
/// 0, 1/255, ..., 1 (256 points), the default curve grid.
std::vector<double> default_curve_grid();

struct NormStats {
  double median = 0.0;  ///< in 1/255 units, failures counted as 255
  double mean = 0.0;
  std::size_t samples = 0;
  std::size_t failures = 0;
};

NormStats norm_stats(std::span<const BenchRecord> records);

// ---------------------------------------------------------------------------
// CSV
// ---------------------------------------------------------------------------

inline constexpr const char* kRecordsHeader =
    "sample_id,attack,success,linf_norm,apsr,wall_time_s,forwards,backwards";

void write_records_csv(std::ostream& out, std::span<const BenchRecord> records);
void write_records_csv(const std::filesystem::path& path, std::span<const BenchRecord> records);
/// Throws IoError on a missing file or malformed row.
std::vector<BenchRecord> read_records_csv(const std::filesystem::path& path);

void write_curve_csv(const std::filesystem::path& path, std::span<const CurvePoint> curve);

// ---------------------------------------------------------------------------
// Prox solver benchmark
// ---------------------------------------------------------------------------

struct ProxBenchConfig {
  std::vector<std::size_t> dims{4096};
  std::vector<double> sigmas{0.1, 0.5, 1.0, 2.0};
  std::size_t repeats = 100;
  std::uint64_t seed = 0;
  double precision = 1e-5;
  IterativeProxOptions iterative{};
  std::vector<std::string> solvers{"ternary", "dfb", "adfb", "dr"};
  std::size_t jobs = 1;

  void validate() const;
};

struct ProxBenchRecord {
  std::size_t instance = 0;
  double sigma = 0.0;
  std::size_t dim = 0;
  double lambda = 0.0;
  std::string solver;
  double objective = 0.0;
  double relative_objective = 1.0;  ///< objective / ternary objective, 0/0 = 1
  double beta_star = 0.0;
  std::size_t iterations = 0;
  bool converged = true;
  double wall_time = 0.0;
};

/// x ~ U[0,1]^d, delta ~ N(0, sigma^2 I), lambda = 10^u with u ~ U[-1, 3].
ProxProblem make_prox_instance(std::size_t dim, double sigma, Rng& rng, double precision = 1e-5);

ProxSolverReport run_prox_solver(const std::string& solver, const ProxProblem& problem,
                                 const IterativeProxOptions& options);

/// Instances are seeded per (dim, sigma, repeat), so results do not depend on `jobs`.
std::vector<ProxBenchRecord> prox_benchmark(const ProxBenchConfig& config);

struct ProxBenchSummary {
  std::size_t dim = 0;
  double sigma = 0.0;
  std::string solver;
  double mean_wall_time = 0.0;
  double mean_relative_objective = 0.0;
  double max_relative_objective = 0.0;
  double mean_iterations = 0.0;
  std::size_t unconverged = 0;
  std::size_t instances = 0;
};

std::vector<ProxBenchSummary> summarize_prox_benchmark(std::span<const ProxBenchRecord> records);

inline constexpr const char* kProxBenchHeader =
    "instance,sigma,d,lambda,solver,objective,relative_objective,beta_star,iterations,converged,"
    "wall_time_s";

void write_prox_bench_csv(const std::filesystem::path& path, std::span<const ProxBenchRecord> records);

}  // namespace proxattack
