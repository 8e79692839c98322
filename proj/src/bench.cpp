#include "proxattack/bench.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <limits>
#include <map>
#include <mutex>
#include <sstream>
#include <thread>
#include <tuple>

#include "attack_common.hpp"

namespace proxattack {

std::vector<std::uint8_t> fooled_pixels(const TensorGrid& logits, const LabelMap& labels, bool targeted) {
  const Shape& s = logits.shape();
  if (labels.height() != s.height || labels.width() != s.width) {
    throw ConfigError("apsr: label map does not match logits " + s.str());
  }
  std::vector<std::uint8_t> out(s.pixels());
  for (std::size_t i = 0; i < out.size(); ++i) {
    std::size_t arg = 0;
    for (std::size_t k = 1; k < s.channels; ++k) {
      if (logits.at(k, i) > logits.at(arg, i)) arg = k;
    }
    out[i] = targeted ? arg == labels[i] : arg != labels[i];
  }
  return out;
}

double apsr(const TensorGrid& logits, const LabelMap& labels, const BinaryMask& mask, bool targeted) {
  return masked_fraction(fooled_pixels(logits, labels, targeted), mask);
}

double evaluate_apsr(const AttackProblem& problem, const TensorGrid& delta) {
  const TensorGrid logits = problem.model.forward(detail::add(problem.image, delta));
  return apsr(logits, problem.labels, problem.mask, problem.targeted);
}

std::vector<CurvePoint> failure_curve(std::span<const BenchRecord> records, std::span<const double> grid) {
  if (records.empty()) throw ConfigError("failure curve: no records");
  std::vector<CurvePoint> out;
  out.reserve(grid.size());
  for (double eps : grid) {
    std::size_t failed = 0;
    for (const auto& r : records) failed += !r.success || r.linf_norm > eps;
    out.push_back({eps, static_cast<double>(failed) / static_cast<double>(records.size())});
  }
  return out;
}

std::vector<double> default_curve_grid() {
  std::vector<double> grid(256);
  for (std::size_t i = 0; i < grid.size(); ++i) grid[i] = static_cast<double>(i) / 255.0;
  return grid;
}

NormStats norm_stats(std::span<const BenchRecord> records) {
  if (records.empty()) throw ConfigError("norm stats: no records");
  std::vector<double> norms;
  norms.reserve(records.size());
  NormStats stats;
  for (const auto& r : records) {
    norms.push_back(r.success ? 255.0 * r.linf_norm : 255.0);
    stats.failures += !r.success;
  }
  stats.samples = norms.size();
  std::sort(norms.begin(), norms.end());
  const std::size_t mid = norms.size() / 2;
  stats.median = norms.size() % 2 == 1 ? norms[mid] : 0.5 * (norms[mid - 1] + norms[mid]);
  double sum = 0.0;
  for (double v : norms) sum += v;
  stats.mean = sum / static_cast<double>(norms.size());
  return stats;
}

// ---------------------------------------------------------------------------

namespace {

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> cells;
  std::string cell;
  std::istringstream in(line);
  while (std::getline(in, cell, ',')) cells.push_back(cell);
  if (!line.empty() && line.back() == ',') cells.emplace_back();
  return cells;
}

double parse_double(const std::string& s, const std::string& where) {
  try {
    std::size_t used = 0;
    const double v = std::stod(s, &used);
    if (used != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw IoError(where + ": not a number: '" + s + "'");
  }
}

std::size_t parse_count(const std::string& s, const std::string& where) {
  const double v = parse_double(s, where);
  if (v < 0.0 || std::floor(v) != v) throw IoError(where + ": not a count: '" + s + "'");
  return static_cast<std::size_t>(v);
}

std::ofstream open_output(const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << std::setprecision(17);
  return out;
}

}  // namespace

void write_records_csv(std::ostream& out, std::span<const BenchRecord> records) {
  out << kRecordsHeader << '\n';
  for (const auto& r : records) {
    out << r.sample_id << ',' << r.attack << ',' << (r.success ? 1 : 0) << ',' << r.linf_norm << ','
        << r.apsr << ',' << r.wall_time << ',' << r.forwards << ',' << r.backwards << '\n';
  }
}

void write_records_csv(const std::filesystem::path& path, std::span<const BenchRecord> records) {
  std::ofstream out = open_output(path);
  write_records_csv(out, records);
  if (!out) throw IoError("failed writing " + path.string());
}

std::vector<BenchRecord> read_records_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read " + path.string());
  std::string line;
  if (!std::getline(in, line) || line != kRecordsHeader) {
    throw IoError(path.string() + ": unexpected header");
  }
  std::vector<BenchRecord> records;
  std::size_t row = 1;
  while (std::getline(in, line)) {
    ++row;
    if (line.empty()) continue;
    const std::string where = path.string() + ":" + std::to_string(row);
    const auto cells = split_csv_line(line);
    if (cells.size() != 8) throw IoError(where + ": expected 8 columns");
    BenchRecord r;
    r.sample_id = cells[0];
    r.attack = cells[1];
    if (cells[2] != "0" && cells[2] != "1") throw IoError(where + ": success must be 0 or 1");
    r.success = cells[2] == "1";
    r.linf_norm = parse_double(cells[3], where);
    r.apsr = parse_double(cells[4], where);
    r.wall_time = parse_double(cells[5], where);
    r.forwards = parse_count(cells[6], where);
    r.backwards = parse_count(cells[7], where);
    if (r.linf_norm < 0.0 || r.linf_norm > 1.0 || r.apsr < 0.0 || r.apsr > 1.0) {
      throw IoError(where + ": norm and apsr must lie in [0, 1]");
    }
    records.push_back(std::move(r));
  }
  return records;
}

void write_curve_csv(const std::filesystem::path& path, std::span<const CurvePoint> curve) {
  std::ofstream out = open_output(path);
  out << "epsilon,failure_rate\n";
  for (const auto& p : curve) out << p.epsilon << ',' << p.failure_rate << '\n';
  if (!out) throw IoError("failed writing " + path.string());
}

// ---------------------------------------------------------------------------

void ProxBenchConfig::validate() const {
  if (dims.empty() || sigmas.empty() || solvers.empty()) throw ConfigError("prox bench: empty sweep");
  for (std::size_t d : dims) {
    if (d == 0) throw ConfigError("prox bench: dimension must be positive");
  }
  for (double s : sigmas) {
    if (!(s > 0.0)) throw ConfigError("prox bench: sigma must be positive");
  }
  if (repeats == 0) throw ConfigError("prox bench: repeats must be positive");
  if (!(precision > 0.0)) throw ConfigError("prox bench: precision must be positive");
  for (const auto& s : solvers) {
    if (s != "ternary" && s != "dfb" && s != "adfb" && s != "dr") {
      throw ConfigError("prox bench: unknown solver '" + s + "'");
    }
  }
  if (jobs == 0) throw ConfigError("prox bench: jobs must be positive");
}

ProxProblem make_prox_instance(std::size_t dim, double sigma, Rng& rng, double precision) {
  const Shape shape{1, 1, dim};
  std::vector<double> x(dim), delta(dim);
  for (double& v : x) v = rng.uniform();
  for (double& v : delta) v = rng.normal(0.0, sigma);
  const double lambda = std::pow(10.0, rng.uniform(-1.0, 3.0));
  return ProxProblem{TensorGrid(shape, std::move(delta)), TensorGrid(shape, std::move(x)), lambda,
                     std::nullopt, precision};
}

ProxSolverReport run_prox_solver(const std::string& solver, const ProxProblem& problem,
                                 const IterativeProxOptions& options) {
  if (solver == "ternary") return prox_ternary(problem);
  if (solver == "dfb") return prox_dfb(problem, options);
  if (solver == "adfb") return prox_adfb(problem, options);
  if (solver == "dr") return prox_dr(problem, options);
  throw ConfigError("unknown prox solver '" + solver + "'");
}

std::vector<ProxBenchRecord> prox_benchmark(const ProxBenchConfig& config) {
  config.validate();
  struct Job {
    std::size_t dim_index, sigma_index, repeat;
  };
  std::vector<Job> jobs;
  for (std::size_t a = 0; a < config.dims.size(); ++a) {
    for (std::size_t b = 0; b < config.sigmas.size(); ++b) {
      for (std::size_t r = 0; r < config.repeats; ++r) jobs.push_back({a, b, r});
    }
  }

  const std::size_t per_job = config.solvers.size();
  std::vector<ProxBenchRecord> records(jobs.size() * per_job);
  const Rng root(config.seed);

  const auto run_job = [&](std::size_t j) {
    const Job& job = jobs[j];
    Rng rng = root.fork(j);
    const std::size_t dim = config.dims[job.dim_index];
    const double sigma = config.sigmas[job.sigma_index];
    const ProxProblem problem = make_prox_instance(dim, sigma, rng, config.precision);
    double reference = 0.0;
    for (std::size_t k = 0; k < per_job; ++k) {
      const ProxSolverReport rep = run_prox_solver(config.solvers[k], problem, config.iterative);
      ProxBenchRecord& rec = records[j * per_job + k];
      rec.instance = j;
      rec.sigma = sigma;
      rec.dim = dim;
      rec.lambda = problem.lambda;
      rec.solver = config.solvers[k];
      rec.objective = rep.objective;
      rec.beta_star = rep.beta_star;
      rec.iterations = rep.iterations;
      rec.converged = rep.converged;
      rec.wall_time = rep.wall_time;
      if (config.solvers[k] == "ternary") reference = rep.objective;
    }
    // Relative objective against the ternary result when it is part of the sweep.
    const bool has_reference =
        std::find(config.solvers.begin(), config.solvers.end(), "ternary") != config.solvers.end();
    for (std::size_t k = 0; k < per_job; ++k) {
      ProxBenchRecord& rec = records[j * per_job + k];
      if (!has_reference) {
        rec.relative_objective = 1.0;
      } else if (reference == 0.0) {
        rec.relative_objective = rec.objective == 0.0 ? 1.0 : std::numeric_limits<double>::infinity();
      } else {
        rec.relative_objective = rec.objective / reference;
      }
    }
  };

  const std::size_t workers = std::min(config.jobs, jobs.size());
  if (workers <= 1) {
    for (std::size_t j = 0; j < jobs.size(); ++j) run_job(j);
    return records;
  }
  std::atomic<std::size_t> next{0};
  std::vector<std::thread> pool;
  std::exception_ptr failure;
  std::mutex failure_lock;
  for (std::size_t w = 0; w < workers; ++w) {
    pool.emplace_back([&] {
      for (std::size_t j = next++; j < jobs.size(); j = next++) {
        try {
          run_job(j);
        } catch (...) {
          std::lock_guard<std::mutex> lock(failure_lock);
          if (!failure) failure = std::current_exception();
        }
      }
    });
  }
  for (auto& t : pool) t.join();
  if (failure) std::rethrow_exception(failure);
  return records;
}

std::vector<ProxBenchSummary> summarize_prox_benchmark(std::span<const ProxBenchRecord> records) {
  std::map<std::tuple<std::size_t, double, std::string>, ProxBenchSummary> groups;
  for (const auto& r : records) {
    ProxBenchSummary& g = groups[{r.dim, r.sigma, r.solver}];
    g.dim = r.dim;
    g.sigma = r.sigma;
    g.solver = r.solver;
    g.mean_wall_time += r.wall_time;
    g.mean_relative_objective += r.relative_objective;
    g.max_relative_objective = g.instances == 0 ? r.relative_objective
                                                : std::max(g.max_relative_objective, r.relative_objective);
    g.mean_iterations += static_cast<double>(r.iterations);
    g.unconverged += !r.converged;
    ++g.instances;
  }
  std::vector<ProxBenchSummary> out;
  for (auto& [key, g] : groups) {
    const double n = static_cast<double>(g.instances);
    g.mean_wall_time /= n;
    g.mean_relative_objective /= n;
    g.mean_iterations /= n;
    out.push_back(g);
  }
  return out;
}

void write_prox_bench_csv(const std::filesystem::path& path, std::span<const ProxBenchRecord> records) {
  std::ofstream out = open_output(path);
  out << kProxBenchHeader << '\n';
  for (const auto& r : records) {
    out << r.instance << ',' << r.sigma << ',' << r.dim << ',' << r.lambda << ',' << r.solver << ','
        << r.objective << ',' << r.relative_objective << ',' << r.beta_star << ',' << r.iterations << ','
        << (r.converged ? 1 : 0) << ',' << r.wall_time << '\n';
  }
  if (!out) throw IoError("failed writing " + path.string());
}

}  // namespace proxattack
