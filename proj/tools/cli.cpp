#include "cli.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <algorithm>
#include <atomic>
#include <cctype>
#include <charconv>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <mutex>
#include <optional>
#include <ostream>
#include <sstream>
#include <thread>

#include "proxattack/attacks.hpp"
#include "proxattack/bench.hpp"
#include "proxattack/models.hpp"
#include "proxattack/synthetic.hpp"
#include "proxattack/tensor_io.hpp"

namespace proxattack::cli {
namespace {

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;
using Clock = std::chrono::steady_clock;

const std::vector<std::string> kAttacks{"alma_prox", "dag", "fmn", "pdpgd", "ifgsm", "mifgsm", "pgd_ce", "pgd_dlr"};

// ---------------------------------------------------------------------------
// Shared plumbing
// ---------------------------------------------------------------------------

struct Common {
  std::string out;
  std::uint64_t seed = 0;
  std::string seed_source = "default";
  std::string config;
  std::size_t jobs = 1;
};

void add_common(CLI::App* sub, Common& c, bool with_jobs) {
  sub->add_option("--out", c.out, "Output directory");
  sub->add_option("--seed", c.seed, "Seed (PROXATTACK_SEED overrides)");
  sub->add_option("--config", c.config, "key=value file supplying any flag; the command line wins");
  if (with_jobs) sub->add_option("--jobs", c.jobs, "Parallel workers")->check(CLI::PositiveNumber);
}

std::string long_name(const CLI::Option* opt) {
  const auto& names = opt->get_lnames();
  return names.empty() ? opt->get_name() : names.front();
}

/// Returns the keys taken from the file.
std::vector<std::string> apply_config_file(CLI::App* sub, const std::string& path) {
  std::vector<std::string> applied;
  if (path.empty()) return applied;
  if (!fs::is_regular_file(path)) throw IoError("config file not found: " + path);
  std::vector<CLI::ConfigItem> items;
  try {
    items = CLI::ConfigINI().from_file(path);
  } catch (const CLI::Error& e) {
    throw ConfigError("config file " + path + ": " + e.what());
  }
  for (const auto& item : items) {
    if (item.name == "++" || item.name == "--") continue;  // section markers
    if (item.name == "config") throw ConfigError("config file may not name another config file");
    CLI::Option* opt = sub->get_option_no_throw("--" + item.name);
    if (opt == nullptr) throw ConfigError("config file: unknown key '" + item.name + "'");
    if (opt->count() > 0) continue;
    for (const auto& v : item.inputs) opt->add_result(v);
    try {
      opt->run_callback();
    } catch (const CLI::Error& e) {
      throw ConfigError("config key '" + item.name + "': " + e.what());
    }
    applied.push_back(item.name);
  }
  return applied;
}

void resolve_seed(Common& c, const CLI::App* sub, bool from_config) {
  c.seed_source = from_config ? "config" : sub->get_option("--seed")->count() > 0 ? "flag" : "default";
  const char* env = std::getenv("PROXATTACK_SEED");
  if (env == nullptr || *env == '\0') return;
  const std::string text(env);
  std::uint64_t value = 0;
  const auto [end, ec] = std::from_chars(text.data(), text.data() + text.size(), value);
  if (ec != std::errc() || end != text.data() + text.size()) {
    throw ConfigError("PROXATTACK_SEED must be an unsigned integer, got '" + text + "'");
  }
  c.seed = value;
  c.seed_source = "PROXATTACK_SEED";
}

void require(const std::string& value, const std::string& flag) {
  if (value.empty()) throw ConfigError(flag + " is required");
}

/// Every option of the subcommand with its given or default value.
json echo_options(const CLI::App* sub) {
  json j = json::object();
  for (const CLI::Option* opt : sub->get_options()) {
    const std::string name = long_name(opt);
    if (name == "--help") continue;
    const std::string key = name.rfind("--", 0) == 0 ? name.substr(2) : name;
    if (opt->count() == 0) {
      j[key] = opt->get_default_str();
    } else if (opt->results().size() == 1) {
      j[key] = opt->results().front();
    } else {
      j[key] = opt->results();
    }
  }
  return j;
}

fs::path prepare_out(const std::string& out) {
  require(out, "--out");
  std::error_code ec;
  fs::create_directories(out, ec);
  if (ec || !fs::is_directory(out)) throw IoError("cannot create output directory " + out);
  return fs::path(out);
}

void write_json(const fs::path& path, const json& j) {
  std::ofstream f(path);
  if (!f) throw IoError("cannot write " + path.string());
  f << j.dump(2) << '\n';
  if (!f) throw IoError("failed writing " + path.string());
}

void write_manifest(const fs::path& dir, const std::string& command, const Common& c, const CLI::App* sub,
                    json resolved, const std::vector<std::string>& outputs) {
  json m;
  m["tool"] = "proxattack";
  m["command"] = command;
  m["seed"] = c.seed;
  m["seed_source"] = c.seed_source;
  m["options"] = echo_options(sub);
  m["resolved"] = std::move(resolved);
  m["outputs"] = outputs;
  write_json(dir / "manifest.json", m);
}

const char* masking_name(MaskingStrategy s) {
  switch (s) {
    case MaskingStrategy::Labeled: return "labeled";
    case MaskingStrategy::Fixed: return "fixed";
    case MaskingStrategy::Scheduled: return "scheduled";
  }
  return "?";
}

MaskingStrategy parse_masking(const std::string& s) {
  if (s == "labeled") return MaskingStrategy::Labeled;
  if (s == "fixed") return MaskingStrategy::Fixed;
  if (s == "scheduled") return MaskingStrategy::Scheduled;
  throw ConfigError("--masking must be labeled, fixed or scheduled");
}

/// Runs `work(i, worker)` for i in [0, n) on `jobs` threads; rethrows the first failure.
template <class Fn>
void parallel_for(std::size_t n, std::size_t jobs, Fn&& work) {
  const std::size_t workers = std::max<std::size_t>(1, std::min(jobs, n));
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex lock;
  const auto loop = [&](std::size_t worker) {
    for (std::size_t i = next++; i < n; i = next++) {
      try {
        work(i, worker);
      } catch (...) {
        std::lock_guard<std::mutex> guard(lock);
        if (!failure) failure = std::current_exception();
        next = n;
      }
    }
  };
  if (workers == 1) {
    loop(0);
  } else {
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers; ++w) pool.emplace_back(loop, w);
    for (auto& t : pool) t.join();
  }
  if (failure) std::rethrow_exception(failure);
}

LabelMap predicted_labels(const SegmentationModel& model, const TensorGrid& image) {
  const TensorGrid z = model.forward(image);
  const Shape& s = z.shape();
  std::vector<std::uint32_t> labels(s.pixels());
  for (std::size_t i = 0; i < labels.size(); ++i) {
    std::size_t arg = 0;
    for (std::size_t k = 1; k < s.channels; ++k) {
      if (z.at(k, i) > z.at(arg, i)) arg = k;
    }
    labels[i] = static_cast<std::uint32_t>(arg);
  }
  return LabelMap(s.height, s.width, s.channels, std::move(labels));
}

// ---------------------------------------------------------------------------
// attack
// ---------------------------------------------------------------------------

struct AttackCmd {
  Common common;
  std::string model, samples, image, labels, mask, id = "sample", attack;
  bool targeted = false;
  bool trace = false;
  std::optional<std::size_t> iterations;
  std::optional<std::size_t> steps;
  std::string masking;
  std::string scope = "masked";
  double nu = 0.99;
  double alpha = 0.8;
  double prox_precision = 1e-5;
  double metric_epsilon = 1e-8;
  AlmaProxConfig alma;
  DagConfig dag;
  FgsmConfig fgsm;
  PgdConfig pgd;
  std::size_t search_steps = 13;
  FmnConfig fmn;
  PdpgdConfig pdpgd;
};

void add_attack_options(CLI::App* sub, AttackCmd& c) {
  add_common(sub, c.common, true);
  sub->add_option("--model", c.model, "Model directory (manifest.json + tensors)");
  sub->add_option("--samples", c.samples, "Sample list (JSON)");
  sub->add_option("--image", c.image, "Single image tensor");
  sub->add_option("--labels", c.labels, "Label map y, or the target map with --targeted");
  sub->add_option("--mask", c.mask, "Validity mask (default: all pixels)");
  sub->add_option("--id", c.id, "Sample id for --image");
  sub->add_option("--attack", c.attack, "Attack name")->check(CLI::IsMember(kAttacks));
  sub->add_flag("--targeted", c.targeted, "Labels are targets");
  sub->add_flag("--trace", c.trace, "Write per-iteration traces");
  sub->add_option("--iterations", c.iterations, "N for alma_prox, dag, fmn, pdpgd (default 500)");
  sub->add_option("--steps", c.steps, "Inner steps of fixed-budget attacks (ifgsm 20, pgd 40)");
  sub->add_option("--nu", c.nu, "Required pixel success rate");
  sub->add_option("--masking", c.masking, "labeled | fixed | scheduled (alma_prox: scheduled, pdpgd: labeled)");
  sub->add_option("--percentile-scope", c.scope, "masked | all")->check(CLI::IsMember({"masked", "all"}));
  sub->add_option("--alpha", c.alpha, "Metric and multiplier smoothing");
  sub->add_option("--prox-precision", c.prox_precision, "Ternary search tolerance on beta");
  sub->add_option("--metric-eps", c.metric_epsilon, "Metric floor");
  sub->add_option("--step-init", c.alma.step_init, "alma_prox initial step");
  sub->add_option("--step-final", c.alma.step_final, "alma_prox final step");
  sub->add_option("--mu-init", c.alma.mu_init);
  sub->add_option("--rho-init", c.alma.rho_init);
  sub->add_option("--gamma", c.alma.gamma, "rho growth factor");
  sub->add_option("--gamma-w", c.alma.gamma_w, "Constraint scale rate");
  sub->add_option("--w-min", c.alma.w_min);
  sub->add_option("--mu-min", c.alma.mu_min);
  sub->add_option("--mu-max", c.alma.mu_max);
  sub->add_option("--tau", c.alma.improvement_rate, "Improvement rate for the rho check");
  sub->add_option("--check-period", c.alma.check_period, "M");
  sub->add_option("--margin", c.alma.constraint_margin, "Added to every constraint");
  sub->add_option("--eta", c.dag.step, "dag step");
  sub->add_option("--momentum", c.fgsm.momentum, "mifgsm momentum");
  sub->add_option("--restarts", c.pgd.restarts, "pgd restarts");
  sub->add_option("--search-steps", c.search_steps, "Binary search probes");
  sub->add_option("--fmn-alpha", c.fmn.alpha_init);
  sub->add_option("--fmn-alpha-final", c.fmn.alpha_final);
  sub->add_option("--fmn-gamma", c.fmn.gamma_init);
  sub->add_option("--fmn-gamma-final", c.fmn.gamma_final);
  sub->add_option("--primal-step", c.pdpgd.primal_step);
  sub->add_option("--primal-decay", c.pdpgd.primal_decay);
  sub->add_option("--dual-step", c.pdpgd.dual_step);
  sub->add_option("--ratio", c.pdpgd.ratio, "Initial norm-to-constraint weight ratio");
}

void finalize_attack(AttackCmd& c) {
  require(c.model, "--model");
  require(c.attack, "--attack");
  if (c.samples.empty() == c.image.empty()) throw ConfigError("give exactly one of --samples or --image");
  if (!c.image.empty()) require(c.labels, "--labels");
  if (!c.samples.empty() && (!c.labels.empty() || !c.mask.empty())) {
    throw ConfigError("--labels/--mask go with --image, not --samples");
  }
  const std::size_t n = c.iterations.value_or(500);
  c.alma.iterations = c.dag.iterations = c.fmn.iterations = c.pdpgd.iterations = n;
  c.alma.nu = c.dag.nu = c.fmn.nu = c.pdpgd.nu = c.nu;
  c.alma.alpha = c.pdpgd.alpha = c.alpha;
  c.alma.prox_precision = c.pdpgd.prox_precision = c.prox_precision;
  c.alma.metric_epsilon = c.pdpgd.metric_epsilon = c.metric_epsilon;
  c.alma.percentile_scope = c.scope == "all" ? PercentileScope::AllPixels : PercentileScope::MaskedOnly;
  if (!c.masking.empty()) c.alma.masking = c.pdpgd.masking = parse_masking(c.masking);
  c.fgsm.steps = c.steps.value_or(20);
  c.pgd.steps = c.steps.value_or(40);
  c.pgd.loss = c.attack == "pgd_dlr" ? PgdLoss::Dlr : PgdLoss::CrossEntropy;
  if (!(c.nu > 0.0 && c.nu <= 1.0)) throw ConfigError("--nu must be in (0, 1]");
  if (c.search_steps == 0) throw ConfigError("--search-steps must be positive");
  if (c.attack == "alma_prox") c.alma.validate();
}

json resolved_attack(const AttackCmd& c) {
  json r;
  r["attack"] = c.attack;
  r["targeted"] = c.targeted;
  r["nu"] = c.nu;
  if (c.attack == "alma_prox") {
    const auto& a = c.alma;
    r["iterations"] = a.iterations;
    r["step_init"] = a.step_init;
    r["step_final"] = a.step_final;
    r["alpha"] = a.alpha;
    r["mu_init"] = a.mu_init;
    r["rho_init"] = a.rho_init;
    r["gamma"] = a.gamma;
    r["gamma_w"] = a.gamma_w;
    r["w_min"] = a.w_min;
    r["mu_min"] = a.mu_min;
    r["mu_max"] = a.mu_max;
    r["tau"] = a.improvement_rate;
    r["check_period"] = a.check_period;
    r["prox_precision"] = a.prox_precision;
    r["metric_eps"] = a.metric_epsilon;
    r["margin"] = a.constraint_margin;
    r["masking"] = masking_name(a.masking);
    r["percentile_scope"] = c.scope;
  } else if (c.attack == "dag") {
    r["iterations"] = c.dag.iterations;
    r["eta"] = c.dag.step;
  } else if (c.attack == "fmn") {
    r["iterations"] = c.fmn.iterations;
    r["alpha_init"] = c.fmn.alpha_init;
    r["alpha_final"] = c.fmn.alpha_final;
    r["gamma_init"] = c.fmn.gamma_init;
    r["gamma_final"] = c.fmn.gamma_final;
  } else if (c.attack == "pdpgd") {
    const auto& p = c.pdpgd;
    r["iterations"] = p.iterations;
    r["primal_step"] = p.primal_step;
    r["primal_decay"] = p.primal_decay;
    r["dual_step"] = p.dual_step;
    r["ratio"] = p.ratio;
    r["alpha"] = p.alpha;
    r["metric_eps"] = p.metric_epsilon;
    r["prox_precision"] = p.prox_precision;
    r["masking"] = masking_name(p.masking);
  } else {
    r["search_steps"] = c.search_steps;
    if (c.attack == "ifgsm" || c.attack == "mifgsm") {
      r["steps"] = c.fgsm.steps;
      if (c.attack == "mifgsm") r["momentum"] = c.fgsm.momentum;
    } else {
      r["steps"] = c.pgd.steps;
      r["restarts"] = c.pgd.restarts;
      r["loss"] = c.attack == "pgd_dlr" ? "dlr" : "ce";
    }
  }
  return r;
}

struct Sample {
  std::string id;
  TensorGrid image;
  LabelMap labels;
  BinaryMask mask;
};

void check_sample_id(const std::string& id) {
  const bool ok = !id.empty() && id != "." && id != ".." && std::all_of(id.begin(), id.end(), [](char ch) {
    return std::isalnum(static_cast<unsigned char>(ch)) || ch == '_' || ch == '-' || ch == '.';
  });
  if (!ok) throw ConfigError("sample id '" + id + "' must use letters, digits, '_', '-' or '.'");
}

Sample read_sample(const std::string& id, const fs::path& image, const fs::path& labels,
                   const std::optional<fs::path>& mask, std::size_t classes) {
  check_sample_id(id);
  Sample s{id, load_tensor(image), load_labels(labels, classes), BinaryMask()};
  s.mask = mask ? load_mask(*mask) : BinaryMask::full(s.labels.height(), s.labels.width());
  return s;
}

std::vector<Sample> load_samples(const AttackCmd& c, std::size_t classes) {
  std::vector<Sample> out;
  if (!c.image.empty()) {
    out.push_back(read_sample(c.id, c.image, c.labels,
                              c.mask.empty() ? std::nullopt : std::optional<fs::path>(c.mask), classes));
    return out;
  }
  std::ifstream f(c.samples);
  if (!f) throw IoError("cannot read " + c.samples);
  json j;
  try {
    j = json::parse(f);
  } catch (const json::exception& e) {
    throw IoError(c.samples + ": " + e.what());
  }
  const fs::path base = fs::path(c.samples).parent_path();
  try {
    const auto& list = j.at("samples");
    if (!list.is_array() || list.empty()) throw IoError(c.samples + ": 'samples' must be a non-empty array");
    for (const auto& e : list) {
      std::optional<fs::path> mask;
      if (e.contains("mask")) mask = base / e.at("mask").get<std::string>();
      out.push_back(read_sample(e.at("id").get<std::string>(), base / e.at("image").get<std::string>(),
                                base / e.at("labels").get<std::string>(), mask, classes));
    }
  } catch (const json::exception& e) {
    throw IoError(c.samples + ": " + e.what());
  }
  std::vector<std::string> ids;
  for (const auto& s : out) ids.push_back(s.id);
  std::sort(ids.begin(), ids.end());
  if (std::adjacent_find(ids.begin(), ids.end()) != ids.end()) throw ConfigError("duplicate sample ids");
  return out;
}

AttackResult dispatch(const AttackProblem& p, const AttackCmd& c, std::uint64_t seed) {
  const std::string& a = c.attack;
  if (a == "alma_prox") return alma_prox(p, c.alma);
  if (a == "dag") return dag(p, c.dag);
  if (a == "fmn") return fmn_linf(p, c.fmn);
  if (a == "pdpgd") return pdpgd_linf(p, c.pdpgd);
  FixedBudgetAttack inner;
  if (a == "ifgsm") {
    inner = [&](const AttackProblem& q, double eps) { return ifgsm(q, eps, c.fgsm); };
  } else if (a == "mifgsm") {
    inner = [&](const AttackProblem& q, double eps) { return mifgsm(q, eps, c.fgsm); };
  } else {
    PgdConfig cfg = c.pgd;
    cfg.seed = seed;
    inner = [cfg](const AttackProblem& q, double eps) { return pgd(q, eps, cfg); };
  }
  return binary_search_attack(p, inner, c.search_steps, c.nu);
}

void write_trace(const fs::path& path, const std::vector<TraceEntry>& trace) {
  std::ofstream f(path);
  if (!f) throw IoError("cannot write " + path.string());
  f << std::setprecision(17) << "iteration,apsr,norm,best_norm,loss,scale,mean_multiplier,epsilon\n";
  for (const auto& e : trace) {
    f << e.iteration << ',' << e.apsr << ',' << e.norm << ',' << e.best_norm << ',' << e.loss << ','
      << e.scale << ',' << e.mean_multiplier << ',' << e.epsilon << '\n';
  }
}

int cmd_attack(AttackCmd& c, const CLI::App* sub, std::ostream& out) {
  finalize_attack(c);
  const auto model = load_model(c.model);
  const std::vector<Sample> samples = load_samples(c, model->num_classes());
  const fs::path dir = prepare_out(c.common.out);
  fs::create_directories(dir / "perturbations");
  if (c.trace) fs::create_directories(dir / "traces");

  std::vector<BenchRecord> records(samples.size());
  std::vector<std::unique_ptr<SegmentationModel>> replicas;
  const std::size_t workers = std::max<std::size_t>(1, std::min(c.common.jobs, samples.size()));
  for (std::size_t w = 0; w < workers; ++w) replicas.push_back(model->clone());
  const Rng root(c.common.seed);

  parallel_for(samples.size(), workers, [&](std::size_t i, std::size_t worker) {
    const Sample& s = samples[i];
    const SegmentationModel& m = *replicas[worker];
    const AttackProblem problem{m, s.image, s.labels, s.mask, c.targeted};
    Rng stream = root.fork(i);
    const auto start = Clock::now();
    const AttackResult result = dispatch(problem, c, stream.next_u64());
    const double wall = std::chrono::duration<double>(Clock::now() - start).count();

    BenchRecord& r = records[i];
    r.sample_id = s.id;
    r.attack = c.attack;
    r.success = result.success;
    r.linf_norm = result.success ? result.best_norm : 1.0;
    r.apsr = evaluate_apsr(problem, result.best_delta);
    r.wall_time = wall;
    r.forwards = result.forwards;
    r.backwards = result.backwards;
    save_tensor(dir / "perturbations" / (s.id + ".tensor"), result.best_delta);
    if (c.trace) write_trace(dir / "traces" / (s.id + ".csv"), result.trace);
  });

  write_records_csv(dir / "records.csv", records);
  const NormStats stats = norm_stats(records);
  double apsr_sum = 0.0;
  for (const auto& r : records) apsr_sum += r.apsr;
  json summary;
  summary["attack"] = c.attack;
  summary["samples"] = stats.samples;
  summary["successes"] = stats.samples - stats.failures;
  summary["success_rate"] = static_cast<double>(stats.samples - stats.failures) / static_cast<double>(stats.samples);
  summary["median_norm_255"] = stats.median;
  summary["mean_norm_255"] = stats.mean;
  summary["mean_apsr"] = apsr_sum / static_cast<double>(records.size());
  write_json(dir / "summary.json", summary);

  json resolved = resolved_attack(c);
  resolved["model"] = c.model;
  resolved["architecture"] = model->architecture();
  resolved["samples"] = samples.size();
  resolved["jobs"] = workers;
  std::vector<std::string> outputs{"records.csv", "summary.json", "perturbations/"};
  if (c.trace) outputs.push_back("traces/");
  write_manifest(dir, "attack", c.common, sub, resolved, outputs);

  out << c.attack << ": " << stats.samples - stats.failures << "/" << stats.samples << " succeeded, median "
      << stats.median << "/255, mean " << stats.mean << "/255\n";
  return kExitOk;
}

// ---------------------------------------------------------------------------
// bench-prox
// ---------------------------------------------------------------------------

struct BenchCmd {
  Common common;
  ProxBenchConfig bench;
};

void add_bench_options(CLI::App* sub, BenchCmd& c) {
  add_common(sub, c.common, true);
  sub->add_option("--dims", c.bench.dims, "Problem sizes")->delimiter(',');
  sub->add_option("--sigmas", c.bench.sigmas, "Perturbation scales")->delimiter(',');
  sub->add_option("--repeats", c.bench.repeats, "Instances per (d, sigma)");
  sub->add_option("--precision", c.bench.precision, "Ternary search tolerance");
  sub->add_option("--solvers", c.bench.solvers, "ternary, dfb, adfb, dr")->delimiter(',');
  sub->add_option("--stop-tol", c.bench.iterative.stop_tol, "Iterative solvers: stop on sup-norm change");
  sub->add_option("--max-iterations", c.bench.iterative.max_iterations);
  sub->add_option("--dual-step", c.bench.iterative.dual_step, "DFB/ADFB step in units of 1/L");
  sub->add_option("--inertia", c.bench.iterative.inertia_a, "ADFB inertial parameter a");
  sub->add_option("--dr-gamma", c.bench.iterative.dr_gamma);
  sub->add_option("--relaxation", c.bench.iterative.relaxation, "DR relaxation");
}

int cmd_bench(BenchCmd& c, const CLI::App* sub, std::ostream& out) {
  c.bench.seed = c.common.seed;
  c.bench.jobs = c.common.jobs;
  c.bench.validate();
  const fs::path dir = prepare_out(c.common.out);
  const auto records = prox_benchmark(c.bench);
  write_prox_bench_csv(dir / "prox_bench.csv", records);
  const auto summary = summarize_prox_benchmark(records);

  std::ofstream f(dir / "prox_summary.csv");
  if (!f) throw IoError("cannot write prox_summary.csv");
  f << std::setprecision(17)
    << "d,sigma,solver,mean_wall_time_s,mean_relative_objective,max_relative_objective,mean_iterations,"
       "unconverged,instances\n";
  out << std::left << std::setw(8) << "d" << std::setw(8) << "sigma" << std::setw(10) << "solver" << std::setw(14)
      << "mean_time_s" << std::setw(14) << "mean_rel_obj" << "unconverged\n";
  for (const auto& s : summary) {
    f << s.dim << ',' << s.sigma << ',' << s.solver << ',' << s.mean_wall_time << ',' << s.mean_relative_objective
      << ',' << s.max_relative_objective << ',' << s.mean_iterations << ',' << s.unconverged << ','
      << s.instances << '\n';
    out << std::left << std::setw(8) << s.dim << std::setw(8) << s.sigma << std::setw(10) << s.solver
        << std::setw(14) << s.mean_wall_time << std::setw(14) << s.mean_relative_objective << s.unconverged
        << '\n';
  }

  json resolved;
  resolved["dims"] = c.bench.dims;
  resolved["sigmas"] = c.bench.sigmas;
  resolved["repeats"] = c.bench.repeats;
  resolved["precision"] = c.bench.precision;
  resolved["solvers"] = c.bench.solvers;
  resolved["stop_tol"] = c.bench.iterative.stop_tol;
  resolved["max_iterations"] = c.bench.iterative.max_iterations;
  resolved["dual_step"] = c.bench.iterative.dual_step;
  resolved["inertia"] = c.bench.iterative.inertia_a;
  resolved["dr_gamma"] = c.bench.iterative.dr_gamma;
  resolved["relaxation"] = c.bench.iterative.relaxation;
  resolved["jobs"] = c.bench.jobs;
  write_manifest(dir, "bench-prox", c.common, sub, resolved, {"prox_bench.csv", "prox_summary.csv"});
  return kExitOk;
}

// ---------------------------------------------------------------------------
// gradcheck
// ---------------------------------------------------------------------------

struct GradcheckCmd {
  Common common;
  std::string model, image;
  GradcheckOptions options;
};

void add_gradcheck_options(CLI::App* sub, GradcheckCmd& c) {
  add_common(sub, c.common, false);
  sub->add_option("--model", c.model, "Model directory");
  sub->add_option("--image", c.image, "Input tensor (default: uniform random from the seed)");
  sub->add_option("--tolerance", c.options.tolerance, "Maximum relative error");
  sub->add_option("--step", c.options.step, "Central difference step");
  sub->add_option("--coordinates", c.options.coordinates, "Coordinates checked");
}

int cmd_gradcheck(GradcheckCmd& c, const CLI::App* sub, std::ostream& out) {
  require(c.model, "--model");
  if (!(c.options.tolerance > 0.0)) throw ConfigError("--tolerance must be positive");
  if (!(c.options.step > 0.0)) throw ConfigError("--step must be positive");
  if (c.options.coordinates == 0) throw ConfigError("--coordinates must be positive");
  const fs::path dir = prepare_out(c.common.out);
  c.options.seed = c.common.seed;
  const auto model = load_model(c.model);

  TensorGrid x;
  if (c.image.empty()) {
    Rng rng(Rng(c.common.seed).fork(1).next_u64());
    x = TensorGrid(model->input_shape());
    for (double& v : x.values()) v = rng.uniform();
  } else {
    x = load_tensor(c.image);
  }
  const GradcheckReport rep = gradcheck(*model, x, c.options);

  json j;
  j["passed"] = rep.passed;
  j["max_relative_error"] = rep.max_relative_error;
  j["worst_index"] = rep.worst_index;
  j["coordinates"] = rep.coordinates;
  j["tolerance"] = rep.tolerance;
  write_json(dir / "gradcheck.json", j);

  json resolved;
  resolved["model"] = c.model;
  resolved["architecture"] = model->architecture();
  resolved["image"] = c.image.empty() ? "random" : c.image;
  resolved["tolerance"] = c.options.tolerance;
  resolved["step"] = c.options.step;
  resolved["coordinates"] = c.options.coordinates;
  write_manifest(dir, "gradcheck", c.common, sub, resolved, {"gradcheck.json"});

  out << (rep.passed ? "PASS" : "FAIL") << " max relative error " << rep.max_relative_error << " (tolerance "
      << rep.tolerance << ", " << rep.coordinates << " coordinates)\n";
  return rep.passed ? kExitOk : kExitInternal;
}

// ---------------------------------------------------------------------------
// report
// ---------------------------------------------------------------------------

struct ReportCmd {
  Common common;
  std::vector<std::string> records;
  std::optional<double> grid_step;
};

void add_report_options(CLI::App* sub, ReportCmd& c) {
  add_common(sub, c.common, false);
  sub->add_option("--records", c.records, "records.csv files from attack runs")->delimiter(',');
  sub->add_option("--grid-step", c.grid_step, "Failure-curve spacing (default 1/255)");
}

int cmd_report(ReportCmd& c, const CLI::App* sub, std::ostream& out) {
  if (c.records.empty()) throw ConfigError("--records is required");
  if (c.grid_step && !(*c.grid_step > 0.0 && *c.grid_step <= 1.0)) throw ConfigError("--grid-step must be in (0, 1]");
  const fs::path dir = prepare_out(c.common.out);

  std::vector<std::string> order;
  std::map<std::string, std::vector<BenchRecord>> by_attack;
  for (const auto& path : c.records) {
    for (auto& r : read_records_csv(path)) {
      if (!by_attack.count(r.attack)) order.push_back(r.attack);
      by_attack[r.attack].push_back(std::move(r));
    }
  }
  if (order.empty()) throw ConfigError("no records found");

  std::vector<double> grid;
  if (c.grid_step) {
    const auto n = static_cast<std::size_t>(std::floor(1.0 / *c.grid_step + 1e-9));
    for (std::size_t i = 0; i <= n; ++i) grid.push_back(std::min(1.0, static_cast<double>(i) * *c.grid_step));
  } else {
    grid = default_curve_grid();
  }

  fs::create_directories(dir / "curves");
  json report = json::array();
  out << std::left << std::setw(12) << "attack" << std::setw(9) << "samples" << std::setw(9) << "success"
      << std::setw(12) << "median/255" << "mean/255\n";
  for (const auto& name : order) {
    const auto& recs = by_attack[name];
    check_sample_id(name);
    const NormStats s = norm_stats(recs);
    write_curve_csv(dir / "curves" / (name + ".csv"), failure_curve(recs, grid));
    json e;
    e["attack"] = name;
    e["samples"] = s.samples;
    e["failures"] = s.failures;
    e["median_norm_255"] = s.median;
    e["mean_norm_255"] = s.mean;
    report.push_back(e);
    out << std::left << std::setw(12) << name << std::setw(9) << s.samples << std::setw(9)
        << s.samples - s.failures << std::setw(12) << s.median << s.mean << '\n';
  }
  write_json(dir / "report.json", report);

  json resolved;
  resolved["records"] = c.records;
  resolved["grid_points"] = grid.size();
  write_manifest(dir, "report", c.common, sub, resolved, {"report.json", "curves/"});
  return kExitOk;
}

// ---------------------------------------------------------------------------
// synth
// ---------------------------------------------------------------------------

struct SynthCmd {
  Common common;
  std::string architecture = "tiny_conv";
  std::size_t count = 10;
  std::size_t height = 16, width = 16, channels = 3, classes = 3, hidden = 8;
  std::size_t train_scenes = 16;
  std::size_t fit_steps = 600;
  std::size_t border = 0;
  SceneSpec scene;
};

void add_synth_options(CLI::App* sub, SynthCmd& c) {
  add_common(sub, c.common, false);
  sub->add_option("--architecture", c.architecture)->check(CLI::IsMember({"tiny_conv", "pixel_affine"}));
  sub->add_option("--count", c.count, "Samples to generate");
  sub->add_option("--height", c.height);
  sub->add_option("--width", c.width);
  sub->add_option("--channels", c.channels);
  sub->add_option("--classes", c.classes, "K (at least 3)");
  sub->add_option("--hidden", c.hidden, "tiny_conv hidden channels");
  sub->add_option("--train-scenes", c.train_scenes, "tiny_conv fitting set size");
  sub->add_option("--fit-steps", c.fit_steps, "tiny_conv Adam steps");
  sub->add_option("--unlabeled-border", c.border, "Width of the masked-out image border");
  sub->add_option("--regions", c.scene.regions, "Voronoi regions per scene");
  sub->add_option("--color-spread", c.scene.color_spread, "Class colours in 0.5 +/- spread");
  sub->add_option("--noise", c.scene.noise, "Pixel noise standard deviation");
}

int cmd_synth(SynthCmd& c, const CLI::App* sub, std::ostream& out) {
  if (c.count == 0 || c.height == 0 || c.width == 0 || c.channels == 0) {
    throw ConfigError("--count, --height, --width and --channels must be positive");
  }
  if (c.classes < 3) throw ConfigError("--classes must be at least 3");
  if (2 * c.border >= std::min(c.height, c.width)) throw ConfigError("--unlabeled-border leaves no labeled pixels");
  const fs::path dir = prepare_out(c.common.out);
  fs::create_directories(dir / "samples");

  SceneSpec spec = c.scene;
  spec.image = Shape{c.channels, c.height, c.width};
  spec.num_classes = c.classes;
  const Rng root(c.common.seed);
  std::unique_ptr<SegmentationModel> model;
  if (c.architecture == "tiny_conv") {
    FitOptions fit;
    fit.steps = c.fit_steps;
    model = std::make_unique<TinyConvModel>(
        make_fitted_tiny_conv(spec, c.hidden, c.train_scenes, root.fork(0).next_u64(), fit));
  } else {
    Rng rng = root.fork(0);
    model = std::make_unique<PixelAffineModel>(PixelAffineModel::random(spec.image, c.classes, rng));
  }
  model->save(dir / "model");

  std::vector<std::uint8_t> bits(c.height * c.width, 0);
  for (std::size_t r = c.border; r < c.height - c.border; ++r) {
    for (std::size_t col = c.border; col < c.width - c.border; ++col) bits[r * c.width + col] = 1;
  }
  const BinaryMask mask(c.height, c.width, bits);

  Rng scenes = root.fork(1);
  json list = json::array();
  std::vector<Scene> generated;
  for (std::size_t i = 0; i < c.count; ++i) {
    Scene scene = make_scene(spec, scenes);
    // The affine model is not fitted, so its own predictions serve as labels.
    if (c.architecture == "pixel_affine") scene.labels = predicted_labels(*model, scene.image);
    std::ostringstream id;
    id << "s" << std::setw(4) << std::setfill('0') << i;
    save_tensor(dir / "samples" / (id.str() + ".image.tensor"), scene.image);
    save_labels(dir / "samples" / (id.str() + ".labels.tensor"), scene.labels);
    save_mask(dir / "samples" / (id.str() + ".mask.tensor"), mask);
    json e;
    e["id"] = id.str();
    e["image"] = "samples/" + id.str() + ".image.tensor";
    e["labels"] = "samples/" + id.str() + ".labels.tensor";
    e["mask"] = "samples/" + id.str() + ".mask.tensor";
    list.push_back(e);
    generated.push_back(std::move(scene));
  }
  json samples;
  samples["samples"] = list;
  write_json(dir / "samples.json", samples);
  const double accuracy = pixel_accuracy(*model, generated);

  json resolved;
  resolved["architecture"] = c.architecture;
  resolved["shape"] = {c.channels, c.height, c.width};
  resolved["classes"] = c.classes;
  resolved["hidden"] = c.hidden;
  resolved["train_scenes"] = c.train_scenes;
  resolved["fit_steps"] = c.fit_steps;
  resolved["count"] = c.count;
  resolved["unlabeled_border"] = c.border;
  resolved["regions"] = spec.regions;
  resolved["color_spread"] = spec.color_spread;
  resolved["noise"] = spec.noise;
  resolved["palette_seed"] = spec.palette_seed;
  resolved["pixel_accuracy"] = accuracy;
  write_manifest(dir, "synth", c.common, sub, resolved, {"model/", "samples/", "samples.json"});
  out << "wrote " << c.count << " samples and a " << c.architecture << " model (pixel accuracy " << accuracy
      << ") to " << dir.string() << '\n';
  return kExitOk;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Minimal l-inf adversarial perturbations for dense per-pixel classifiers", "proxattack"};
  app.option_defaults()->always_capture_default();
  app.require_subcommand(1);

  AttackCmd attack;
  BenchCmd bench;
  GradcheckCmd grad;
  ReportCmd report;
  SynthCmd synth;
  CLI::App* s_attack = app.add_subcommand("attack", "Run an attack over one or more samples");
  CLI::App* s_bench = app.add_subcommand("bench-prox", "Benchmark prox solvers on random instances");
  CLI::App* s_grad = app.add_subcommand("gradcheck", "Check a model's vjp against finite differences");
  CLI::App* s_report = app.add_subcommand("report", "Aggregate attack records into statistics and curves");
  CLI::App* s_synth = app.add_subcommand("synth", "Generate a toy model and samples");
  add_attack_options(s_attack, attack);
  add_bench_options(s_bench, bench);
  add_gradcheck_options(s_grad, grad);
  add_report_options(s_report, report);
  add_synth_options(s_synth, synth);

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitConfig;
  }

  try {
    const auto prepare = [](CLI::App* sub, Common& c) {
      const auto applied = apply_config_file(sub, c.config);
      resolve_seed(c, sub, std::find(applied.begin(), applied.end(), "seed") != applied.end());
    };
    if (s_attack->parsed()) {
      prepare(s_attack, attack.common);
      return cmd_attack(attack, s_attack, out);
    }
    if (s_bench->parsed()) {
      prepare(s_bench, bench.common);
      return cmd_bench(bench, s_bench, out);
    }
    if (s_grad->parsed()) {
      prepare(s_grad, grad.common);
      return cmd_gradcheck(grad, s_grad, out);
    }
    if (s_report->parsed()) {
      prepare(s_report, report.common);
      return cmd_report(report, s_report, out);
    }
    prepare(s_synth, synth.common);
    return cmd_synth(synth, s_synth, out);
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const IoError& e) {
    err << "io error: " << e.what() << '\n';
    return kExitIo;
  } catch (const fs::filesystem_error& e) {
    err << "io error: " << e.what() << '\n';
    return kExitIo;
  } catch (const std::exception& e) {
    err << "internal error: " << e.what() << '\n';
    return kExitInternal;
  }
}

}  // namespace proxattack::cli
