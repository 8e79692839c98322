#include <doctest.h>

#include <cmath>
#include <functional>

#include "oracles.hpp"
#include "proxattack/attacks.hpp"
#include "proxattack/bench.hpp"
#include "proxattack/synthetic.hpp"

using namespace proxattack;

namespace {

struct Fixture {
  SceneSpec spec;
  TinyConvModel model;
  Scene scene;
  BinaryMask mask;

  Fixture()
      : spec(make_spec()),
        model(make_fitted_tiny_conv(spec, 6, 6, 3)),
        scene(make_test_scene(spec)),
        mask(BinaryMask::full(spec.image.height, spec.image.width)) {}

  static SceneSpec make_spec() {
    SceneSpec s;
    s.image = Shape{3, 10, 10};
    return s;
  }
  static Scene make_test_scene(const SceneSpec& s) {
    Rng rng(1234);
    return make_scene(s, rng);
  }
  AttackProblem problem() const { return AttackProblem{model, scene.image, scene.labels, mask, false}; }
};

const Fixture& fixture() {
  static const Fixture f;
  return f;
}

void check_in_box(const TensorGrid& x, const TensorGrid& delta) {
  REQUIRE(delta.shape() == x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double v = x[i] + delta[i];
    CHECK(v >= 0.0);
    CHECK(v <= 1.0);
  }
}

// Reported success must agree with an independent APSR evaluation.
void check_result(const AttackProblem& p, const AttackResult& r, double nu = 0.99) {
  check_in_box(p.image, r.best_delta);
  const double rate = evaluate_apsr(p, r.best_delta);
  CHECK(r.success == (rate >= nu));
  if (r.success) {
    CHECK(r.best_norm == doctest::Approx(r.best_delta.linf_norm()).epsilon(1e-12));
  } else {
    CHECK(r.best_norm == 1.0);
  }
}

// Best norm starts at 1 and never increases.
void check_best_norm_trace(const AttackResult& r) {
  double prev = 1.0;
  for (const auto& e : r.trace) {
    CHECK(e.best_norm <= prev);
    prev = e.best_norm;
  }
}

LabelMap predicted_labels(const SegmentationModel& m, const TensorGrid& x) {
  const TensorGrid z = m.forward(x);
  std::vector<std::uint32_t> y(z.shape().pixels());
  for (std::size_t i = 0; i < y.size(); ++i) {
    std::vector<double> zi(z.shape().channels);
    for (std::size_t k = 0; k < zi.size(); ++k) zi[k] = z.at(k, i);
    y[i] = static_cast<std::uint32_t>(oracle::argmax(zi));
  }
  return LabelMap(z.shape().height, z.shape().width, z.shape().channels, y);
}

}  // namespace

TEST_SUITE("attacks") {
  TEST_CASE("variable metric step equals Adam without momentum") {
    Rng rng(1);
    const std::size_t n = 20;
    DiagonalMetric metric(n, 0.8, 1e-8);
    oracle::Adam adam(n, 0.0, 0.8, 1e-8);
    std::vector<double> a(n, 0.0), b(n, 0.0), g(n);
    for (int t = 0; t < 100; ++t) {
      for (double& v : g) v = rng.normal(0.0, std::exp(rng.uniform(-3.0, 3.0)));
      metric.update(g);
      a = metric.forward_step(a, g, 1e-3);
      adam.step(b, g, 1e-3);
      for (std::size_t i = 0; i < n; ++i) CHECK(a[i] == doctest::Approx(b[i]).epsilon(1e-12));
    }
    CHECK(metric.steps() == 100);
  }

  TEST_CASE("step schedule endpoints and config validation") {
    AlmaProxConfig cfg;
    CHECK(alma_step_size(cfg, 0) == doctest::Approx(cfg.step_init));
    CHECK(alma_step_size(cfg, cfg.iterations) == doctest::Approx(cfg.step_final));
    CHECK(alma_step_size(cfg, 250) == doctest::Approx(std::sqrt(cfg.step_init * cfg.step_final)));
    cfg.nu = 1.5;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
    cfg.nu = 0.99;
    cfg.iterations = 0;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);

    const auto& f = fixture();
    TensorGrid bad = f.scene.image;
    bad[0] = 1.5;
    const AttackProblem p{f.model, bad, f.scene.labels, f.mask, false};
    CHECK_THROWS_AS(alma_prox(p), ConfigError);
    const LabelMap wrong(5, 5, 3, std::vector<std::uint32_t>(25, 0));
    const AttackProblem q{f.model, f.scene.image, wrong, f.mask, false};
    CHECK_THROWS_AS(dag(q), ConfigError);
  }

  TEST_CASE("ALMA prox finds a valid adversarial perturbation") {
    const auto& f = fixture();
    const AttackProblem p = f.problem();
    const AttackResult r = alma_prox(p);
    CHECK(r.success);
    check_result(p, r);
    check_best_norm_trace(r);
    CHECK(r.forwards == 500);
    CHECK(r.backwards == 500);
    CHECK(r.trace.size() == 500);

    const AttackResult again = alma_prox(p);
    CHECK(again.best_delta.data() == r.best_delta.data());
  }

  TEST_CASE("DAG moves by eta on its first step and stops at the target rate") {
    const auto& f = fixture();
    const AttackProblem p = f.problem();
    DagConfig cfg;
    cfg.step = 0.002;
    const AttackResult r = dag(p, cfg);
    check_result(p, r);
    REQUIRE(r.trace.size() >= 2);
    CHECK(r.trace[0].norm == 0.0);
    CHECK(r.trace[1].norm == doctest::Approx(0.002).epsilon(1e-12));
    if (r.success) {
      CHECK(r.trace.back().apsr >= 0.99);
      for (std::size_t i = 0; i + 1 < r.trace.size(); ++i) CHECK(r.trace[i].apsr < 0.99);
    }
  }

  TEST_CASE("FMN and PDPGD keep the box and report consistently") {
    const auto& f = fixture();
    const AttackProblem p = f.problem();
    FmnConfig fc;
    fc.iterations = 200;
    const AttackResult fr = fmn_linf(p, fc);
    check_result(p, fr);
    check_best_norm_trace(fr);
    CHECK(fr.forwards == 200);

    PdpgdConfig pc;
    pc.iterations = 200;
    const AttackResult pr = pdpgd_linf(p, pc);
    check_result(p, pr);
    check_best_norm_trace(pr);
  }

  TEST_CASE("already adversarial inputs give a zero perturbation") {
    const auto& f = fixture();
    // Relabel every pixel with a class the model does not predict.
    const LabelMap pred = predicted_labels(f.model, f.scene.image);
    std::vector<std::uint32_t> other(pred.pixels());
    for (std::size_t i = 0; i < other.size(); ++i) other[i] = (pred[i] + 1) % 3;
    const LabelMap labels(pred.height(), pred.width(), 3, other);
    const AttackProblem p{f.model, f.scene.image, labels, f.mask, false};
    AlmaProxConfig ac;
    ac.iterations = 20;
    const auto checks = [&](const AttackResult& r) {
      CHECK(r.success);
      CHECK(r.best_norm == 0.0);
    };
    checks(alma_prox(p, ac));
    checks(dag(p));
    FmnConfig fc;
    fc.iterations = 20;
    checks(fmn_linf(p, fc));
    PdpgdConfig pc;
    pc.iterations = 20;
    checks(pdpgd_linf(p, pc));
    // Every probe succeeds when the inner attack returns zero.
    const AttackResult b =
        binary_search_attack(p, [](const AttackProblem& q, double) { return TensorGrid(q.image.shape()); });
    CHECK(b.success);
    CHECK(b.best_norm == 0.0);
    CHECK(b.trace.back().epsilon == std::ldexp(1.0, -13));
  }

  TEST_CASE("targeted ALMA prox reaches the target labels") {
    const auto& f = fixture();
    // Target the runner-up class of every pixel. With K = 3 a target that is
    // the lowest logit gives a constant constraint of 1 and no gradient.
    const TensorGrid z = f.model.forward(f.scene.image);
    std::vector<std::uint32_t> t(z.shape().pixels());
    for (std::size_t i = 0; i < t.size(); ++i) {
      std::vector<double> zi(3);
      for (std::size_t k = 0; k < 3; ++k) zi[k] = z.at(k, i);
      const std::size_t top = oracle::argmax(zi);
      zi[top] = -1e300;
      t[i] = static_cast<std::uint32_t>(oracle::argmax(zi));
    }
    const LabelMap targets(10, 10, 3, t);
    const AttackProblem p{f.model, f.scene.image, targets, f.mask, true};
    const AttackResult r = alma_prox(p);
    check_result(p, r);
    // Pixels can still fall into that flat region along the way, so only
    // substantial progress from APSR 0 is required here.
    CHECK(r.trace.front().apsr == 0.0);
    double top = 0.0;
    for (const auto& e : r.trace) top = std::max(top, e.apsr);
    CHECK(top >= 0.9);

    // Targeting the current prediction succeeds without moving.
    const AttackProblem q{f.model, f.scene.image, predicted_labels(f.model, f.scene.image), f.mask, true};
    AlmaProxConfig ac;
    ac.iterations = 10;
    const AttackResult trivial = alma_prox(q, ac);
    CHECK(trivial.success);
    CHECK(trivial.best_norm == 0.0);
  }

  TEST_CASE("fixed-budget attacks stay in the eps ball and the box") {
    const auto& f = fixture();
    const AttackProblem p = f.problem();
    for (double eps : {0.0, 0.01, 0.05, 0.6}) {
      PgdConfig pc;
      pc.restarts = 2;
      pc.seed = 3;
      for (const TensorGrid& d : {ifgsm(p, eps), mifgsm(p, eps), pgd(p, eps, pc)}) {
        check_in_box(p.image, d);
        CHECK(d.linf_norm() <= eps + 1e-12);
      }
    }
    PgdConfig a;
    a.restarts = 3;
    a.seed = 9;
    a.steps = 10;
    CHECK(pgd(p, 0.02, a).data() == pgd(p, 0.02, a).data());
    PgdConfig b = a;
    b.seed = 10;
    CHECK(pgd(p, 0.02, a).data() != pgd(p, 0.02, b).data());
    a.loss = PgdLoss::Dlr;
    check_in_box(p.image, pgd(p, 0.02, a));
  }

  TEST_CASE("epsilon bisection brackets a threshold with the exact probe count") {
    for (double threshold : {0.0, 1e-5, 0.0123, 0.5, 0.77777, 1.0}) {
      std::size_t calls = 0;
      const auto probe = [&](double eps) -> std::optional<TensorGrid> {
        ++calls;
        if (eps >= threshold) return TensorGrid(Shape{1, 1, 1}, eps);
        return std::nullopt;
      };
      const EpsilonSearch s = bisect_epsilon(probe, 13);
      CHECK(calls == 13);
      CHECK(s.probes == 13);
      CHECK(s.upper - s.lower == std::ldexp(1.0, -13));
      CHECK(s.upper >= threshold);
      CHECK(s.lower <= threshold);
      if (threshold < 1.0) {
        CHECK(s.lower < threshold + 1e-15);
        REQUIRE(s.best.has_value());
        CHECK((*s.best)[0] == s.upper);
      }
    }
    std::size_t calls = 0;
    const auto never = [&](double) -> std::optional<TensorGrid> {
      ++calls;
      return std::nullopt;
    };
    const EpsilonSearch s = bisect_epsilon(never, 5);
    CHECK(calls == 5);
    CHECK_FALSE(s.best.has_value());
    CHECK(s.upper == 1.0);
  }

  TEST_CASE("binary search attack wraps PGD") {
    const auto& f = fixture();
    const AttackProblem p = f.problem();
    PgdConfig pc;
    pc.steps = 20;
    const AttackResult r =
        binary_search_attack(p, [&](const AttackProblem& q, double eps) { return pgd(q, eps, pc); }, 8);
    check_result(p, r);
    CHECK(r.trace.size() == 8);
    CHECK(r.forwards >= 8 * 20);
  }

  TEST_CASE("PDPGD dual initialisation and simplex weights") {
    for (double r : {0.1, 1.0, 10.0}) {
      for (std::size_t n : {1u, 7u, 256u}) {
        const double w = std::exp(pdpgd_initial_dual(n, r));
        double total = 0.0;
        for (std::size_t i = 0; i < n; ++i) total += w;
        CHECK(total == doctest::Approx(1.0 / r).epsilon(1e-12));
      }
    }
    CHECK_THROWS_AS(pdpgd_initial_dual(0, 1.0), ConfigError);
    CHECK_THROWS_AS(pdpgd_initial_dual(4, 0.0), ConfigError);

    Rng rng(3);
    std::vector<double> l(16);
    for (double& v : l) v = rng.normal(0.0, 5.0);
    std::vector<std::uint8_t> bits(16, 1);
    bits[2] = 0;
    const BinaryMask m(4, 4, bits);
    const SimplexWeights sw = simplex_weights(l, m);
    double sum = 0.0, raw = 0.0;
    for (std::size_t i = 0; i < 16; ++i) {
      sum += sw.constraint[i];
      if (m[i]) raw += std::exp(l[i]);
    }
    CHECK(sw.constraint[2] == 0.0);
    CHECK(sw.norm + sum == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(sw.norm == doctest::Approx(1.0 / (1.0 + raw)).epsilon(1e-12));
  }
}
