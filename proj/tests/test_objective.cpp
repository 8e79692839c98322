#include <doctest.h>

#include <cmath>
#include <deque>

#include "oracles.hpp"
#include "proxattack/losses.hpp"
#include "proxattack/objective.hpp"

using namespace proxattack;

namespace {

TensorGrid random_logits(Rng& rng, std::size_t k, std::size_t h, std::size_t w) {
  TensorGrid z(Shape{k, h, w});
  for (double& v : z.values()) v = rng.normal(0.0, 2.0);
  return z;
}

LabelMap random_labels(Rng& rng, std::size_t k, std::size_t h, std::size_t w) {
  std::vector<std::uint32_t> y(h * w);
  for (auto& v : y) v = static_cast<std::uint32_t>(rng.index(k));
  return LabelMap(h, w, k, y);
}

// Central differences of f over every entry of z.
template <typename F>
std::vector<double> numeric_grad(TensorGrid z, F f, double h = 1e-6) {
  std::vector<double> g(z.size());
  for (std::size_t i = 0; i < z.size(); ++i) {
    const double keep = z[i];
    z[i] = keep + h;
    const double up = f(z);
    z[i] = keep - h;
    const double down = f(z);
    z[i] = keep;
    g[i] = (up - down) / (2.0 * h);
  }
  return g;
}

}  // namespace

TEST_SUITE("objective") {
  TEST_CASE("DLR constraint values by hand") {
    const std::vector<double> z{3.0, 1.0, 0.0, -1.0};
    CHECK(dlr_plus(z, 0) == doctest::Approx(2.0 / 3.0));
    CHECK(dlr_plus(z, 1) == doctest::Approx(-2.0 / 3.0));
    CHECK(dlr_plus(z, 3) == doctest::Approx(-4.0 / 3.0));
    CHECK(dlr_targeted(z, 0) == doctest::Approx(-2.0 / 3.0));
    CHECK(dlr_targeted(z, 2) == doctest::Approx(1.0));
    CHECK_THROWS_AS(dlr_plus(std::vector<double>{1.0, 0.0}, 0), ConfigError);
    CHECK_THROWS_AS(dlr_plus(std::vector<double>{1.0, 1.0, 1.0}, 0), NumericError);
  }

  TEST_CASE("constraint sign matches the argmax") {
    Rng rng(4);
    for (int trial = 0; trial < 500; ++trial) {
      std::vector<double> z(5);
      for (double& v : z) v = rng.normal();
      const std::size_t y = rng.index(5);
      const bool fooled = oracle::argmax(z) != y;
      CHECK((dlr_plus(z, y) < 0.0) == fooled);
      CHECK((dlr_targeted(z, y) < 0.0) == !fooled);
    }
  }

  TEST_CASE("constraint gradients match finite differences") {
    Rng rng(9);
    for (int trial = 0; trial < 100; ++trial) {
      std::vector<double> z(6);
      for (double& v : z) v = rng.normal(0.0, 3.0);
      const std::size_t y = rng.index(6);
      const bool targeted = trial % 2 == 0;
      std::vector<double> g(6);
      const double value = constraint_with_grad(z, y, targeted, g);
      CHECK(value == doctest::Approx(targeted ? dlr_targeted(z, y) : dlr_plus(z, y)));
      for (std::size_t k = 0; k < 6; ++k) {
        auto zp = z, zm = z;
        zp[k] += 1e-6;
        zm[k] -= 1e-6;
        const double fd = targeted ? (dlr_targeted(zp, y) - dlr_targeted(zm, y)) / 2e-6
                                   : (dlr_plus(zp, y) - dlr_plus(zm, y)) / 2e-6;
        CHECK(g[k] == doctest::Approx(fd).epsilon(1e-5).scale(1.0));
      }
    }
  }

  TEST_CASE("constraint vjp matches finite differences of a weighted sum") {
    Rng rng(10);
    const TensorGrid z = random_logits(rng, 4, 3, 5);
    const LabelMap y = random_labels(rng, 4, 3, 5);
    std::vector<double> u(15);
    for (double& v : u) v = rng.normal();
    u[3] = 0.0;
    for (bool targeted : {false, true}) {
      const TensorGrid g = constraints_vjp(z, y, targeted, u);
      const auto fd = numeric_grad(z, [&](const TensorGrid& zz) {
        const auto d = evaluate_constraints(zz, y, targeted);
        double s = 0.0;
        for (std::size_t i = 0; i < d.size(); ++i) s += u[i] * d[i];
        return s;
      });
      for (std::size_t i = 0; i < g.size(); ++i) CHECK(g[i] == doctest::Approx(fd[i]).epsilon(1e-5).scale(1.0));
    }
    const auto plain = evaluate_constraints(z, y, false);
    const auto shifted = evaluate_constraints(z, y, false, 0.25);
    for (std::size_t i = 0; i < plain.size(); ++i) CHECK(shifted[i] == doctest::Approx(plain[i] + 0.25));
  }

  TEST_CASE("penalty is C1 at zero and increasing") {
    for (double rho : {0.01, 0.5, 3.0}) {
      for (double mu : {1e-3, 1.0, 20.0}) {
        CHECK(penalty(0.0, rho, mu) == 0.0);
        CHECK(penalty(-1e-12, rho, mu) == doctest::Approx(0.0).epsilon(1e-9));
        CHECK(penalty_dy(0.0, rho, mu) == doctest::Approx(mu));
        CHECK(penalty_dy(-1e-12, rho, mu) == doctest::Approx(mu));
        for (double y : {-5.0, -0.3, 0.2, 2.0}) {
          const double fd = (penalty(y + 1e-6, rho, mu) - penalty(y - 1e-6, rho, mu)) / 2e-6;
          CHECK(penalty_dy(y, rho, mu) == doctest::Approx(fd).epsilon(1e-6));
          CHECK(penalty_dy(y, rho, mu) > 0.0);
        }
        // Lower bound: the negative branch tends to -mu / max(1, rho).
        CHECK(penalty(-1e9, rho, mu) > -mu / std::max(1.0, rho) - 1e-6);
      }
    }
  }

  TEST_CASE("percentile level schedule") {
    CHECK(mask_percentile_level(1, 500, 0.99) == 1.0);
    CHECK(mask_percentile_level(500, 500, 0.99) == 0.99);
    CHECK(mask_percentile_level(1, 1, 0.99) == 1.0);
    CHECK(mask_percentile_level(250, 499, 0.9) == doctest::Approx(0.95));
    double prev = 2.0;
    for (std::size_t t = 1; t <= 100; ++t) {
      const double q = mask_percentile_level(t, 100, 0.5);
      CHECK(q < prev);
      CHECK(q >= 0.5);
      prev = q;
    }
  }

  TEST_CASE("nearest-rank percentile and masks") {
    std::vector<double> values(100);
    for (std::size_t i = 0; i < 100; ++i) values[i] = static_cast<double>(99 - i) + 1.0;
    const BinaryMask full = BinaryMask::full(10, 10);
    CHECK(percentile_threshold(values, full, 0.99) == 99.0);
    CHECK(percentile_threshold(values, full, 1.0) == 100.0);
    CHECK(percentile_threshold(values, full, 0.0) == 1.0);

    // Unlabeled pixels are ignored unless the scope says otherwise.
    std::vector<std::uint8_t> bits(100, 1);
    for (std::size_t i = 0; i < 10; ++i) bits[i] = 0;  // the ten largest values
    const BinaryMask partial(10, 10, bits);
    CHECK(percentile_threshold(values, partial, 1.0) == 90.0);
    CHECK(percentile_threshold(values, partial, 1.0, PercentileScope::AllPixels) == 100.0);

    const BinaryMask start = compute_mask(values, partial, 1, 10, 0.9);
    CHECK(start == partial);
    const BinaryMask end = compute_mask(values, partial, 10, 10, 0.9);
    CHECK(end.count() == 81);  // ceil(0.9 * 90) smallest of the labeled values
    for (std::size_t i = 0; i < 10; ++i) CHECK_FALSE(end[i]);

    CHECK(strategy_mask(MaskingStrategy::Labeled, values, partial, 10, 10, 0.9) == partial);
    CHECK(strategy_mask(MaskingStrategy::Fixed, values, partial, 1, 10, 0.9) == end);
    CHECK_THROWS_AS(compute_mask(values, partial, 0, 10, 0.9), ConfigError);
  }

  TEST_CASE("scale update grows on failure and shrinks on success") {
    ScaleState s{0.5, 0.02, 0.1, 0.99};
    CHECK(update_scale(s, 0.5).w == doctest::Approx(0.5 / 0.98));
    CHECK(update_scale(s, 0.995).w == doctest::Approx(0.5 / 1.02));
    s.w = 1.0;
    CHECK(update_scale(s, 0.0).w == 1.0);
    s.w = 0.1;
    CHECK(update_scale(s, 1.0).w == 0.1);
  }

  TEST_CASE("multiplier update follows the smoothed penalty derivative") {
    PenaltyParams p = PenaltyParams::uniform(4, 0.5, 2.0);
    p.alpha = 0.8;
    const std::vector<double> d{-1.0, 0.0, 3.0, 1e9};
    const BinaryMask active(2, 2, {1, 1, 1, 0});
    const double w = 0.7;
    const PenaltyParams q = update_multipliers(p, d, w, active);
    for (std::size_t i = 0; i < 3; ++i) {
      const double y = w * d[i];
      const double dp = y >= 0.0 ? 2.0 + 2.0 * 2.0 * 0.5 * y + 0.5 * 0.25 * y * y : 2.0 / ((1.0 - y) * (1.0 - y));
      CHECK(q.mu[i] == doctest::Approx(0.8 * 2.0 + 0.2 * w * dp));
    }
    CHECK(q.mu[3] == doctest::Approx(1.6));  // inactive pixel decays towards 0

    PenaltyParams big = PenaltyParams::uniform(1, 1.0, 1e6);
    CHECK(update_multipliers(big, std::vector<double>{1e6}, 1.0, BinaryMask::full(1, 1)).mu[0] == 1e6);
    PenaltyParams tiny = PenaltyParams::uniform(1, 1.0, 1e-6);
    CHECK(update_multipliers(tiny, std::vector<double>{1.0}, 1.0, BinaryMask(1, 1, {1})).mu[0] >= 1e-6);
  }

  TEST_CASE("rho grows only where there is neither success nor progress") {
    PenaltyParams p = PenaltyParams::uniform(4, 1.0, 1.0);
    p.check_period = 2;
    p.improvement_rate = 0.5;
    p.gamma = 3.0;
    // pixel 0: satisfied within the window; pixel 1: improved by more than half;
    // pixel 2: stuck; pixel 3: stuck and inactive.
    std::deque<std::vector<double>> history{
        {1.0, 1.0, 1.0, 1.0},
        {-0.1, 0.8, 1.0, 1.0},
        {0.5, 0.4, 0.9, 0.9},
    };
    const BinaryMask active(2, 2, {1, 1, 1, 0});
    const PenaltyParams q = update_rho(p, history, active);
    CHECK(q.rho == std::vector<double>{1.0, 1.0, 3.0, 3.0});
    CHECK_THROWS_AS(update_rho(p, {}, active), ConfigError);
  }

  TEST_CASE("mean losses and their gradients") {
    Rng rng(12);
    const TensorGrid z = random_logits(rng, 5, 4, 4);
    const LabelMap y = random_labels(rng, 5, 4, 4);
    std::vector<std::uint8_t> bits(16, 1);
    bits[0] = bits[7] = 0;
    const BinaryMask m(4, 4, bits);

    TensorGrid g;
    masked_cross_entropy(z, y, m, &g);
    auto fd = numeric_grad(z, [&](const TensorGrid& zz) { return masked_cross_entropy(zz, y, m); });
    for (std::size_t i = 0; i < g.size(); ++i) CHECK(g[i] == doctest::Approx(fd[i]).epsilon(1e-5).scale(1.0));

    // Cross-entropy by hand for one masked pixel.
    double ce = 0.0;
    for (std::size_t i = 0; i < 16; ++i) {
      if (!m[i]) continue;
      double lse = 0.0;
      for (std::size_t k = 0; k < 5; ++k) lse += std::exp(z.at(k, i));
      ce += std::log(lse) - z.at(y[i], i);
    }
    CHECK(masked_cross_entropy(z, y, m) == doctest::Approx(ce / 14.0));

    for (bool targeted : {false, true}) {
      masked_dlr(z, y, m, targeted, &g);
      fd = numeric_grad(z, [&](const TensorGrid& zz) { return masked_dlr(zz, y, m, targeted); });
      for (std::size_t i = 0; i < g.size(); ++i) CHECK(g[i] == doctest::Approx(fd[i]).epsilon(1e-5).scale(1.0));
      masked_logit_margin(z, y, m, targeted, &g);
      fd = numeric_grad(z, [&](const TensorGrid& zz) { return masked_logit_margin(zz, y, m, targeted); });
      for (std::size_t i = 0; i < g.size(); ++i) CHECK(g[i] == doctest::Approx(fd[i]).epsilon(1e-5).scale(1.0));
    }
    // Gradients vanish on unlabeled pixels.
    masked_cross_entropy(z, y, m, &g);
    for (std::size_t k = 0; k < 5; ++k) CHECK(g.at(k, 7) == 0.0);
  }
}
