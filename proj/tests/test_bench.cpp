#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "oracles.hpp"
#include "proxattack/bench.hpp"

using namespace proxattack;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / "proxattack_bench_tests";
  fs::create_directories(dir);
  return dir / name;
}

BenchRecord record(const std::string& id, bool success, double norm) {
  BenchRecord r;
  r.sample_id = id;
  r.attack = "alma_prox";
  r.success = success;
  r.linf_norm = norm;
  r.apsr = success ? 1.0 : 0.5;
  return r;
}

}  // namespace

TEST_SUITE("bench") {
  TEST_CASE("fooled pixels and APSR against argmax") {
    Rng rng(2);
    TensorGrid z(Shape{4, 3, 3});
    for (double& v : z.values()) v = rng.normal();
    std::vector<std::uint32_t> y(9);
    for (auto& v : y) v = static_cast<std::uint32_t>(rng.index(4));
    const LabelMap labels(3, 3, 4, y);
    const BinaryMask mask(3, 3, {1, 1, 1, 0, 1, 1, 1, 1, 0});

    const auto fooled = fooled_pixels(z, labels, false);
    const auto hit = fooled_pixels(z, labels, true);
    double count = 0.0, count_t = 0.0;
    for (std::size_t i = 0; i < 9; ++i) {
      std::vector<double> zi(4);
      for (std::size_t k = 0; k < 4; ++k) zi[k] = z.at(k, i);
      const bool f = oracle::argmax(zi) != y[i];
      CHECK(static_cast<bool>(fooled[i]) == f);
      CHECK(static_cast<bool>(hit[i]) == !f);
      if (mask[i]) {
        count += f;
        count_t += !f;
      }
    }
    CHECK(apsr(z, labels, mask, false) == doctest::Approx(count / 7.0));
    CHECK(apsr(z, labels, mask, true) == doctest::Approx(count_t / 7.0));

    // Ties go to the lowest index.
    const TensorGrid flat(Shape{3, 1, 1}, {1.0, 1.0, 0.0});
    CHECK(fooled_pixels(flat, LabelMap(1, 1, 3, {0}), false)[0] == 0);
    CHECK(fooled_pixels(flat, LabelMap(1, 1, 3, {1}), false)[0] == 1);
  }

  TEST_CASE("failure curve and norm statistics") {
    const std::vector<BenchRecord> rs{record("a", true, 2.0 / 255.0), record("b", true, 4.0 / 255.0),
                                      record("c", false, 1.0), record("d", true, 0.0)};
    const std::vector<double> grid{0.0, 1.0 / 255.0, 2.0 / 255.0, 3.0 / 255.0, 4.0 / 255.0, 1.0};
    const auto curve = failure_curve(rs, grid);
    REQUIRE(curve.size() == grid.size());
    CHECK(curve[0].failure_rate == doctest::Approx(0.75));
    CHECK(curve[1].failure_rate == doctest::Approx(0.75));
    CHECK(curve[2].failure_rate == doctest::Approx(0.5));
    CHECK(curve[3].failure_rate == doctest::Approx(0.5));
    CHECK(curve[4].failure_rate == doctest::Approx(0.25));
    // A failed sample stays failed even at epsilon = 1.
    CHECK(curve[5].failure_rate == doctest::Approx(0.25));
    for (std::size_t i = 1; i < curve.size(); ++i) CHECK(curve[i].failure_rate <= curve[i - 1].failure_rate);

    const auto grid256 = default_curve_grid();
    CHECK(grid256.size() == 256);
    CHECK(grid256.front() == 0.0);
    CHECK(grid256.back() == 1.0);

    const NormStats st = norm_stats(rs);
    CHECK(st.samples == 4);
    CHECK(st.failures == 1);
    // sorted: 0, 2, 4, 255
    CHECK(st.median == doctest::Approx(3.0));
    CHECK(st.mean == doctest::Approx((0.0 + 2.0 + 4.0 + 255.0) / 4.0));
    const std::vector<BenchRecord> odd{rs[0], rs[1], rs[3]};
    CHECK(norm_stats(odd).median == doctest::Approx(2.0));
  }

  TEST_CASE("records CSV round trip and malformed input") {
    std::vector<BenchRecord> rs{record("img_0", true, 0.0123456789), record("img_1", false, 1.0)};
    rs[0].wall_time = 0.5;
    rs[0].forwards = 500;
    rs[0].backwards = 499;
    const fs::path path = scratch("records.csv");
    write_records_csv(path, rs);
    {
      std::ifstream in(path);
      std::string header;
      std::getline(in, header);
      CHECK(header == kRecordsHeader);
    }
    const auto back = read_records_csv(path);
    REQUIRE(back.size() == 2);
    CHECK(back[0].sample_id == "img_0");
    CHECK(back[0].success);
    CHECK(back[0].linf_norm == doctest::Approx(0.0123456789).epsilon(1e-12));
    CHECK(back[0].forwards == 500);
    CHECK(back[0].backwards == 499);
    CHECK_FALSE(back[1].success);

    CHECK_THROWS_AS(read_records_csv(scratch("missing.csv")), IoError);
    std::ofstream(scratch("bad.csv")) << kRecordsHeader << "\nimg,alma_prox,1,notanumber,1,0,1,1\n";
    CHECK_THROWS_AS(read_records_csv(scratch("bad.csv")), IoError);
    std::ofstream(scratch("short.csv")) << kRecordsHeader << "\nimg,alma_prox,1\n";
    CHECK_THROWS_AS(read_records_csv(scratch("short.csv")), IoError);
    std::ofstream(scratch("header.csv")) << "a,b,c\n";
    CHECK_THROWS_AS(read_records_csv(scratch("header.csv")), IoError);
  }

  TEST_CASE("prox instances and solver dispatch") {
    Rng rng(4);
    const ProxProblem p = make_prox_instance(64, 0.5, rng);
    CHECK(p.delta.size() == 64);
    CHECK((p.lambda >= 0.1 && p.lambda <= 1000.0));
    for (double v : p.anchor.values()) CHECK((v >= 0.0 && v <= 1.0));
    const auto a = run_prox_solver("ternary", p, {});
    CHECK(a.objective == doctest::Approx(prox_ternary(p).objective));
    CHECK_THROWS_AS(run_prox_solver("newton", p, {}), ConfigError);
  }

  TEST_CASE("prox benchmark is deterministic and independent of jobs") {
    ProxBenchConfig cfg;
    cfg.dims = {32, 64};
    cfg.sigmas = {0.1, 1.0};
    cfg.repeats = 3;
    cfg.seed = 17;
    cfg.jobs = 1;
    const auto one = prox_benchmark(cfg);
    cfg.jobs = 4;
    const auto four = prox_benchmark(cfg);
    REQUIRE(one.size() == 2 * 2 * 3 * 4);
    REQUIRE(four.size() == one.size());
    for (std::size_t i = 0; i < one.size(); ++i) {
      CHECK(one[i].solver == four[i].solver);
      CHECK(one[i].lambda == four[i].lambda);
      CHECK(one[i].objective == four[i].objective);
      CHECK(one[i].iterations == four[i].iterations);
      if (one[i].solver == "ternary") CHECK(one[i].relative_objective == 1.0);
      // The ternary answer is only accurate to the beta tolerance, worth up to
      // about lambda * precision in objective.
      if (one[i].converged) {
        const double ternary = one[i].objective / one[i].relative_objective;
        CHECK(one[i].objective >= ternary - 2.0 * one[i].lambda * cfg.precision - 1e-9);
      }
    }
    const auto summary = summarize_prox_benchmark(one);
    CHECK(summary.size() == 2 * 2 * 4);
    for (const auto& s : summary) CHECK(s.instances == 3);

    cfg.sigmas = {};
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
    cfg.sigmas = {-1.0};
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
  }
}
