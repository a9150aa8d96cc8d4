#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <sstream>

#include "mjp/feller.hpp"
#include "mjp/models.hpp"
#include "mjp/simulate.hpp"
#include "oracles.hpp"

using namespace mjp;

namespace {
constexpr double kKs1pc = 1.63;  // KS critical constant at the 1% level
}

TEST_CASE("holding times follow the exponential law for a constant rate") {
  const QModel m = make_constant_model(2.0);
  Rng rng = path_rng(12345, 0);
  std::vector<double> draws;
  draws.reserve(20000);
  for (int i = 0; i < 20000; ++i) {
    const auto tau = sample_holding(m, 0, 0.0, rng);
    REQUIRE(tau.has_value());
    draws.push_back(*tau);
  }
  double mean = 0.0;
  for (double v : draws) mean += v;
  mean /= static_cast<double>(draws.size());
  CHECK(mean == doctest::Approx(0.5).epsilon(0.02));
  const double d = oracles::ks_statistic(
      draws, [](double t) { return 1.0 - std::exp(-2.0 * t); });
  CHECK(d < kKs1pc / std::sqrt(static_cast<double>(draws.size())));
}

TEST_CASE("holding times track a time-varying rate") {
  // reciprocal rate on [0,1): tau solves log(1/(1-tau)) = E, so
  // tau = 1 - e^{-E} and the law of tau is uniform-like: F(t) = t on [0,1)
  const QModel m = make_reciprocal_model(1.0, 1e-9);
  Rng rng = path_rng(99, 7);
  std::vector<double> draws;
  for (int i = 0; i < 20000; ++i) {
    const auto tau = sample_holding(m, 0, 0.0, rng);
    if (!tau) continue;  // E larger than the integrated rate to the horizon
    draws.push_back(*tau);
  }
  // P(no jump before 1-1e-9) = 1e-9: effectively every draw jumps
  CHECK(draws.size() == 20000);
  const double d =
      oracles::ks_statistic(draws, [](double t) { return std::min(t, 1.0); });
  CHECK(d < kKs1pc / std::sqrt(static_cast<double>(draws.size())));
}

TEST_CASE("holding time returns nothing when the rate integral stays below E") {
  const QModel m = make_constant_model(0.0, 0.0, 10.0);
  Rng rng = path_rng(5, 5);
  for (int i = 0; i < 10; ++i) {
    CHECK_FALSE(sample_holding(m, 0, 0.0, rng, 10.0).has_value());
  }
}

TEST_CASE("jump targets follow the normalized kernel") {
  QModel m;
  m.t_begin = 0.0;
  m.rate = [](State, double) { return 4.0; };
  m.kernel = [](State, double) {
    return std::vector<KernelEntry>{{1, 3.0}, {2, 1.0}};
  };
  Rng rng = path_rng(2024, 1);
  int hit1 = 0;
  const int n = 40000;
  for (int i = 0; i < n; ++i) {
    if (sample_jump_target(m, 0, 0.1, rng) == 1) ++hit1;
  }
  const double p_hat = static_cast<double>(hit1) / n;
  CHECK(oracles::z_score(p_hat, 0.75, n) < 4.0);
}

TEST_CASE("paths respect time ordering and the jump cap") {
  const QModel m = make_yule_model();
  Rng rng = path_rng(7, 3);
  const PathSample path = sample_path(m, 0, 0.0, 2.0, rng, 50);
  REQUIRE(path.jump_times.size() == path.visited_states.size());
  for (std::size_t i = 1; i < path.jump_times.size(); ++i) {
    CHECK(path.jump_times[i] >= path.jump_times[i - 1]);
    CHECK(path.jump_times[i] <= 2.0);
  }
  // yule only moves up by one
  State prev = path.initial_state;
  for (State s : path.visited_states) {
    CHECK(s == prev + 1);
    prev = s;
  }
  CHECK_THROWS_AS((void)sample_path(m, 0, 1.0, 0.5, rng), std::invalid_argument);
}

TEST_CASE("identical seeds give bit-identical estimates") {
  const QModel m = make_oscillating_model();
  const auto states = oscillating_truncation(10);
  const auto a = mc_estimate(m, 0.0, 0, 1.0, 2000, 42, states);
  const auto b = mc_estimate(m, 0.0, 0, 1.0, 2000, 42, states);
  CHECK(a.counts == b.counts);
  CHECK(a.jump_count_hist == b.jump_count_hist);
  const auto c = mc_estimate(m, 0.0, 0, 1.0, 2000, 43, states);
  CHECK(a.counts != c.counts);
}

TEST_CASE("estimate counts partition the path total") {
  const QModel m = make_yule_model();
  const auto est = mc_estimate(m, 0.0, 0, 1.5, 5000, 11, range_truncation(6));
  std::uint64_t total = est.out_of_truncation + est.explosion_count;
  for (std::uint64_t c : est.counts) total += c;
  CHECK(total == est.n_paths);
  std::uint64_t hist_total = 0;
  for (std::uint64_t c : est.jump_count_hist) hist_total += c;
  CHECK(hist_total == est.n_paths);
}

TEST_CASE("empirical frequencies match the series solution") {
  const QModel m = make_poisson_model(1.0);
  const std::uint64_t n = 20000;
  const auto est = mc_estimate(m, 0.0, 0, 1.0, n, 7, range_truncation(12));
  for (int k = 0; k <= 5; ++k) {
    const double p = oracles::poisson_pmf(1.0, k);
    CHECK(oracles::z_score(est.p_hat(k), p, static_cast<double>(n)) < 4.0);
  }
  // jump-count histogram doubles as the per-term mass estimate here
  for (int k = 0; k <= 3; ++k) {
    const double p = oracles::poisson_pmf(1.0, k);
    const double f =
        static_cast<double>(est.jump_count_hist[k]) / static_cast<double>(n);
    CHECK(oracles::z_score(f, p, static_cast<double>(n)) < 4.0);
  }
}

TEST_CASE("explosion frequency matches the regularity defect") {
  const QModel m = make_pure_birth_model(2.0);
  const std::uint64_t n = 4000;
  const auto est = mc_estimate(m, 0.0, 0, 1.0, n, 99, range_truncation(34));
  const auto f = minimal_solution(m, 0.0, 0, make_time_grid(0.0, 1.0, 1e-3),
                                  range_truncation(34));
  const double defect = 1.0 - f.total_mass(f.times.size() - 1);
  CHECK(defect > 0.3);
  CHECK(oracles::z_score(est.explosion_frequency(), defect,
                         static_cast<double>(n)) < 4.0);
}

TEST_CASE("estimates serialize with their provenance") {
  const QModel m = make_poisson_model(1.0);
  const auto est = mc_estimate(m, 0.0, 0, 0.5, 100, 3, range_truncation(8));
  const nlohmann::json j = est.to_json();
  CHECK(j["seed"] == 3);
  CHECK(j["n_paths"] == 100);
  CHECK(j["p_hat"].size() == 8);
  CHECK(j["generator"] == "mt19937_64/splitmix64-substreams");
  std::ostringstream os;
  est.to_csv(os);
  CHECK(os.str().rfind("state,count,p_hat,std_err", 0) == 0);
  CHECK(os.str().find("seed=3") != std::string::npos);
}
