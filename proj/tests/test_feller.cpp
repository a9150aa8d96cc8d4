#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <sstream>

#include "mjp/feller.hpp"
#include "mjp/models.hpp"
#include "oracles.hpp"

using namespace mjp;

namespace {

// one-jump value from x to y at time t for a time-homogeneous model with
// q(x) = a, q(x,{y}) = r, q(y) = b:  r * int_u^t e^{-a(w-u)} e^{-b(t-w)} dw
double one_jump_value(double a, double r, double b, double u, double t) {
  return r * oracles::integrate(
                 [&](double w) {
                   return std::exp(-a * (w - u)) * std::exp(-b * (t - w));
                 },
                 u, t);
}

}  // namespace

TEST_CASE("time grid helper") {
  const auto g = make_time_grid(0.0, 1.0, 0.25);
  REQUIRE(g.size() == 4);
  CHECK(g.front() == doctest::Approx(0.25));
  CHECK(g.back() == doctest::Approx(1.0));
  const auto fine = make_time_grid(0.0, 1.0, 1e-3);
  CHECK(fine.size() == 1000);
  CHECK(fine.back() == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("zero-jump term is the survival probability on the diagonal") {
  SUBCASE("zero rate: mass stays put") {
    const QModel m = make_constant_model(0.0);
    const auto f = term0(m, 0.0, 0, make_time_grid(0.0, 1.0, 0.5), {0, 1});
    CHECK(f.value(f.time_index(1.0), 0) == doctest::Approx(1.0));
    CHECK(f.value(f.time_index(1.0), 1) == 0.0);
  }
  SUBCASE("oscillating start at the origin") {
    const QModel m = make_oscillating_model();
    const auto f =
        term0(m, 0.0, 0, make_time_grid(0.0, 1.0, 0.25), oscillating_truncation(2));
    CHECK(f.value(f.time_index(1.0), 0) ==
          doctest::Approx(std::exp(-1.0)).epsilon(1e-12));
    CHECK(f.value(f.time_index(0.5), 0) ==
          doctest::Approx(std::exp(-0.5)).epsilon(1e-12));
    CHECK(f.value(f.time_index(1.0), oscillating_index(1)) == 0.0);
  }
  SUBCASE("time-varying rate with closed-form survival") {
    const QModel m = make_reciprocal_model(1.0);
    const auto f = term0(m, 0.0, 0, make_time_grid(0.0, 0.75, 0.25), {0, 1});
    // exp(-log((1-0)/(1-t))) = 1 - t
    CHECK(f.value(f.time_index(0.75), 0) == doctest::Approx(0.25).epsilon(1e-12));
  }
}

TEST_CASE("one-jump term matches independent quadrature") {
  SUBCASE("constant rate 2, partner flip") {
    const QModel m = make_constant_model(2.0);
    const auto t0f = term0(m, 0.0, 0, make_time_grid(0.0, 1.0, 1e-3), {0, 1});
    const auto t1f = next_term(m, t0f, TermVariant::ForwardForm);
    CHECK(t1f.term_index == 1);
    // 2 e^{-2}: both holding rates equal
    CHECK(t1f.value(t1f.time_index(1.0), 1) ==
          doctest::Approx(2.0 * std::exp(-2.0)).epsilon(1e-7));
    CHECK(t1f.value(t1f.time_index(1.0), 1) ==
          doctest::Approx(one_jump_value(2.0, 2.0, 2.0, 0.0, 1.0)).epsilon(1e-7));
  }
  SUBCASE("oscillating, stiff target") {
    const QModel m = make_oscillating_model();
    const auto t0f = term0(m, 0.0, 0, make_time_grid(0.0, 1.0, 1e-3),
                           oscillating_truncation(6));
    const auto t1f = next_term(m, t0f, TermVariant::ForwardForm);
    // 0 -> j=5 with kernel weight 2^-6 and target rate 2^5
    const double expected = 0.000185423105429148;
    CHECK(t1f.value(t1f.time_index(1.0), oscillating_index(5)) ==
          doctest::Approx(expected).epsilon(1e-5));
    CHECK(expected ==
          doctest::Approx(one_jump_value(1.0, std::ldexp(1.0, -6),
                                         32.0, 0.0, 1.0)).epsilon(1e-12));
  }
}

TEST_CASE("forward and backward term recursions agree") {
  const QModel m = make_poisson_model(1.0);
  const auto grid = make_time_grid(0.0, 0.5, 2.5e-2);
  const auto states = range_truncation(8);
  SolutionField fwd = term0(m, 0.0, 0, grid, states);
  for (int n = 1; n <= 3; ++n) {
    fwd = next_term(m, fwd, TermVariant::ForwardForm);
    const auto seed = term0(m, 0.0, 0, grid, states);
    SolutionField bwd = seed;
    for (int k = 1; k <= n; ++k) bwd = next_term(m, bwd, TermVariant::BackwardForm);
    double worst = 0.0;
    for (std::size_t ti = 0; ti < grid.size(); ++ti) {
      for (std::size_t si = 0; si < states.size(); ++si) {
        worst = std::max(worst,
                         std::abs(fwd.value_at(ti, si) - bwd.value_at(ti, si)));
      }
    }
    CAPTURE(n);
    CHECK(worst < 1e-6);
  }
}

TEST_CASE("per-term mass is the n-jump probability") {
  const QModel m = make_poisson_model(1.0);
  const auto f = minimal_solution(m, 0.0, 0, make_time_grid(0.0, 1.0, 1e-3),
                                  range_truncation(30));
  REQUIRE(static_cast<int>(f.term_mass.size()) >= 5);
  for (int n = 0; n <= 4; ++n) {
    CHECK(f.term_mass[n] ==
          doctest::Approx(oracles::poisson_pmf(1.0, n)).epsilon(1e-6));
  }
}

TEST_CASE("series solution matches the Poisson law") {
  const QModel m = make_poisson_model(1.0);
  const auto f = minimal_solution(m, 0.0, 0, make_time_grid(0.0, 1.0, 1e-3),
                                  range_truncation(30));
  for (double t : {0.25, 0.5, 1.0}) {
    const std::size_t ti = f.time_index(t);
    for (int k = 0; k <= 10; ++k) {
      CHECK(std::abs(f.value(ti, static_cast<State>(k)) -
                     oracles::poisson_pmf(t, k)) < 1e-6);
    }
  }
  CHECK(f.truncation_outflow < 1e-12);  // K=30 swallows everything
}

TEST_CASE("series solution matches the Yule law") {
  const QModel m = make_yule_model();
  const auto f = minimal_solution(m, 0.0, 0, make_time_grid(0.0, 1.0, 1e-3),
                                  range_truncation(40));
  const std::size_t ti = f.time_index(1.0);
  for (int k = 0; k <= 10; ++k) {
    CHECK(std::abs(f.value(ti, static_cast<State>(k)) -
                   oracles::yule_pmf(1.0, k)) < 1e-6);
  }
}

TEST_CASE("series solution agrees with a matrix-exponential oracle") {
  // two-state flip chain with unequal story: custom rates via QModel directly
  QModel m;
  m.t_begin = 0.0;
  m.rate = [](State x, double) { return x == 0 ? 1.0 : 3.0; };
  m.kernel = [](State x, double) {
    return std::vector<KernelEntry>{{x ^ 1u, x == 0 ? 1.0 : 3.0}};
  };
  const auto f =
      minimal_solution(m, 0.0, 0, make_time_grid(0.0, 1.0, 1e-3), {0, 1});
  const auto P = oracles::transition_matrix({1.0, 3.0}, {{{1, 1.0}}, {{0, 3.0}}},
                                            2, 1.0);
  CHECK(std::abs(f.value(f.time_index(1.0), 0) - P[0]) < 5e-7);
  CHECK(std::abs(f.value(f.time_index(1.0), 1) - P[1]) < 5e-7);
}

TEST_CASE("mass stays in [0, 1] and grows with the truncation") {
  const QModel m = make_oscillating_model();
  const auto grid = make_time_grid(0.0, 1.0, 5e-3);
  const auto small = minimal_solution(m, 0.0, 0, grid, oscillating_truncation(4));
  const auto large = minimal_solution(m, 0.0, 0, grid, oscillating_truncation(8));
  for (std::size_t ti = 0; ti < grid.size(); ++ti) {
    const double ms = small.total_mass(ti);
    const double ml = large.total_mass(ti);
    CHECK(ms >= 0.0);
    CHECK(ml <= 1.0 + 1e-9);
    CHECK(ml >= ms - 1e-9);  // truncation monotonicity
    // entrywise: each tabulated value only grows when the truncation widens
    for (std::size_t si = 0; si < small.states.size(); ++si) {
      const std::size_t sl = large.state_pos(small.states[si]);
      REQUIRE(sl != SolutionField::npos);
      CHECK(large.value_at(ti, sl) >= small.value_at(ti, si) - 1e-9);
    }
  }
  CHECK(small.truncation_outflow > large.truncation_outflow - 1e-12);
}

TEST_CASE("grid refinement converges at second order") {
  const QModel m = make_poisson_model(1.0);
  auto err_at = [&](double h) {
    const auto f =
        minimal_solution(m, 0.0, 0, make_time_grid(0.0, 1.0, h),
                         range_truncation(30));
    double worst = 0.0;
    const std::size_t ti = f.time_index(1.0);
    for (int k = 0; k <= 10; ++k) {
      worst = std::max(worst, std::abs(f.value(ti, static_cast<State>(k)) -
                                       oracles::poisson_pmf(1.0, k)));
    }
    return worst;
  };
  const double e4 = err_at(4e-3), e2 = err_at(2e-3), e1 = err_at(1e-3);
  CAPTURE(e4);
  CAPTURE(e2);
  CAPTURE(e1);
  CHECK(e2 < e4);
  CHECK(e1 < e2);
  CHECK(e4 / e1 > 8.0);  // ~16 expected for a second-order rule
}

TEST_CASE("non-convergence carries the partial field") {
  const QModel m = make_poisson_model(1.0);
  SolveOptions opts;
  opts.max_terms = 2;
  try {
    (void)minimal_solution(m, 0.0, 0, make_time_grid(0.0, 1.0, 1e-2),
                           range_truncation(20), opts);
    FAIL("expected NonConvergenceError");
  } catch (const NonConvergenceError& e) {
    CHECK(e.partial.terms_used == 2);
    CHECK(e.partial.total_mass(e.partial.times.size() - 1) > 0.5);
  }
}

TEST_CASE("chapman-kolmogorov residual is small for regular chains") {
  const QModel m = make_poisson_model(1.0);
  const auto states = range_truncation(25);
  const auto fa = minimal_solution(m, 0.0, 0, make_time_grid(0.0, 1.0, 1e-3),
                                   states);
  std::vector<SolutionField> mids;
  for (State y : states) {
    mids.push_back(minimal_solution(m, 0.5, y, make_time_grid(0.5, 1.0, 1e-3),
                                    states));
  }
  const double r = ck_residual(fa, mids, 0.5, 1.0);
  CHECK(r < 1e-5 + fa.truncation_outflow);

  // mid fields from the wrong start state are rejected
  std::swap(mids[0], mids[1]);
  CHECK_THROWS_AS((void)ck_residual(fa, mids, 0.5, 1.0), std::invalid_argument);
}

TEST_CASE("regularity defect separates regular from explosive models") {
  const auto grid = make_time_grid(0.0, 1.0, 1e-3);
  const QModel reg = make_poisson_model(1.0);
  const auto fr = minimal_solution(reg, 0.0, 0, grid, range_truncation(30));
  const auto dr = regularity_defect(fr, 1.0);
  CHECK(std::abs(dr.defect) < 1e-6);

  const QModel expl = make_pure_birth_model(2.0);
  const auto fe = minimal_solution(expl, 0.0, 0, grid, range_truncation(34));
  const auto de = regularity_defect(fe, 1.0);
  CHECK(de.defect > 0.3);  // genuinely explosive by t = 1
  CHECK(fe.explosive_outflow > 0.3);
  CHECK(fe.returning_outflow < 1e-6);  // pure birth never comes back
}

TEST_CASE("backward family agrees with the forward-built field at the first node") {
  const QModel m = make_poisson_model(1.0);
  const auto grid = make_time_grid(0.0, 0.5, 2.5e-2);
  const auto states = range_truncation(10);
  const auto fam = backward_family(m, 0.0, grid, states);
  REQUIRE(fam.nodes.size() == grid.size() + 1);
  CHECK(fam.t == doctest::Approx(0.5));
  const auto f = minimal_solution(m, 0.0, 0, grid, states);
  const std::size_t ti = f.time_index(0.5);
  for (std::size_t yp = 0; yp < states.size(); ++yp) {
    CHECK(fam.value(0, 0, yp) ==
          doctest::Approx(f.value_at(ti, yp)).epsilon(1e-6).scale(1.0));
  }
  // at the terminal node the family is the indicator
  const std::size_t last = fam.nodes.size() - 1;
  CHECK(fam.value(last, 3, 3) == doctest::Approx(1.0));
  CHECK(fam.value(last, 3, 4) == doctest::Approx(0.0));
}

TEST_CASE("field serialization round-trips the payload") {
  const QModel m = make_constant_model(1.0);
  const auto f =
      minimal_solution(m, 0.0, 0, make_time_grid(0.0, 1.0, 0.5), {0, 1});
  const nlohmann::json j = field_to_json(f);
  CHECK(j["u"] == 0.0);
  CHECK(j["x"] == 0);
  CHECK(j["times"].size() == 2);
  CHECK(j["states"].size() == 2);
  REQUIRE(j["values"].size() == 2);  // nested rows: [time][state]
  REQUIRE(j["values"][1].size() == 2);
  CHECK(double(j["values"][1][0]) == doctest::Approx(f.value_at(1, 0)));

  std::ostringstream os;
  field_to_csv(f, os);
  const std::string csv = os.str();
  CHECK(csv.rfind("t,state,value", 0) == 0);
  CHECK(csv.find("\n1,") != std::string::npos);
}
