#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <fstream>

#include "mjp/models.hpp"

using namespace mjp;

TEST_CASE("oscillating index interleaving round-trips") {
  CHECK(oscillating_index(0) == 0);
  CHECK(oscillating_index(1) == 1);
  CHECK(oscillating_index(-1) == 2);
  CHECK(oscillating_index(3) == 5);
  CHECK(oscillating_index(-3) == 6);
  for (int j = -40; j <= 40; ++j) {
    CHECK(oscillating_value(oscillating_index(j)) == j);
  }
  const auto trunc = oscillating_truncation(5);
  CHECK(trunc.size() == 11);
  CHECK(trunc.front() == 0);
  CHECK(trunc.back() == 10);
  const auto rng = range_truncation(4);
  CHECK(rng == std::vector<State>{0, 1, 2, 3});
}

TEST_CASE("oscillating model rates and flip kernel") {
  const QModel m = make_oscillating_model();
  CHECK(m.rate(oscillating_index(0), 0.3) == 1.0);
  for (int j : {1, -1, 4, -4, 20, -20}) {
    const State i = oscillating_index(j);
    CHECK(m.rate(i, 0.3) == std::ldexp(1.0, std::abs(j)));
    const auto k = m.kernel(i, 0.3);
    REQUIRE(k.size() == 1);
    CHECK(k[0].target == oscillating_index(-j));
    CHECK(k[0].rate == m.rate(i, 0.3));
  }
}

TEST_CASE("oscillating kernel at 0 is exactly conservative with the tail folded") {
  const QModel m = make_oscillating_model(45);
  const auto k = m.kernel(0, 0.0);
  CHECK(k.size() == 90);
  double mass = 0.0;
  for (const auto& e : k) mass += e.rate;
  CHECK(mass == 1.0);  // exact: dyadic weights plus folded tail
  // the |j| = 2 pair carries 2^-3 each
  double w2 = 0.0;
  for (const auto& e : k) {
    if (e.target == oscillating_index(2) || e.target == oscillating_index(-2)) {
      w2 += e.rate;
    }
  }
  CHECK(w2 == doctest::Approx(0.25));
}

TEST_CASE("pure-birth rates double in the exponent") {
  const QModel m = make_pure_birth_model(2.0);
  CHECK(m.rate(0, 0.1) == 2.0);
  CHECK(m.rate(4, 0.1) == 32.0);
  CHECK(m.kernel(3, 0.1)[0].target == 4);
  CHECK_THROWS_AS((void)make_pure_birth_model(1.0), InvalidModelError);
}

TEST_CASE("yule and poisson builders") {
  const QModel y = make_yule_model();
  CHECK(y.rate(0, 0.0) == 1.0);
  CHECK(y.rate(7, 0.0) == 8.0);
  CHECK(y.kernel(7, 0.0)[0].target == 8);
  const QModel p = make_poisson_model(3.5);
  CHECK(p.rate(11, 2.0) == 3.5);
  CHECK(p.integrated_rate_hint(0, 1.0, 3.0) == doctest::Approx(7.0));
  CHECK_THROWS_AS((void)make_poisson_model(0.0), InvalidModelError);
  CHECK_THROWS_AS((void)make_yule_model(2.0, 1.0), InvalidModelError);
}

TEST_CASE("model spec JSON round-trip") {
  ModelSpec spec;
  spec.family = "oscillating";
  spec.params = {{"kernel_support", 30}};
  spec.t_begin = 0.0;
  spec.t_end = kInfiniteTime;
  spec.description = "two-way integers";
  const nlohmann::json j = spec.to_json();
  CHECK(j["horizon"][1] == "inf");
  const ModelSpec back = ModelSpec::from_json(j);
  CHECK(back.family == "oscillating");
  CHECK(back.params["kernel_support"] == 30);
  CHECK(back.t_end == kInfiniteTime);
  CHECK(back.description == "two-way integers");

  ModelSpec finite;
  finite.family = "reciprocal";
  finite.t_end = 1.0;
  finite.epsilon_t1 = 1e-6;
  const ModelSpec back2 = ModelSpec::from_json(finite.to_json());
  CHECK(back2.t_end == 1.0);
  CHECK(back2.epsilon_t1 == 1e-6);
}

TEST_CASE("build_model dispatches families and rejects unknown ones") {
  ModelSpec spec;
  spec.family = "poisson";
  spec.params = {{"rate", 2.0}};
  const QModel m = build_model(spec);
  CHECK(m.rate(0, 0.5) == 2.0);

  spec.family = "no-such-family";
  CHECK_THROWS_AS((void)build_model(spec), InvalidModelError);
}

TEST_CASE("custom-table family with piecewise-constant rates") {
  ModelSpec spec;
  spec.family = "custom-table";
  spec.t_begin = 0.0;
  spec.t_end = 2.0;
  spec.params = {
      {"states", 2},
      {"time_breaks", {0.0, 1.0}},
      {"rates", {{1.0, 3.0}, {0.5, 0.5}}},
      {"kernels",
       {{{{1, 1.0}}, {{1, 3.0}}},    // state 0 per interval
        {{{0, 0.5}}, {{0, 0.5}}}}},  // state 1 per interval
  };
  const QModel m = build_model(spec);
  CHECK(m.rate(0, 0.5) == 1.0);
  CHECK(m.rate(0, 1.5) == 3.0);
  CHECK(m.kernel(0, 1.5)[0].rate == 3.0);
  // hint integrates across the break: 0.5*1 + 0.5*3 = 2.0
  CHECK(m.integrated_rate_hint(0, 0.5, 1.5) == doctest::Approx(2.0));
  CHECK(m.rate(5, 0.5) == 0.0);  // outside the table

  spec.params["rates"] = {{1.0}};  // shape mismatch
  CHECK_THROWS_AS((void)build_model(spec), InvalidModelError);
}

TEST_CASE("spec files load from disk") {
  const char* path = "/tmp/mjp_test_spec.json";
  {
    std::ofstream out(path);
    out << R"({"family":"yule","horizon":[0.0,"inf"],"epsilon_T1":0.0})";
  }
  const ModelSpec spec = load_spec_file(path);
  CHECK(spec.family == "yule");
  CHECK(spec.t_end == kInfiniteTime);
  std::remove(path);
  CHECK_THROWS_AS((void)load_spec_file("/tmp/definitely-missing.json"),
                  std::invalid_argument);
}
