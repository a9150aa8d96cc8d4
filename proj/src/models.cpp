#include "mjp/models.hpp"

#include <cmath>
#include <fstream>
#include <memory>

namespace mjp {

namespace {

void validate_horizon(double t0, double t1) {
  if (!(t0 >= 0.0) || !(t0 < t1)) {
    throw InvalidModelError("model horizon requires 0 <= T0 < T1");
  }
}

double constant_rate_hint(double rate, double u, double t) {
  return rate * (t - u);
}

}  // namespace

QModel make_constant_model(double rate, double t0, double t1) {
  validate_horizon(t0, t1);
  if (rate < 0.0) throw InvalidModelError("constant: negative rate");
  QModel m;
  m.state_count_hint = 0;
  m.t_begin = t0;
  m.t_end = t1;
  m.rate = [rate](State, double) { return rate; };
  m.kernel = [rate](State x, double) -> std::vector<KernelEntry> {
    if (rate == 0.0) return {};
    return {{x ^ 1u, rate}};
  };
  m.integrated_rate_hint = [rate](State, double u, double t) {
    return constant_rate_hint(rate, u, t);
  };
  return m;
}

QModel make_poisson_model(double rate, double t0, double t1) {
  validate_horizon(t0, t1);
  if (!(rate > 0.0)) throw InvalidModelError("poisson: rate must be positive");
  QModel m;
  m.t_begin = t0;
  m.t_end = t1;
  m.rate = [rate](State, double) { return rate; };
  m.kernel = [rate](State x, double) -> std::vector<KernelEntry> {
    return {{x + 1, rate}};
  };
  m.integrated_rate_hint = [rate](State, double u, double t) {
    return constant_rate_hint(rate, u, t);
  };
  return m;
}

QModel make_yule_model(double t0, double t1) {
  validate_horizon(t0, t1);
  QModel m;
  m.t_begin = t0;
  m.t_end = t1;
  m.rate = [](State n, double) { return static_cast<double>(n) + 1.0; };
  m.kernel = [](State n, double) -> std::vector<KernelEntry> {
    return {{n + 1, static_cast<double>(n) + 1.0}};
  };
  m.integrated_rate_hint = [](State n, double u, double t) {
    return (static_cast<double>(n) + 1.0) * (t - u);
  };
  return m;
}

QModel make_pure_birth_model(double growth, double t0, double t1) {
  validate_horizon(t0, t1);
  if (!(growth > 1.0)) {
    throw InvalidModelError("pure-birth: growth factor must exceed 1");
  }
  QModel m;
  m.t_begin = t0;
  m.t_end = t1;
  auto lam = [growth](State n) {
    return std::pow(growth, static_cast<double>(n) + 1.0);
  };
  m.rate = [lam](State n, double) { return lam(n); };
  m.kernel = [lam](State n, double) -> std::vector<KernelEntry> {
    return {{n + 1, lam(n)}};
  };
  m.integrated_rate_hint = [lam](State n, double u, double t) {
    return lam(n) * (t - u);
  };
  return m;
}

State oscillating_index(int j) {
  if (j == 0) return 0;
  return j > 0 ? static_cast<State>(2 * j - 1) : static_cast<State>(-2 * j);
}

int oscillating_value(State index) {
  if (index == 0) return 0;
  const int k = static_cast<int>((index + 1) / 2);
  return (index % 2 == 1) ? k : -k;
}

std::vector<State> oscillating_truncation(int max_abs) {
  std::vector<State> states;
  states.reserve(2 * max_abs + 1);
  for (State i = 0; i <= static_cast<State>(2 * max_abs); ++i) states.push_back(i);
  return states;
}

std::vector<State> range_truncation(std::size_t count) {
  std::vector<State> states(count);
  for (std::size_t i = 0; i < count; ++i) states[i] = static_cast<State>(i);
  return states;
}

QModel make_oscillating_model(int kernel_support, double t0, double t1) {
  validate_horizon(t0, t1);
  if (kernel_support < 1) {
    throw InvalidModelError("oscillating: kernel support must be positive");
  }
  QModel m;
  m.t_begin = t0;
  m.t_end = t1;
  auto rate_of = [](State i) -> double {
    if (i == 0) return 1.0;
    return std::ldexp(1.0, std::abs(oscillating_value(i)));
  };
  m.rate = [rate_of](State i, double) { return rate_of(i); };
  m.kernel = [kernel_support, rate_of](State i,
                                       double) -> std::vector<KernelEntry> {
    if (i == 0) {
      // q(0,t,{j}) = 2^-(|j|+1); enumerate |j| <= kernel_support and fold
      // the (geometric) tail into the farthest pair so the measure stays
      // conservative to machine precision.
      std::vector<KernelEntry> entries;
      entries.reserve(2 * kernel_support);
      for (int k = 1; k <= kernel_support; ++k) {
        double w = std::ldexp(1.0, -(k + 1));
        if (k == kernel_support) w += std::ldexp(1.0, -(k + 1));  // tail fold
        entries.push_back({oscillating_index(k), w});
        entries.push_back({oscillating_index(-k), w});
      }
      return entries;
    }
    const int j = oscillating_value(i);
    return {{oscillating_index(-j), rate_of(i)}};
  };
  m.integrated_rate_hint = [rate_of](State i, double u, double t) {
    return rate_of(i) * (t - u);
  };
  return m;
}

QModel make_reciprocal_model(double t1, double epsilon_t1) {
  validate_horizon(0.0, t1);
  if (!std::isfinite(t1)) throw InvalidModelError("reciprocal: T1 must be finite");
  QModel m;
  m.t_begin = 0.0;
  m.t_end = t1;
  m.epsilon_end = epsilon_t1;
  m.rate = [t1](State, double t) { return 1.0 / (t1 - t); };
  m.kernel = [t1](State x, double t) -> std::vector<KernelEntry> {
    return {{x ^ 1u, 1.0 / (t1 - t)}};
  };
  m.integrated_rate_hint = [t1](State, double u, double t) {
    return std::log((t1 - u) / (t1 - t));
  };
  return m;
}

namespace {

QModel build_custom_table(const nlohmann::json& params, double t0, double t1) {
  struct Table {
    std::vector<double> breaks;                       // ascending, first == t0
    std::vector<std::vector<double>> rates;           // [state][interval]
    std::vector<std::vector<std::vector<KernelEntry>>> kernels;
  };
  auto table = std::make_shared<Table>();
  table->breaks = params.at("time_breaks").get<std::vector<double>>();
  if (table->breaks.empty()) {
    throw InvalidModelError("custom-table: empty time_breaks");
  }
  const std::size_t n_states = params.at("states").get<std::size_t>();
  const std::size_t n_iv = table->breaks.size();
  table->rates = params.at("rates").get<std::vector<std::vector<double>>>();
  if (table->rates.size() != n_states) {
    throw InvalidModelError("custom-table: rates shape mismatch");
  }
  for (const auto& row : table->rates) {
    if (row.size() != n_iv) {
      throw InvalidModelError("custom-table: rates shape mismatch");
    }
  }
  table->kernels.resize(n_states);
  const auto& kj = params.at("kernels");
  for (std::size_t x = 0; x < n_states; ++x) {
    table->kernels[x].resize(n_iv);
    for (std::size_t i = 0; i < n_iv; ++i) {
      for (const auto& pair : kj.at(x).at(i)) {
        table->kernels[x][i].push_back(
            {pair.at(0).get<State>(), pair.at(1).get<double>()});
      }
    }
  }
  auto interval_of = [table](double t) -> std::size_t {
    std::size_t i = 0;
    while (i + 1 < table->breaks.size() && t >= table->breaks[i + 1]) ++i;
    return i;
  };
  QModel m;
  m.state_count_hint = n_states;
  m.t_begin = t0;
  m.t_end = t1;
  m.rate = [table, interval_of, n_states](State x, double t) -> double {
    if (x >= n_states) return 0.0;
    return table->rates[x][interval_of(t)];
  };
  m.kernel = [table, interval_of,
              n_states](State x, double t) -> std::vector<KernelEntry> {
    if (x >= n_states) return {};
    return table->kernels[x][interval_of(t)];
  };
  m.integrated_rate_hint = [table, n_states](State x, double u,
                                             double t) -> double {
    if (x >= n_states) return 0.0;
    double acc = 0.0;
    const auto& b = table->breaks;
    for (std::size_t i = 0; i < b.size(); ++i) {
      const double lo = std::max(u, b[i]);
      const double hi =
          (i + 1 < b.size()) ? std::min(t, b[i + 1]) : t;
      if (hi > lo) acc += table->rates[x][i] * (hi - lo);
    }
    return acc;
  };
  return m;
}

}  // namespace

QModel build_model(const ModelSpec& spec) {
  const auto& p = spec.params;
  QModel m;
  if (spec.family == "constant") {
    m = make_constant_model(p.value("rate", 1.0), spec.t_begin, spec.t_end);
  } else if (spec.family == "poisson") {
    m = make_poisson_model(p.value("rate", 1.0), spec.t_begin, spec.t_end);
  } else if (spec.family == "yule") {
    m = make_yule_model(spec.t_begin, spec.t_end);
  } else if (spec.family == "pure-birth") {
    m = make_pure_birth_model(p.value("growth", 2.0), spec.t_begin, spec.t_end);
  } else if (spec.family == "oscillating") {
    m = make_oscillating_model(p.value("kernel_support", 45), spec.t_begin,
                               spec.t_end);
  } else if (spec.family == "reciprocal") {
    m = make_reciprocal_model(spec.t_end,
                              spec.epsilon_t1 > 0.0 ? spec.epsilon_t1 : 1e-6);
  } else if (spec.family == "custom-table") {
    m = build_custom_table(p, spec.t_begin, spec.t_end);
  } else {
    throw InvalidModelError("unknown model family: " + spec.family);
  }
  if (spec.epsilon_t1 > 0.0) m.epsilon_end = spec.epsilon_t1;
  return m;
}

nlohmann::json ModelSpec::to_json() const {
  nlohmann::json j;
  j["family"] = family;
  j["params"] = params;
  j["horizon"] = nlohmann::json::array();
  j["horizon"].push_back(t_begin);
  if (t_end == kInfiniteTime) {
    j["horizon"].push_back("inf");
  } else {
    j["horizon"].push_back(t_end);
  }
  j["epsilon_T1"] = epsilon_t1;
  if (!description.empty()) j["description"] = description;
  return j;
}

ModelSpec ModelSpec::from_json(const nlohmann::json& j) {
  ModelSpec spec;
  spec.family = j.at("family").get<std::string>();
  spec.params = j.value("params", nlohmann::json::object());
  if (j.contains("horizon")) {
    const auto& h = j.at("horizon");
    spec.t_begin = h.at(0).get<double>();
    spec.t_end = h.at(1).is_string() ? kInfiniteTime : h.at(1).get<double>();
  }
  spec.epsilon_t1 = j.value("epsilon_T1", 0.0);
  spec.description = j.value("description", "");
  return spec;
}

ModelSpec load_spec_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::invalid_argument("cannot open model spec: " + path);
  nlohmann::json j;
  in >> j;
  return ModelSpec::from_json(j);
}

}  // namespace mjp
