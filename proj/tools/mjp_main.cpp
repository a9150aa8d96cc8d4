// Command-line front end: solve / simulate / verify / assume over JSON model
// specs.  Exit codes: 0 pass, 1 usage error, 2 numeric non-convergence,
// 3 residual failure.
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <limits>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "mjp/feller.hpp"
#include "mjp/kolmogorov.hpp"
#include "mjp/models.hpp"
#include "mjp/qmodel.hpp"
#include "mjp/simulate.hpp"

namespace {

constexpr int kExitOk = 0;
constexpr int kExitUsage = 1;
constexpr int kExitNumeric = 2;
constexpr int kExitResidual = 3;

struct RunConfig {
  std::string model_path;
  double u = 0.0;
  mjp::State x = 0;
  double t = 1.0;
  std::string t_grid;  // "a:b:h" overrides u/t/grid_step
  double grid_step = 1e-3;
  int trunc = 16;
  double eps = 1e-10;
  int max_terms = 10000;
  std::uint64_t n_paths = 100000;
  std::uint64_t seed = 1;
  double tol_int = 1e-5;
  double tol_diff = 1e-3;
  std::string out_path;
  std::string format = "csv";
};

std::string default_out(const std::string& name) {
  const char* dir = std::getenv("MJP_OUT_DIR");
  if (dir && *dir) return (std::filesystem::path(dir) / name).string();
  return name;
}

// The truncation is family-aware: for the oscillating model `trunc` bounds
// the signed value |j|; otherwise it is the number of leading indices.
std::vector<mjp::State> truncation_for(const mjp::ModelSpec& spec, int trunc) {
  if (trunc < 1) throw CLI::ValidationError("--trunc must be positive");
  if (spec.family == "oscillating") return mjp::oscillating_truncation(trunc);
  return mjp::range_truncation(static_cast<std::size_t>(trunc));
}

struct GridSpec {
  double u;
  std::vector<double> times;
};

GridSpec make_grid(const RunConfig& cfg) {
  if (!cfg.t_grid.empty()) {
    double a, b, h;
    if (std::sscanf(cfg.t_grid.c_str(), "%lf:%lf:%lf", &a, &b, &h) != 3) {
      throw CLI::ValidationError("--t-grid expects a:b:h");
    }
    return {a, mjp::make_time_grid(a, b, h)};
  }
  return {cfg.u, mjp::make_time_grid(cfg.u, cfg.t, cfg.grid_step)};
}

void write_field(const mjp::SolutionField& field, const RunConfig& cfg,
                 const std::string& stem) {
  const std::string path =
      cfg.out_path.empty() ? default_out(stem + "." + cfg.format) : cfg.out_path;
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path);
  if (cfg.format == "json") {
    out << mjp::field_to_json(field).dump(2) << "\n";
  } else {
    mjp::field_to_csv(field, out);
  }
  std::cout << "wrote " << path << "\n";
}

int run_solve(const RunConfig& cfg) {
  const mjp::ModelSpec spec = mjp::load_spec_file(cfg.model_path);
  const mjp::QModel model = mjp::build_model(spec);
  const GridSpec grid = make_grid(cfg);
  const std::vector<mjp::State> states = truncation_for(spec, cfg.trunc);

  mjp::SolveOptions opts;
  opts.eps = cfg.eps;
  opts.max_terms = cfg.max_terms;
  try {
    const mjp::SolutionField field = mjp::minimal_solution(
        model, grid.u, cfg.x, grid.times, states, opts);
    const mjp::RegularityDefect d =
        mjp::regularity_defect(field, field.times.back());
    std::cout << "terms_used=" << field.terms_used
              << " last_term_mass=" << field.last_term_mass
              << " truncation_outflow=" << field.truncation_outflow
              << " returning_outflow=" << field.returning_outflow
              << " defect=" << d.defect << "\n";
    if (field.truncation_warning) {
      std::cout << "warning: truncation outflow is large; widen --trunc\n";
    }
    write_field(field, cfg, "solution");
    return kExitOk;
  } catch (const mjp::NonConvergenceError& e) {
    std::cerr << "non-convergence: " << e.what()
              << " (last_term_mass=" << e.partial.last_term_mass << ")\n";
    return kExitNumeric;
  }
}

int run_simulate(const RunConfig& cfg) {
  const mjp::ModelSpec spec = mjp::load_spec_file(cfg.model_path);
  const mjp::QModel model = mjp::build_model(spec);
  const std::vector<mjp::State> states = truncation_for(spec, cfg.trunc);
  const mjp::MCEstimate est = mjp::mc_estimate(model, cfg.u, cfg.x, cfg.t,
                                               cfg.n_paths, cfg.seed, states);
  std::cout << "n_paths=" << est.n_paths
            << " explosions=" << est.explosion_count
            << " out_of_truncation=" << est.out_of_truncation << "\n";
  const std::string path = cfg.out_path.empty()
                               ? default_out("mc_estimate." + cfg.format)
                               : cfg.out_path;
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path);
  if (cfg.format == "json") {
    out << est.to_json().dump(2) << "\n";
  } else {
    est.to_csv(out);
  }
  std::cout << "wrote " << path << "\n";
  return kExitOk;
}

int run_verify(const RunConfig& cfg) {
  const mjp::ModelSpec spec = mjp::load_spec_file(cfg.model_path);
  const mjp::QModel model = mjp::build_model(spec);
  const GridSpec grid = make_grid(cfg);
  const std::vector<mjp::State> states = truncation_for(spec, cfg.trunc);
  mjp::SolveOptions opts;
  opts.eps = cfg.eps;
  opts.max_terms = cfg.max_terms;

  std::vector<mjp::ResidualReport> reports;
  bool failed = false;
  const auto gate = [&](mjp::ResidualReport rep, double tol) {
    rep.tolerance_used = tol;
    const bool ok = rep.max_residual <= tol;
    if (!ok) failed = true;
    std::cout << rep.equation_id << "  max_residual=" << rep.max_residual
              << "  tol=" << tol << "  " << (ok ? "pass" : "FAIL") << "\n";
    reports.push_back(std::move(rep));
  };

  mjp::SolutionField field;
  try {
    field = mjp::minimal_solution(model, grid.u, cfg.x, grid.times, states, opts);
  } catch (const mjp::NonConvergenceError& e) {
    std::cerr << "non-convergence: " << e.what() << "\n";
    return kExitNumeric;
  }
  const mjp::StateSet B{cfg.x};
  const double t_end = field.times.back();
  double bound = 0.0;
  for (double tt : {grid.u, 0.5 * (grid.u + t_end), t_end}) {
    bound = std::max(bound, model.rate(cfg.x, tt));
  }
  bound = 2.0 * bound + 1.0;

  // Chapman-Kolmogorov around the midpoint grid time.
  {
    const double s = field.times[field.times.size() / 2];
    std::vector<double> tail_times(field.times.begin() +
                                       static_cast<long>(field.times.size() / 2) + 1,
                                   field.times.end());
    std::vector<mjp::SolutionField> mids;
    mids.reserve(states.size());
    for (mjp::State y : states) {
      mids.push_back(mjp::minimal_solution(model, s, y, tail_times, states, opts));
    }
    mjp::ResidualReport rep;
    rep.equation_id = "chapman-kolmogorov";
    rep.max_residual = mjp::ck_residual(field, mids, s, t_end);
    rep.argmax_time = t_end;
    rep.grid_step = cfg.grid_step;
    gate(std::move(rep), cfg.tol_int + field.truncation_outflow);
  }

  const mjp::BackwardFamily fam =
      mjp::backward_family(model, grid.u, field.times, states, opts);
  gate(mjp::backward_residual(model, fam, B), cfg.tol_diff);
  gate(mjp::forward_residual(model, field, B, t_end, bound), cfg.tol_diff);
  gate(mjp::forward_integral_residual(model, field, B, t_end, bound),
       cfg.tol_int);
  gate(mjp::minimal_integral_residual(model, field, B), cfg.tol_int);

  if (std::abs(grid.u - model.t_begin) < 1e-12) {
    try {
      const mjp::SolutionField marg =
          mjp::marginal_solve(model, {{cfg.x, 1.0}}, field.times, states);
      double diff = 0.0;
      for (std::size_t ti = 0; ti < field.times.size(); ++ti) {
        for (std::size_t p = 0; p < states.size(); ++p) {
          diff = std::max(diff, std::abs(marg.value_at(ti, p) -
                                         field.value_at(ti, p)));
        }
      }
      mjp::ResidualReport rep;
      rep.equation_id = "marginal";
      rep.max_residual = diff;
      rep.grid_step = cfg.grid_step;
      gate(std::move(rep), 10.0 * cfg.tol_int);
    } catch (const mjp::InstabilityError& e) {
      std::cout << "marginal  skipped: " << e.what() << "\n";
    }
  }

  // Informational: the forward right-hand side over the whole truncation.
  {
    const mjp::StateSet full = states;
    mjp::ResidualReport rep =
        mjp::forward_residual(model, field, full, t_end,
                              std::numeric_limits<double>::max());
    std::cout << "forward[full-truncation]  loss_integral_max="
              << rep.rhs_integral_max << "  majorant=" << rep.rhs_majorant
              << "  (diagnostic; grows with the truncation when the forward "
                 "equation fails for the whole space)\n";
    rep.equation_id = "forward-full-diagnostic";
    reports.push_back(std::move(rep));
  }

  const std::string path =
      cfg.out_path.empty() ? default_out("verify.json") : cfg.out_path;
  nlohmann::json j = nlohmann::json::array();
  for (const auto& r : reports) j.push_back(r.to_json());
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << j.dump(2) << "\n";
  std::cout << "wrote " << path << "\n";
  return failed ? kExitResidual : kExitOk;
}

int run_assume(const RunConfig& cfg) {
  const mjp::ModelSpec spec = mjp::load_spec_file(cfg.model_path);
  const mjp::QModel model = mjp::build_model(spec);
  const GridSpec grid = make_grid(cfg);
  const std::vector<mjp::State> states = truncation_for(spec, cfg.trunc);
  std::vector<double> probe{grid.u};
  probe.insert(probe.end(), grid.times.begin(), grid.times.end());
  const mjp::AssumptionReport rep =
      mjp::check_assumptions(model, states, probe, 1e12);
  std::cout << "feller=" << mjp::to_string(rep.feller_ok)
            << " local-bound=" << mjp::to_string(rep.lb_ok)
            << " almost-local-bound=" << mjp::to_string(rep.alb_ok)
            << " integrable=" << mjp::to_string(rep.l1_ok) << "\n";
  for (const auto& w : rep.witnesses) {
    std::cout << "witness: state " << w.x << " on [" << w.time_lo << ","
              << w.time_hi << "] value " << w.value << " (" << w.what << ")\n";
  }
  return kExitOk;
}

void add_common(CLI::App* cmd, RunConfig& cfg) {
  cmd->add_option("--model", cfg.model_path, "model spec JSON path")
      ->required();
  cmd->add_option("--u", cfg.u, "start time");
  cmd->add_option("--x", cfg.x, "start state index");
  cmd->add_option("--t", cfg.t, "terminal time");
  cmd->add_option("--t-grid", cfg.t_grid, "time grid a:b:h (overrides --u/--t)");
  cmd->add_option("--grid-step", cfg.grid_step, "uniform grid step");
  cmd->add_option("--trunc", cfg.trunc,
                  "truncation size (|j| bound for the oscillating family)");
  cmd->add_option("--eps", cfg.eps, "series stopping threshold");
  cmd->add_option("--max-terms", cfg.max_terms, "series term cap");
  cmd->add_option("--out", cfg.out_path, "output file path");
  cmd->add_option("--format", cfg.format, "csv|json")
      ->check(CLI::IsMember({"csv", "json"}));
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"minimal transition functions of jump Markov processes"};
  app.require_subcommand(1);
  RunConfig cfg;

  CLI::App* solve = app.add_subcommand("solve", "tabulate the minimal solution");
  add_common(solve, cfg);
  CLI::App* simulate =
      app.add_subcommand("simulate", "Monte Carlo transition estimate");
  add_common(simulate, cfg);
  simulate->add_option("--paths", cfg.n_paths, "number of paths");
  simulate->add_option("--seed", cfg.seed, "RNG seed");
  CLI::App* verify =
      app.add_subcommand("verify", "equation residual suite");
  add_common(verify, cfg);
  verify->add_option("--tol-int", cfg.tol_int, "integral residual tolerance");
  verify->add_option("--tol-diff", cfg.tol_diff,
                     "differential residual tolerance");
  CLI::App* assume =
      app.add_subcommand("assume", "boundedness assumption probes");
  add_common(assume, cfg);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (solve->parsed()) return run_solve(cfg);
    if (simulate->parsed()) return run_simulate(cfg);
    if (verify->parsed()) return run_verify(cfg);
    if (assume->parsed()) return run_assume(cfg);
  } catch (const CLI::Error& e) {
    std::cerr << e.what() << "\n";
    return kExitUsage;
  } catch (const mjp::NonConvergenceError& e) {
    std::cerr << "non-convergence: " << e.what() << "\n";
    return kExitNumeric;
  } catch (const mjp::DivergenceError& e) {
    std::cerr << "divergence: " << e.what() << " (partial " << e.partial
              << ")\n";
    return kExitNumeric;
  } catch (const std::invalid_argument& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitNumeric;
  }
  return kExitUsage;
}
