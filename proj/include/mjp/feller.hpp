#ifndef MJP_FELLER_HPP
#define MJP_FELLER_HPP

#include <iosfwd>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mjp/qmodel.hpp"

namespace mjp {

/// Tabulated transition function P(u,x;t,{y}) on a time grid and a finite
/// truncated state set, with series bookkeeping.  When term_index >= 0 the
/// field holds a single n-jump series term rather than a partial sum.
struct SolutionField {
  double u = 0.0;
  State x = 0;
  std::vector<double> times;   // strictly increasing, in (u, s]
  std::vector<State> states;   // ascending
  std::vector<double> values;  // row-major: values[ti * states.size() + si]

  int term_index = -1;
  int terms_used = 0;
  double last_term_mass = 0.0;
  double series_tail_bound = 0.0;  // unaccounted-mass bound at stopping time
  double truncation_outflow = 0.0;   // raw mass routed outside the truncation
  double returning_outflow = 0.0;    // the part that could flow back in
  double explosive_outflow = 0.0;    // the part routed onto explosion-bound
                                     // escape chains (summable holding times)
  double mass_excess = 0.0;          // by how much raw totals exceeded 1
  bool truncation_warning = false;
  std::vector<double> term_mass;  // per-term total mass at the final grid time

  double value(std::size_t time_index, State y) const;
  double value_at(std::size_t time_index, std::size_t state_pos) const {
    return values[time_index * states.size() + state_pos];
  }
  double total_mass(std::size_t time_index) const;
  /// Position of y in states, or npos.
  std::size_t state_pos(State y) const;
  /// Index of t on the grid (within 1e-9 relative tolerance); throws if absent.
  std::size_t time_index(double t) const;

  static constexpr std::size_t npos = static_cast<std::size_t>(-1);
};

class NonConvergenceError : public std::runtime_error {
 public:
  NonConvergenceError(const std::string& what, SolutionField partial_field)
      : std::runtime_error(what), partial(std::move(partial_field)) {}
  SolutionField partial;
};

enum class TermVariant { ForwardForm, BackwardForm };

struct SolveOptions {
  double eps = 1e-10;
  int max_terms = 10000;
  /// Internal quadrature panels per output grid step (refines the w-grid
  /// without changing the tabulated times).
  int substeps = 1;
  /// Series tail bound below which stopping is allowed even though the
  /// remaining-mass accounting has not reached eps (numerical floor).
  double tail_slack = 1e-6;
  /// Per-state activity cutoff: term rows entirely below this are skipped.
  double active_threshold = 1e-20;
  double outflow_warning_cap = 0.01;
  int term_mass_record = 64;
};

/// Zero-jump term: P^(0)(u,x;t,{y}) = I{y=x} exp(-int_u^t q(x)).
SolutionField term0(const QModel& model, double u, State x,
                    const std::vector<double>& time_grid,
                    const std::vector<State>& states);

/// The n-th series term from the (n-1)-th.  ForwardForm propagates the
/// previous term through the kernel (cheap, used by minimal_solution);
/// BackwardForm re-derives the term through the start-time recursion and is
/// provided for cross-checking the two equivalent integral forms.
SolutionField next_term(const QModel& model, const SolutionField& prev,
                        TermVariant variant);

/// Sums series terms until the current term mass drops below eps and the
/// unaccounted-mass bound is below max(eps, tail_slack).  Throws
/// NonConvergenceError carrying the partial field when max_terms is reached
/// first.
SolutionField minimal_solution(const QModel& model, double u, State x,
                               const std::vector<double>& time_grid,
                               const std::vector<State>& states,
                               const SolveOptions& opts = {});

/// Max over target states of the Chapman-Kolmogorov mismatch
/// |P(u,x;t,{y'}) - sum_y P(s,y;t,{y'}) P(u,x;s,{y})|.
/// fields_mid[k] must be the field started at (s, field_a.states[k]).
double ck_residual(const SolutionField& field_a,
                   const std::vector<SolutionField>& fields_mid, double s,
                   double t);

/// Transition values P(w,x;t,{y'}) for every grid start time w and start
/// state x, with the terminal time t fixed at the end of the grid.  Built by
/// the start-time form of the series recursion in one pass; this is the shape
/// the backward-equation residual check consumes.
struct BackwardFamily {
  double u = 0.0;  // first start time (= nodes.front())
  double t = 0.0;  // fixed terminal time
  std::vector<double> nodes;   // start times: u followed by the grid
  std::vector<State> states;
  std::vector<double> values;  // [node][x][y'] row-major
  int terms_used = 0;
  double last_term_mass = 0.0;

  double value(std::size_t node_index, std::size_t x_pos,
               std::size_t y_pos) const {
    const std::size_t k = states.size();
    return values[(node_index * k + x_pos) * k + y_pos];
  }
};

BackwardFamily backward_family(const QModel& model, double u,
                               const std::vector<double>& time_grid,
                               const std::vector<State>& states,
                               const SolveOptions& opts = {});

struct RegularityDefect {
  double defect = 0.0;  // 1 - tabulated mass at t
  double truncation_outflow = 0.0;
  double returning_outflow = 0.0;
};

RegularityDefect regularity_defect(const SolutionField& field, double t);

/// Uniform grid helper: a+h, a+2h, ..., b (b included within rounding).
std::vector<double> make_time_grid(double a, double b, double step);

nlohmann::json field_to_json(const SolutionField& field);
void field_to_csv(const SolutionField& field, std::ostream& out);

}  // namespace mjp

#endif  // MJP_FELLER_HPP
