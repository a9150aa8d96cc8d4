#ifndef MJP_KOLMOGOROV_HPP
#define MJP_KOLMOGOROV_HPP

#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "mjp/feller.hpp"
#include "mjp/qmodel.hpp"

namespace mjp {

using StateSet = std::vector<State>;  // ascending state indices

struct ResidualReport {
  std::string equation_id;  // backward | forward | forward-integral |
                            // int-FKE | marginal | chapman-kolmogorov
  double max_residual = 0.0;
  double argmax_time = 0.0;
  std::string argmax_set;
  double grid_step = 0.0;
  double tolerance_used = 0.0;  // filled by the caller when gating pass/fail

  /// Backward check only: transition values one step before the terminal
  /// compared against the indicator (the u -> t- boundary condition).
  double boundary_residual = 0.0;

  /// Forward checks only: largest value over the grid of the loss integral
  /// sum_{y in B} q(y,t) P(t,{y}), and of its crude majorant
  /// (sup_{y in B} q) * P(t,B).  For B close to the whole space these grow
  /// without bound as the truncation widens, which is exactly how the
  /// forward equation fails there.
  double rhs_integral_max = 0.0;
  double rhs_majorant = 0.0;

  nlohmann::json to_json() const;
};

/// A stated precondition of a checker or construction does not hold.
class PreconditionError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Explicit time stepping went unstable (negative probabilities); retry with
/// a finer grid or a smaller truncation.
class InstabilityError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Central-difference residual of the equation d/du P(u,x;t,B) =
/// q(x,u) P(u,x;t,B) - sum_y q(x,u,{y}) P(u,y;t,B) over interior start
/// times and all start states of the family; boundary_residual reports the
/// indicator mismatch one step before the terminal.
ResidualReport backward_residual(const QModel& model,
                                 const BackwardFamily& family,
                                 const StateSet& B);

/// Central-difference residual of d/dt P(u,x;t,B) =
/// -sum_{y in B} q(y,t) P(u,x;t,{y}) + sum_z q(z,t,B\{z}) P(u,x;t,{z})
/// over interior grid times.  B must be rate-bounded on [T0, s) by `bound`
/// (checked via detect_qs_bounded); otherwise PreconditionError.
ResidualReport forward_residual(const QModel& model, const SolutionField& field,
                                const StateSet& B, double s, double bound);

/// Residual of the integrated form P(u,x;t,B) = I{x in B}
/// + int_u^t [ -sum_{y in B} q P + sum_z q(z,w,B\{z}) P ] dw, trapezoid in w.
ResidualReport forward_integral_residual(const QModel& model,
                                         const SolutionField& field,
                                         const StateSet& B, double s,
                                         double bound);

/// Residual of the survival-weighted integral characterization
/// P(u,x;t,B) = I{x in B} e^{-int_u^t q(x)} +
/// int_u^t sum_z sum_{y in B, y != z} e^{-int_w^t q(y)} q(z,w,{y}) P(u,x;w,{z}) dw,
/// evaluated with the same exponentially weighted panel rule as the solver.
/// No boundedness precondition.
ResidualReport minimal_integral_residual(const QModel& model,
                                         const SolutionField& field,
                                         const StateSet& B);

/// Evolves the marginal distribution P(t,{y}) from an initial distribution
/// gamma at T0 by the explicit trapezoid (Heun) update of the marginal
/// forward equation on the truncation.  Point mass: gamma = {{x0, 1.0}}.
SolutionField marginal_solve(const QModel& model,
                             const std::vector<std::pair<State, double>>& gamma,
                             const std::vector<double>& time_grid,
                             const std::vector<State>& states);

/// Builds a non-minimal solution for a genuinely explosive time-homogeneous
/// model by reviving exploded mass at revival_state: the renewal recursion
/// P_res(u,x;t,.) = Pbar(u,x;t,.) + int_u^t f_expl(w) P_res(w,rev;t,.) dw
/// with f_expl the explosion-time density (smoothed central differences of
/// the minimal field's mass loss).  Dominates the minimal field entrywise.
/// Refuses (PreconditionError) when the observed defect cannot be separated
/// from truncation loss, i.e. when the explosion-bound outflow does not
/// dominate the returning outflow and series tail.
SolutionField resurrected_solution(const QModel& model, State revival_state,
                                   double u, State x,
                                   const std::vector<double>& time_grid,
                                   const std::vector<State>& states,
                                   const SolveOptions& opts = {});

}  // namespace mjp

#endif  // MJP_KOLMOGOROV_HPP
