#ifndef MJP_QMODEL_HPP
#define MJP_QMODEL_HPP

#include <cstdint>
#include <functional>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

namespace mjp {

using State = std::uint32_t;

/// Sentinel index for the absorbing state adjoined by make_conservative().
inline constexpr State kAbsorbingState = std::numeric_limits<State>::max();

inline constexpr double kInfiniteTime = std::numeric_limits<double>::infinity();

struct KernelEntry {
  State target;
  double rate;  // contribution q(x,t,{target}), nonnegative
};

/// A conservative Q-function on an indexed countable state space with
/// time horizon [t_begin, t_end).  rate(x,t) is the total jump rate q(x,t);
/// kernel(x,t) enumerates the finite discrete measure q(x,t,.\{x}).
/// integrated_rate_hint, when set, gives the closed form of
/// int_u^t q(x,theta) dtheta and is preferred over quadrature.
struct QModel {
  std::size_t state_count_hint = 0;  // 0 means logically infinite
  double t_begin = 0.0;
  double t_end = kInfiniteTime;  // exclusive
  double epsilon_end = 0.0;      // operations reject t > t_end - epsilon_end
  std::function<double(State, double)> rate;
  std::function<std::vector<KernelEntry>(State, double)> kernel;
  std::function<double(State, double, double)> integrated_rate_hint;  // optional

  double latest_time() const {
    return t_end == kInfiniteTime ? kInfiniteTime : t_end - epsilon_end;
  }
};

/// Quadrature of the total rate failed to converge (rate diverging inside
/// the interval).  Carries the partial value accumulated so far.
class DivergenceError : public std::runtime_error {
 public:
  DivergenceError(const std::string& what, double partial_value)
      : std::runtime_error(what), partial(partial_value) {}
  double partial;
};

class NoJumpError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class InvalidModelError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// int_u^t q(x,theta) dtheta.  Uses the closed-form hint when present,
/// otherwise adaptive Simpson quadrature (abs tol 1e-10, max depth 60).
double integrated_rate(const QModel& model, State x, double u, double t);

/// Normalized jump kernel q(x,t,.\{x}) / q(x,t).  Throws NoJumpError when
/// the total rate at (x,t) vanishes.
std::vector<KernelEntry> jump_distribution(const QModel& model, State x, double t);

/// Routes any kernel-mass deficit q(x,t) - q(x,t,X\{x}) to the absorbing
/// sentinel state, so the result satisfies the kernel-mass invariant exactly.
QModel make_conservative(const QModel& model);

/// Extends the model to [0, inf): rate and kernel vanish outside the
/// original horizon and coincide with it inside.
QModel extend_to_halfline(const QModel& model);

enum class Verdict { Holds, Fails, Inconclusive };

std::string to_string(Verdict v);

struct Witness {
  State x = 0;
  double time_lo = 0.0;  // probed time, or interval start for L1 probes
  double time_hi = 0.0;
  double value = 0.0;
  std::string what;
};

/// Grid-relative verdicts for the four boundedness assumptions.
/// "Holds" means holds-on-probe-grid; "Fails" always carries a witness.
struct AssumptionReport {
  Verdict feller_ok = Verdict::Inconclusive;
  Verdict lb_ok = Verdict::Inconclusive;
  Verdict alb_ok = Verdict::Inconclusive;
  Verdict l1_ok = Verdict::Inconclusive;
  std::vector<Witness> witnesses;
  std::vector<State> probe_states;
  std::vector<double> probe_times;
  double bound_threshold = 0.0;
};

AssumptionReport check_assumptions(const QModel& model,
                                   const std::vector<State>& state_range,
                                   const std::vector<double>& time_grid,
                                   double bound_threshold);

struct QsBoundedResult {
  bool bounded = true;
  Witness witness;  // the violating (x,t) when bounded == false
};

/// True iff sup over candidate x probe-grid of q(x,t) <= bound for
/// t in [t_begin, s).  Vacuously true on an empty candidate set.
QsBoundedResult detect_qs_bounded(const QModel& model, double s, double bound,
                                  const std::vector<State>& candidate,
                                  int time_probes = 64);

}  // namespace mjp

#endif  // MJP_QMODEL_HPP
