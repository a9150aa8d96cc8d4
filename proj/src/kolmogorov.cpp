#include "mjp/kolmogorov.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "mjp/detail/panel.hpp"

namespace mjp {

namespace {

std::string set_label(const StateSet& B, std::size_t truncation_size) {
  if (B.size() == truncation_size) return "full-truncation";
  std::ostringstream os;
  os << "{";
  for (std::size_t i = 0; i < B.size() && i < 8; ++i) {
    if (i) os << ",";
    os << B[i];
  }
  if (B.size() > 8) os << ",...";
  os << "}";
  return os.str();
}

// Positions of B inside an ascending state list; throws if any member is
// outside the truncation.
std::vector<std::size_t> set_positions(const std::vector<State>& states,
                                       const StateSet& B) {
  std::vector<std::size_t> pos;
  pos.reserve(B.size());
  for (State y : B) {
    auto it = std::lower_bound(states.begin(), states.end(), y);
    if (it == states.end() || *it != y) {
      throw std::invalid_argument("set member outside the truncation");
    }
    pos.push_back(static_cast<std::size_t>(it - states.begin()));
  }
  return pos;
}

std::vector<char> set_mask(std::size_t k, const std::vector<std::size_t>& pos) {
  std::vector<char> m(k, 0);
  for (std::size_t p : pos) m[p] = 1;
  return m;
}

double require_uniform_step(const std::vector<double>& times, double u) {
  if (times.size() < 3) {
    throw std::invalid_argument("need at least 3 grid points");
  }
  const double h = times[0] - u;
  for (std::size_t i = 0; i + 1 < times.size(); ++i) {
    if (std::abs(times[i + 1] - times[i] - h) > 1e-9 * std::max(1.0, h)) {
      throw std::invalid_argument("uniform time grid required");
    }
  }
  return h;
}

void check_qs_bounded(const QModel& model, const StateSet& B, double s,
                      double bound, double grid_end) {
  double s_eff = s;
  if (!std::isfinite(s_eff) || s_eff > model.latest_time()) {
    s_eff = std::min(grid_end, model.latest_time());
  }
  const QsBoundedResult r = detect_qs_bounded(model, s_eff, bound, B);
  if (!r.bounded) {
    std::ostringstream os;
    os << "set is not rate-bounded on [T0," << s_eff << "): q(" << r.witness.x
       << "," << r.witness.time_lo << ") = " << r.witness.value
       << " exceeds bound " << bound;
    throw PreconditionError(os.str());
  }
}

}  // namespace

// ---------------------------------------------------------------------------
// Backward equation
// ---------------------------------------------------------------------------

ResidualReport backward_residual(const QModel& model,
                                 const BackwardFamily& family,
                                 const StateSet& B) {
  const std::size_t nn = family.nodes.size();
  if (nn < 3) {
    throw std::invalid_argument("backward_residual: need at least 3 start times");
  }
  const std::size_t K = family.states.size();
  const auto bpos = set_positions(family.states, B);

  // P(w_i, x; t, B) for every node and start state
  std::vector<double> PB(nn * K, 0.0);
  for (std::size_t i = 0; i < nn; ++i) {
    for (std::size_t xp = 0; xp < K; ++xp) {
      double acc = 0.0;
      for (std::size_t yp : bpos) acc += family.value(i, xp, yp);
      PB[i * K + xp] = acc;
    }
  }

  ResidualReport rep;
  rep.equation_id = "backward";
  rep.argmax_set = set_label(B, K);
  rep.grid_step = family.nodes[1] - family.nodes[0];

  for (std::size_t i = 1; i + 1 < nn; ++i) {
    const double w = family.nodes[i];
    const double dw = family.nodes[i + 1] - family.nodes[i - 1];
    for (std::size_t xp = 0; xp < K; ++xp) {
      const double dPdu = (PB[(i + 1) * K + xp] - PB[(i - 1) * K + xp]) / dw;
      const State x = family.states[xp];
      double rhs = model.rate(x, w) * PB[i * K + xp];
      for (const KernelEntry& e : model.kernel(x, w)) {
        auto it = std::lower_bound(family.states.begin(), family.states.end(),
                                   e.target);
        if (it == family.states.end() || *it != e.target) continue;
        const std::size_t yp =
            static_cast<std::size_t>(it - family.states.begin());
        rhs -= e.rate * PB[i * K + yp];
      }
      const double r = std::abs(dPdu - rhs);
      if (r > rep.max_residual) {
        rep.max_residual = r;
        rep.argmax_time = w;
      }
    }
  }

  // Boundary condition at the last start time before the terminal.
  const auto inB = set_mask(K, bpos);
  for (std::size_t xp = 0; xp < K; ++xp) {
    const double want = inB[xp] ? 1.0 : 0.0;
    rep.boundary_residual = std::max(
        rep.boundary_residual, std::abs(PB[(nn - 2) * K + xp] - want));
  }
  return rep;
}

// ---------------------------------------------------------------------------
// Forward equation (differential and plain-integral forms)
// ---------------------------------------------------------------------------

namespace {

// Shared evaluation of the forward right-hand side
//   rhs(t_i) = -sum_{y in B} q(y,t_i) P(t_i,{y})
//              + sum_z q(z,t_i,B\{z}) P(t_i,{z})
// on the field grid with the start node (value = indicator at x) prepended.
// Also fills the loss-integral diagnostics.
struct ForwardRhs {
  std::vector<double> node_times;  // u followed by field.times
  std::vector<double> PB;          // P(t_i, B) per node
  std::vector<double> rhs;         // per node
  double loss_max = 0.0;           // max of sum_{y in B} q P
  double majorant_max = 0.0;       // max of (sup_B q) * P(B)
};

ForwardRhs forward_rhs(const QModel& model, const SolutionField& field,
                       const StateSet& B) {
  const std::size_t K = field.states.size();
  const auto bpos = set_positions(field.states, B);
  const auto inB = set_mask(K, bpos);
  const std::size_t xpos = field.state_pos(field.x);
  if (xpos == SolutionField::npos) {
    throw std::invalid_argument("field start state not tabulated");
  }

  ForwardRhs out;
  out.node_times.push_back(field.u);
  out.node_times.insert(out.node_times.end(), field.times.begin(),
                        field.times.end());
  const std::size_t nn = out.node_times.size();
  out.PB.resize(nn);
  out.rhs.resize(nn);

  std::vector<double> row(K);
  for (std::size_t i = 0; i < nn; ++i) {
    const double t = out.node_times[i];
    if (i == 0) {
      std::fill(row.begin(), row.end(), 0.0);
      row[xpos] = 1.0;  // boundary value P(u,x;u,.) = indicator
    } else {
      for (std::size_t p = 0; p < K; ++p) row[p] = field.value_at(i - 1, p);
    }
    double pb = 0.0;
    for (std::size_t p : bpos) pb += row[p];
    out.PB[i] = pb;

    double loss = 0.0, qsup = 0.0;
    for (std::size_t p : bpos) {
      const double q = model.rate(field.states[p], t);
      loss += q * row[p];
      qsup = std::max(qsup, q);
    }
    double gain = 0.0;
    for (std::size_t zp = 0; zp < K; ++zp) {
      if (row[zp] == 0.0) continue;
      double into_b = 0.0;
      for (const KernelEntry& e : model.kernel(field.states[zp], t)) {
        const std::size_t tp = field.state_pos(e.target);
        if (tp != SolutionField::npos && inB[tp] && tp != zp) {
          into_b += e.rate;
        }
      }
      gain += into_b * row[zp];
    }
    out.rhs[i] = gain - loss;
    out.loss_max = std::max(out.loss_max, loss);
    out.majorant_max = std::max(out.majorant_max, qsup * pb);
  }
  return out;
}

}  // namespace

ResidualReport forward_residual(const QModel& model, const SolutionField& field,
                                const StateSet& B, double s, double bound) {
  check_qs_bounded(model, B, s, bound, field.times.back());
  if (field.times.size() < 3) {
    throw std::invalid_argument("forward_residual: need at least 3 grid times");
  }
  const ForwardRhs fr = forward_rhs(model, field, B);

  ResidualReport rep;
  rep.equation_id = "forward";
  rep.argmax_set = set_label(B, field.states.size());
  rep.grid_step = field.times[1] - field.times[0];
  rep.rhs_integral_max = fr.loss_max;
  rep.rhs_majorant = fr.majorant_max;

  // interior nodes of the tabulated grid (skip the prepended start node)
  for (std::size_t i = 2; i + 1 < fr.node_times.size(); ++i) {
    const double dt = fr.node_times[i + 1] - fr.node_times[i - 1];
    const double dPdt = (fr.PB[i + 1] - fr.PB[i - 1]) / dt;
    const double r = std::abs(dPdt - fr.rhs[i]);
    if (r > rep.max_residual) {
      rep.max_residual = r;
      rep.argmax_time = fr.node_times[i];
    }
  }
  return rep;
}

ResidualReport forward_integral_residual(const QModel& model,
                                         const SolutionField& field,
                                         const StateSet& B, double s,
                                         double bound) {
  check_qs_bounded(model, B, s, bound, field.times.back());
  const ForwardRhs fr = forward_rhs(model, field, B);
  const std::size_t xpos = field.state_pos(field.x);
  const double indicator =
      std::find(B.begin(), B.end(), field.x) != B.end() ? 1.0 : 0.0;
  (void)xpos;

  ResidualReport rep;
  rep.equation_id = "forward-integral";
  rep.argmax_set = set_label(B, field.states.size());
  rep.grid_step = field.times.size() > 1 ? field.times[1] - field.times[0]
                                         : field.times[0] - field.u;
  rep.rhs_integral_max = fr.loss_max;
  rep.rhs_majorant = fr.majorant_max;

  double cum = 0.0;
  for (std::size_t i = 1; i < fr.node_times.size(); ++i) {
    const double h = fr.node_times[i] - fr.node_times[i - 1];
    cum += 0.5 * h * (fr.rhs[i - 1] + fr.rhs[i]);
    const double r = std::abs(fr.PB[i] - indicator - cum);
    if (r > rep.max_residual) {
      rep.max_residual = r;
      rep.argmax_time = fr.node_times[i];
    }
  }
  return rep;
}

// ---------------------------------------------------------------------------
// Survival-weighted integral characterization
// ---------------------------------------------------------------------------

ResidualReport minimal_integral_residual(const QModel& model,
                                         const SolutionField& field,
                                         const StateSet& B) {
  const std::size_t K = field.states.size();
  const auto bpos = set_positions(field.states, B);
  const auto inB = set_mask(K, bpos);
  const std::size_t xpos = field.state_pos(field.x);
  if (xpos == SolutionField::npos) {
    throw std::invalid_argument("field start state not tabulated");
  }

  std::vector<double> node_times{field.u};
  node_times.insert(node_times.end(), field.times.begin(), field.times.end());
  const std::size_t nn = node_times.size();

  // g_y(w) = sum_z q(z,w,{y}) P(u,x;w,{z}) for y in B, per node
  std::vector<double> g(bpos.size() * nn, 0.0);
  std::vector<double> row(K);
  for (std::size_t i = 0; i < nn; ++i) {
    if (i == 0) {
      std::fill(row.begin(), row.end(), 0.0);
      row[xpos] = 1.0;
    } else {
      for (std::size_t p = 0; p < K; ++p) row[p] = field.value_at(i - 1, p);
    }
    for (std::size_t zp = 0; zp < K; ++zp) {
      if (row[zp] == 0.0) continue;
      for (const KernelEntry& e : model.kernel(field.states[zp], node_times[i])) {
        const std::size_t tp = field.state_pos(e.target);
        if (tp == SolutionField::npos || !inB[tp] || tp == zp) continue;
        const auto bit = std::lower_bound(bpos.begin(), bpos.end(), tp);
        const std::size_t bi = static_cast<std::size_t>(bit - bpos.begin());
        g[bi * nn + i] += e.rate * row[zp];
      }
    }
  }

  // I_y(t_{i+1}) = E_y I_y(t_i) + panel(g_y) with the same exponentially
  // weighted rule as the solver; plus the survival of the start state.
  ResidualReport rep;
  rep.equation_id = "int-FKE";
  rep.argmax_set = set_label(B, K);
  rep.grid_step = nn > 2 ? node_times[2] - node_times[1]
                         : node_times[1] - node_times[0];

  const double ind = inB[xpos] ? 1.0 : 0.0;
  std::vector<double> I(bpos.size(), 0.0);
  double survival = 1.0;
  for (std::size_t i = 0; i + 1 < nn; ++i) {
    for (std::size_t b = 0; b < bpos.size(); ++b) {
      const detail::PanelCoef c = detail::panel_coef_for(
          model, field.states[bpos[b]], node_times[i], node_times[i + 1]);
      I[b] = c.E * I[b] + c.w3h * g[b * nn + i] + c.w2h * g[b * nn + i + 1];
    }
    {
      const detail::PanelCoef cx = detail::panel_coef_for(
          model, field.x, node_times[i], node_times[i + 1]);
      survival *= cx.E;
    }
    double recon = ind * survival;
    for (double v : I) recon += v;
    double pb = 0.0;
    for (std::size_t p : bpos) pb += field.value_at(i, p);
    const double r = std::abs(pb - recon);
    if (r > rep.max_residual) {
      rep.max_residual = r;
      rep.argmax_time = node_times[i + 1];
    }
  }
  return rep;
}

// ---------------------------------------------------------------------------
// Marginal equation
// ---------------------------------------------------------------------------

SolutionField marginal_solve(const QModel& model,
                             const std::vector<std::pair<State, double>>& gamma,
                             const std::vector<double>& time_grid,
                             const std::vector<State>& states) {
  if (gamma.empty()) throw std::invalid_argument("marginal_solve: empty gamma");
  if (time_grid.empty()) {
    throw std::invalid_argument("marginal_solve: empty grid");
  }
  const std::size_t K = states.size();
  std::vector<double> P(K, 0.0);
  double wsum = 0.0;
  State x_major = gamma.front().first;
  double w_major = -1.0;
  for (const auto& [st, w] : gamma) {
    if (w < 0.0) throw std::invalid_argument("marginal_solve: negative weight");
    auto it = std::lower_bound(states.begin(), states.end(), st);
    if (it == states.end() || *it != st) {
      throw std::invalid_argument("marginal_solve: gamma outside truncation");
    }
    P[static_cast<std::size_t>(it - states.begin())] += w;
    wsum += w;
    if (w > w_major) {
      w_major = w;
      x_major = st;
    }
  }
  if (std::abs(wsum - 1.0) > 1e-9) {
    throw std::invalid_argument("marginal_solve: gamma does not sum to 1");
  }

  auto deriv = [&](const std::vector<double>& p, double t,
                   std::vector<double>& d) {
    std::fill(d.begin(), d.end(), 0.0);
    for (std::size_t zp = 0; zp < K; ++zp) {
      const double v = p[zp];
      if (v == 0.0) continue;
      d[zp] -= model.rate(states[zp], t) * v;
      for (const KernelEntry& e : model.kernel(states[zp], t)) {
        auto it = std::lower_bound(states.begin(), states.end(), e.target);
        if (it == states.end() || *it != e.target) continue;
        d[static_cast<std::size_t>(it - states.begin())] += e.rate * v;
      }
    }
  };

  SolutionField f;
  f.u = model.t_begin;
  f.x = x_major;
  f.times = time_grid;
  f.states = states;
  f.values.resize(time_grid.size() * K);
  f.terms_used = 0;

  std::vector<double> k1(K), k2(K), pred(K);
  double t_prev = model.t_begin;
  for (std::size_t ti = 0; ti < time_grid.size(); ++ti) {
    const double t_next = time_grid[ti];
    const double h = t_next - t_prev;
    if (!(h > 0.0)) {
      throw std::invalid_argument("marginal_solve: grid not increasing from T0");
    }
    deriv(P, t_prev, k1);
    for (std::size_t p = 0; p < K; ++p) pred[p] = P[p] + h * k1[p];
    deriv(pred, t_next, k2);
    for (std::size_t p = 0; p < K; ++p) {
      P[p] += 0.5 * h * (k1[p] + k2[p]);
      if (P[p] < 0.0) {
        if (P[p] < -1e-12) {
          throw InstabilityError(
              "marginal_solve: negative probability; refine the time grid");
        }
        P[p] = 0.0;
      }
      f.values[ti * K + p] = P[p];
    }
    t_prev = t_next;
  }
  return f;
}

// ---------------------------------------------------------------------------
// Resurrected (non-minimal) solution
// ---------------------------------------------------------------------------

SolutionField resurrected_solution(const QModel& model, State revival_state,
                                   double u, State x,
                                   const std::vector<double>& time_grid,
                                   const std::vector<State>& states,
                                   const SolveOptions& opts) {
  const double h = require_uniform_step(time_grid, u);
  SolutionField base = minimal_solution(model, u, x, time_grid, states, opts);
  SolutionField base_rev =
      (x == revival_state)
          ? base
          : minimal_solution(model, u, revival_state, time_grid, states, opts);

  const std::size_t M = time_grid.size();
  const std::size_t K = states.size();

  const double defect = 1.0 - base.total_mass(M - 1);
  const double ambiguous = base.returning_outflow + base.series_tail_bound;
  if (!(base.explosive_outflow > std::max(1e-6, 10.0 * ambiguous)) ||
      !(base.explosive_outflow > 0.5 * defect)) {
    std::ostringstream os;
    os << "mass deficit not attributable to explosion: defect " << defect
       << ", explosion-bound outflow " << base.explosive_outflow
       << ", returning outflow " << base.returning_outflow
       << ", series tail bound " << base.series_tail_bound;
    throw PreconditionError(os.str());
  }

  // Explosion-time density over elapsed time, from the mass loss of a
  // minimal field: central differences smoothed over 3 grid points.
  // Index k corresponds to elapsed time k*h, k = 0..M.
  auto density = [&](const SolutionField& f) {
    std::vector<double> d(M + 1, 0.0);  // mass deficit per node
    for (std::size_t k = 1; k <= M; ++k) d[k] = 1.0 - f.total_mass(k - 1);
    std::vector<double> raw(M + 1, 0.0);
    for (std::size_t k = 1; k < M; ++k) {
      raw[k] = (d[k + 1] - d[k - 1]) / (2.0 * h);
    }
    raw[M] = (d[M] - d[M - 1]) / h;
    std::vector<double> sm(M + 1, 0.0);
    for (std::size_t k = 1; k <= M; ++k) {
      const double a = raw[k - 1];
      const double b = raw[k];
      const double c = k + 1 <= M ? raw[k + 1] : raw[k];
      sm[k] = std::max(0.0, (a + b + c) / 3.0);
    }
    return sm;
  };
  const std::vector<double> f_rev = density(base_rev);
  const std::vector<double> f_x = x == revival_state ? f_rev : density(base);

  // Renewal recursion for the resurrected flow started at the revival state
  // (time-homogeneous model: only elapsed time matters).  R[k] is the state
  // distribution an elapsed time k*h after a revival.
  std::vector<std::vector<double>> R(M + 1, std::vector<double>(K, 0.0));
  {
    const std::size_t rev_pos = base_rev.state_pos(revival_state);
    if (rev_pos == SolutionField::npos) {
      throw std::invalid_argument("revival state outside the truncation");
    }
    R[0][rev_pos] = 1.0;
  }
  for (std::size_t k = 1; k <= M; ++k) {
    for (std::size_t p = 0; p < K; ++p) R[k][p] = base_rev.value_at(k - 1, p);
    for (std::size_t j = 1; j <= k; ++j) {
      const double w = (j == k ? 0.5 : 1.0) * h * f_rev[j];
      if (w == 0.0) continue;
      const std::vector<double>& tail = R[k - j];
      for (std::size_t p = 0; p < K; ++p) R[k][p] += w * tail[p];
    }
  }

  SolutionField out = base;
  for (std::size_t k = 1; k <= M; ++k) {
    for (std::size_t p = 0; p < K; ++p) {
      double v = base.value_at(k - 1, p);
      for (std::size_t j = 1; j <= k; ++j) {
        const double w = (j == k ? 0.5 : 1.0) * h * f_x[j];
        if (w != 0.0) v += w * R[k - j][p];
      }
      out.values[(k - 1) * K + p] = v;
    }
  }
  return out;
}

// ---------------------------------------------------------------------------

nlohmann::json ResidualReport::to_json() const {
  nlohmann::json j;
  j["equation_id"] = equation_id;
  j["max_residual"] = max_residual;
  j["argmax_time"] = argmax_time;
  j["argmax_set"] = argmax_set;
  j["grid_step"] = grid_step;
  j["tolerance_used"] = tolerance_used;
  if (equation_id == "backward") j["boundary_residual"] = boundary_residual;
  if (equation_id == "forward" || equation_id == "forward-integral") {
    j["rhs_integral_max"] = rhs_integral_max;
    j["rhs_majorant"] = rhs_majorant;
  }
  return j;
}

}  // namespace mjp
