#include "mjp/feller.hpp"

#include "mjp/detail/panel.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <ostream>
#include <unordered_map>
#include <unordered_set>

namespace mjp {

namespace {

using detail::PanelCoef;
using detail::panel_coef;

// ---------------------------------------------------------------------------
// Out-target classification.  Probability routed to a state outside the
// truncation is, from the inside, one of three things:
//   MayReturn        -- some kernel path leads back into the truncation, so
//                       dropping it is a genuine truncation error;
//   EscapesAlive     -- it wanders outside forever with non-summable holding
//                       times (finite orbit, or rates not growing fast
//                       enough), i.e. alive but untabulated;
//   EscapesExplosive -- it runs out along a chain whose expected holding
//                       times 1/q are summable, so it explodes almost
//                       immediately after leaving.
// Classification is by breadth-first closure over the kernel graph probed at
// a few sample times; the exploration cap is resolved conservatively as
// MayReturn unless every edge seen strictly increases the state index away
// from the truncation.
// ---------------------------------------------------------------------------
enum class EscapeClass { MayReturn, EscapesAlive, EscapesExplosive };

// Does the expected time spent along the dominant escape chain from `start`
// converge?  Follows the highest-rate successor and compares the tail of
// sum 1/q against the whole: a summable series has a vanishing tail.
bool escape_times_summable(const QModel& model, State start, double t_probe) {
  constexpr int kSteps = 64, kTailFrom = 48;
  State z = start;
  double total = 0.0, tail = 0.0;
  for (int k = 0; k < kSteps; ++k) {
    const double q = model.rate(z, t_probe);
    if (!(q > 0.0)) return false;  // chain stalls: alive
    const double inv = 1.0 / q;   // 0 for infinite rates, which is fine
    total += inv;
    if (k >= kTailFrom) tail += inv;
    const auto entries = model.kernel(z, t_probe);
    if (entries.empty()) return false;
    const KernelEntry* best = &entries.front();
    for (const KernelEntry& e : entries) {
      if (e.rate > best->rate) best = &e;
    }
    z = best->target;
  }
  if (!std::isfinite(total)) return false;
  return tail < 0.01 * total;
}

EscapeClass classify_escape(const QModel& model, State start,
                            const std::unordered_set<State>& inside,
                            State max_inside,
                            const std::vector<double>& probe_times) {
  constexpr std::size_t kCap = 512;
  std::unordered_set<State> visited{start};
  std::vector<State> frontier{start};
  bool monotone = true;
  bool capped = false;
  while (!frontier.empty() && !capped) {
    const State z = frontier.back();
    frontier.pop_back();
    if (z == kAbsorbingState) continue;
    for (double t : probe_times) {
      for (const KernelEntry& e : model.kernel(z, t)) {
        if (e.rate <= 0.0) continue;
        if (inside.count(e.target)) return EscapeClass::MayReturn;
        if (e.target <= z) monotone = false;
        if (visited.insert(e.target).second) {
          frontier.push_back(e.target);
          if (visited.size() > kCap) capped = true;
        }
      }
    }
  }
  if (!capped) return EscapeClass::EscapesAlive;  // finite closure, never inside
  if (!(monotone && start > max_inside)) return EscapeClass::MayReturn;
  const double t_probe = probe_times[probe_times.size() / 2];
  return escape_times_summable(model, start, t_probe)
             ? EscapeClass::EscapesExplosive
             : EscapeClass::EscapesAlive;
}

// ---------------------------------------------------------------------------
// TermEngine: shared precomputation for the series recursions on a fixed
// internal node grid (the output grid optionally refined by `substeps`).
// ---------------------------------------------------------------------------
class TermEngine {
 public:
  TermEngine(const QModel& model, double u, const std::vector<double>& times,
             const std::vector<State>& states, int substeps)
      : model_(model), u_(u), states_(states), r_(std::max(1, substeps)) {
    if (times.empty()) throw std::invalid_argument("empty time grid");
    if (states.empty()) throw std::invalid_argument("empty state set");
    for (std::size_t i = 1; i < states.size(); ++i) {
      if (states[i] <= states[i - 1]) {
        throw std::invalid_argument("states must be ascending and unique");
      }
    }
    double prev = u;
    nodes_.push_back(u);
    for (double t : times) {
      if (!(t > prev)) {
        throw std::invalid_argument("time grid must be strictly increasing above u");
      }
      for (int k = 1; k <= r_; ++k) {
        nodes_.push_back(prev + (t - prev) * k / r_);
      }
      nodes_.back() = t;  // exact
      prev = t;
    }
    K_ = states.size();
    N_ = nodes_.size() - 1;  // internal panel count
    for (std::size_t i = 0; i < K_; ++i) pos_[states[i]] = i;
    build_coefficients();
    build_kernel_cache();
  }

  std::size_t state_count() const { return K_; }
  std::size_t node_count() const { return N_ + 1; }
  std::size_t output_stride() const { return static_cast<std::size_t>(r_); }
  const std::vector<double>& nodes() const { return nodes_; }
  const std::vector<State>& states() const { return states_; }
  std::size_t pos_of(State x) const {
    auto it = pos_.find(x);
    return it == pos_.end() ? SolutionField::npos : it->second;
  }

  std::size_t idx(std::size_t s, std::size_t i) const { return s * (N_ + 1) + i; }
  const PanelCoef& coef(std::size_t s, std::size_t p) const {
    return coef_[s * N_ + p];
  }

  // Zero-jump term: survival of the start state, as the running product of
  // the exact panel survival factors.
  void fill_term0(std::size_t xpos, std::vector<double>& term) const {
    term.assign(K_ * (N_ + 1), 0.0);
    double s = 1.0;
    term[idx(xpos, 0)] = 1.0;
    for (std::size_t p = 0; p < N_; ++p) {
      s *= coef(xpos, p).E;
      term[idx(xpos, p + 1)] = s;
    }
  }

  struct StepResult {
    std::vector<std::size_t> touched;    // rows receiving inflow
    std::vector<std::size_t> next_active;  // touched rows above threshold
    double max_mass = 0.0;               // max over nodes of the term mass
    bool all_zero = true;
  };

  // One forward step of the series recursion: term n from term n-1.
  // Accumulates the raw/returning outflow integrand per node into the given
  // arrays and the per-node mass of the new term into mass_per_node.
  StepResult step(const std::vector<double>& prev,
                  const std::vector<std::size_t>& active,
                  std::vector<double>& next, std::vector<double>& out_raw,
                  std::vector<double>& out_ret, std::vector<double>& out_exp,
                  std::vector<double>& mass_per_node, double active_threshold) {
    ++stamp_;
    StepResult res;
    for (std::size_t z : active) {
      const double* pv = &prev[idx(z, 0)];
      const NodeKernel* nk = &kern_[idx(z, 0)];
      for (std::size_t i = 0; i <= N_; ++i) {
        const double v = pv[i];
        if (v == 0.0) continue;
        const NodeKernel& k = nk[i];
        if (k.out_raw != 0.0) {
          out_raw[i] += k.out_raw * v;
          out_ret[i] += k.out_ret * v;
          out_exp[i] += k.out_exp * v;
        }
        for (const auto& e : k.in) {
          double* row = touch_row(e.first, next, res.touched);
          row[i] += e.second * v;
        }
      }
    }
    // g now lives in g_; run the panel recurrence into `next`.
    std::fill(mass_per_node.begin(), mass_per_node.end(), 0.0);
    for (std::size_t y : res.touched) {
      const double* g = &g_[idx(y, 0)];
      double* nx = &next[idx(y, 0)];
      const PanelCoef* c = &coef_[y * N_];
      double I = 0.0;
      double rowmax = 0.0;
      nx[0] = 0.0;
      for (std::size_t p = 0; p < N_; ++p) {
        if (I == 0.0 && g[p] == 0.0 && g[p + 1] == 0.0) {
          nx[p + 1] = 0.0;
          continue;
        }
        I = c[p].E * I + c[p].w3h * g[p] + c[p].w2h * g[p + 1];
        nx[p + 1] = I;
        mass_per_node[p + 1] += I;
        if (I > rowmax) rowmax = I;
      }
      if (rowmax > 0.0) res.all_zero = false;
      if (rowmax > active_threshold) res.next_active.push_back(y);
    }
    for (double m : mass_per_node) res.max_mass = std::max(res.max_mass, m);
    return res;
  }

  // Zeroes rows of `buf` recorded in `rows` (cheap buffer recycling).
  void clear_rows(std::vector<double>& buf,
                  const std::vector<std::size_t>& rows) const {
    for (std::size_t y : rows) {
      std::fill(&buf[idx(y, 0)], &buf[idx(y, 0)] + N_ + 1, 0.0);
    }
  }

  std::vector<double> make_buffer() const {
    return std::vector<double>(K_ * (N_ + 1), 0.0);
  }

  // -------------------------------------------------------------------------
  // Start-time (first-jump) recursion.  For the fixed terminal node `jm`,
  // produces the level tables A_m[i][x][y'] = P^{(m)}(w_i, x; t_jm, {y'}),
  // invoking on_level(m, table) for m = 0..n_max.  Tables are laid out
  // [node][x][y'] over nodes 0..jm.
  // -------------------------------------------------------------------------
  template <typename OnLevel>
  void backward_levels(std::size_t jm, int n_max, OnLevel on_level) const {
    const std::size_t nn = jm + 1;
    const std::size_t row = K_ * K_;
    std::vector<double> A_prev(nn * row, 0.0), A_next;
    for (std::size_t x = 0; x < K_; ++x) {
      double s = 1.0;
      A_prev[jm * row + x * K_ + x] = 1.0;
      for (std::size_t p = jm; p-- > 0;) {
        s *= coef(x, p).E;
        A_prev[p * row + x * K_ + x] = s;
      }
    }
    on_level(0, A_prev);
    std::vector<double> f_lo(row), f_hi(row), J(row);
    for (int m = 1; m <= n_max; ++m) {
      A_next.assign(nn * row, 0.0);
      fill_f(jm, A_prev, f_hi);
      std::fill(J.begin(), J.end(), 0.0);
      for (std::size_t i = jm; i-- > 0;) {
        fill_f(i, &A_prev[i * row], f_lo);
        for (std::size_t x = 0; x < K_; ++x) {
          const PanelCoef& c = coef(x, i);
          double* Jx = &J[x * K_];
          const double* flo = &f_lo[x * K_];
          const double* fhi = &f_hi[x * K_];
          double* out = &A_next[i * row + x * K_];
          for (std::size_t y = 0; y < K_; ++y) {
            Jx[y] = c.E * Jx[y] + c.w2h * flo[y] + c.w3h * fhi[y];
            out[y] = Jx[y];
          }
        }
        std::swap(f_lo, f_hi);
      }
      on_level(m, A_next);
      std::swap(A_prev, A_next);
    }
  }

 private:
  struct NodeKernel {
    std::vector<std::pair<std::uint32_t, double>> in;  // (state pos, rate)
    double out_raw = 0.0;  // total rate to states outside the truncation
    double out_ret = 0.0;  // part of out_raw that can find its way back
    double out_exp = 0.0;  // part of out_raw bound for explosion
  };

  void build_coefficients() {
    coef_.resize(K_ * N_);
    for (std::size_t s = 0; s < K_; ++s) {
      for (std::size_t p = 0; p < N_; ++p) {
        double a;
        try {
          a = integrated_rate(model_, states_[s], nodes_[p], nodes_[p + 1]);
        } catch (const DivergenceError&) {
          a = std::numeric_limits<double>::infinity();
        }
        coef_[s * N_ + p] = panel_coef(a, nodes_[p + 1] - nodes_[p]);
      }
    }
  }

  void build_kernel_cache() {
    std::unordered_set<State> inside(states_.begin(), states_.end());
    const State max_inside = states_.back();
    const std::vector<double> probes = {
        nodes_[0], nodes_[N_ / 3], nodes_[2 * N_ / 3], nodes_[N_]};
    std::unordered_map<State, EscapeClass> classes;
    kern_.resize(K_ * (N_ + 1));
    for (std::size_t s = 0; s < K_; ++s) {
      for (std::size_t i = 0; i <= N_; ++i) {
        NodeKernel& nk = kern_[idx(s, i)];
        for (const KernelEntry& e : model_.kernel(states_[s], nodes_[i])) {
          if (e.rate < 0.0) {
            throw InvalidModelError("kernel entry with negative rate");
          }
          auto it = pos_.find(e.target);
          if (it != pos_.end()) {
            nk.in.emplace_back(static_cast<std::uint32_t>(it->second), e.rate);
          } else {
            nk.out_raw += e.rate;
            auto rit = classes.find(e.target);
            if (rit == classes.end()) {
              rit = classes
                        .emplace(e.target,
                                 classify_escape(model_, e.target, inside,
                                                 max_inside, probes))
                        .first;
            }
            if (rit->second == EscapeClass::MayReturn) nk.out_ret += e.rate;
            if (rit->second == EscapeClass::EscapesExplosive) {
              nk.out_exp += e.rate;
            }
          }
        }
      }
    }
  }

  void fill_f(std::size_t i, const std::vector<double>& A, std::vector<double>& f) const {
    fill_f(i, &A[i * K_ * K_], f);
  }
  // f[x][y'] = sum over inside successors y of q(x, w_i, {y}) * A[y][y'].
  void fill_f(std::size_t i, const double* A_node, std::vector<double>& f) const {
    std::fill(f.begin(), f.end(), 0.0);
    for (std::size_t x = 0; x < K_; ++x) {
      const NodeKernel& nk = kern_[idx(x, i)];
      double* fx = &f[x * K_];
      for (const auto& e : nk.in) {
        const double* Ay = &A_node[e.first * K_];
        const double r = e.second;
        for (std::size_t y = 0; y < K_; ++y) fx[y] += r * Ay[y];
      }
    }
  }

  double* touch_row(std::uint32_t y, std::vector<double>& next,
                    std::vector<std::size_t>& touched) {
    if (g_.empty()) g_ = make_buffer();
    if (g_stamp_.empty()) g_stamp_.assign(K_, 0);
    double* row = &g_[idx(y, 0)];
    if (g_stamp_[y] != stamp_) {
      std::fill(row, row + N_ + 1, 0.0);
      g_stamp_[y] = stamp_;
      touched.push_back(y);
      // the output row gets overwritten panel by panel; nothing to clear
      (void)next;
    }
    return row;
  }

  const QModel& model_;
  double u_;
  std::vector<double> nodes_;
  std::vector<State> states_;
  int r_;
  std::size_t K_ = 0, N_ = 0;
  std::unordered_map<State, std::size_t> pos_;
  std::vector<PanelCoef> coef_;
  std::vector<NodeKernel> kern_;
  std::vector<double> g_;
  std::vector<int> g_stamp_;
  int stamp_ = 0;
};

struct SeriesRun {
  std::vector<double> sum;            // accumulated partial sum, engine layout
  std::vector<double> total_per_node; // mass of the partial sum
  std::vector<double> outcum_raw;     // integral of raw outflow up to node
  std::vector<double> outcum_ret;
  std::vector<double> outcum_exp;
  std::vector<double> term_mass;      // at the final node, per term
  int terms_used = 0;
  double last_term_mass = 0.0;
  double tail_bound = 0.0;
  bool converged = false;
};

// Runs the forward series until the stopping rule (or max_terms) fires.
// Stop when the current term mass is below eps AND the unaccounted-mass
// bound 1 - tabulated - outflow is below max(eps, tail_slack); a term that is
// identically zero ends the series unconditionally.
SeriesRun run_series(TermEngine& eng, std::size_t xpos, const SolveOptions& opts) {
  const std::size_t nn = eng.node_count();
  SeriesRun run;
  run.sum = eng.make_buffer();
  std::vector<double> term = eng.make_buffer();
  std::vector<double> next = eng.make_buffer();
  std::vector<double> mass(nn, 0.0), out_raw(nn, 0.0), out_ret(nn, 0.0),
      out_exp(nn, 0.0);
  run.total_per_node.assign(nn, 0.0);
  run.outcum_raw.assign(nn, 0.0);
  run.outcum_ret.assign(nn, 0.0);
  run.outcum_exp.assign(nn, 0.0);

  eng.fill_term0(xpos, term);
  std::vector<std::size_t> active;
  {
    double m0 = 0.0;
    for (std::size_t i = 0; i < nn; ++i) {
      const double v = term[eng.idx(xpos, i)];
      run.sum[eng.idx(xpos, i)] = v;
      run.total_per_node[i] = v;
      m0 = std::max(m0, v);
    }
    run.term_mass.push_back(term[eng.idx(xpos, nn - 1)]);
    run.terms_used = 1;
    run.last_term_mass = m0;
    if (m0 > opts.active_threshold) active.push_back(xpos);
  }

  const double stop_tail = std::max(opts.eps, opts.tail_slack);
  // nonzero rows of each buffer, so stale rows can be recycled cheaply
  std::vector<std::size_t> rows_term{xpos}, rows_next;
  for (int n = 1; n < opts.max_terms; ++n) {
    std::fill(out_raw.begin(), out_raw.end(), 0.0);
    std::fill(out_ret.begin(), out_ret.end(), 0.0);
    std::fill(out_exp.begin(), out_exp.end(), 0.0);
    eng.clear_rows(next, rows_next);
    auto res = eng.step(term, active, next, out_raw, out_ret, out_exp, mass,
                        opts.active_threshold);
    // outflow of term n-1 materializes while building term n
    double acc_r = 0.0, acc_q = 0.0, acc_e = 0.0;
    for (std::size_t p = 0; p + 1 < nn; ++p) {
      const double h = eng.nodes()[p + 1] - eng.nodes()[p];
      acc_r += 0.5 * h * (out_raw[p] + out_raw[p + 1]);
      acc_q += 0.5 * h * (out_ret[p] + out_ret[p + 1]);
      acc_e += 0.5 * h * (out_exp[p] + out_exp[p + 1]);
      run.outcum_raw[p + 1] += acc_r;
      run.outcum_ret[p + 1] += acc_q;
      run.outcum_exp[p + 1] += acc_e;
    }
    for (std::size_t y : res.touched) {
      for (std::size_t i = 0; i < nn; ++i) {
        run.sum[eng.idx(y, i)] += next[eng.idx(y, i)];
      }
    }
    for (std::size_t i = 0; i < nn; ++i) run.total_per_node[i] += mass[i];
    if (static_cast<int>(run.term_mass.size()) < opts.term_mass_record) {
      run.term_mass.push_back(mass[nn - 1]);
    }
    run.terms_used = n + 1;
    run.last_term_mass = res.max_mass;

    double rem = 0.0;
    for (std::size_t i = 0; i < nn; ++i) {
      rem = std::max(rem, 1.0 - run.total_per_node[i] - run.outcum_raw[i]);
    }
    run.tail_bound = std::max(0.0, rem);
    if (res.all_zero ||
        (res.max_mass < opts.eps && run.tail_bound < stop_tail)) {
      run.converged = true;
      break;
    }
    std::swap(term, next);
    rows_next = std::move(rows_term);  // old term content now sits in `next`
    rows_term = std::move(res.touched);
    active = std::move(res.next_active);
  }
  return run;
}

SolutionField assemble_field(const TermEngine& eng, double u, State x,
                             const std::vector<double>& times,
                             const std::vector<double>& engine_values,
                             int term_index) {
  SolutionField f;
  f.u = u;
  f.x = x;
  f.times = times;
  f.states = eng.states();
  f.term_index = term_index;
  const std::size_t K = eng.state_count();
  const std::size_t r = eng.output_stride();
  f.values.resize(times.size() * K);
  for (std::size_t ti = 0; ti < times.size(); ++ti) {
    const std::size_t node = (ti + 1) * r;
    for (std::size_t s = 0; s < K; ++s) {
      f.values[ti * K + s] = engine_values[eng.idx(s, node)];
    }
  }
  return f;
}

std::size_t require_state(const TermEngine& eng, State x) {
  const std::size_t p = eng.pos_of(x);
  if (p == SolutionField::npos) {
    throw std::invalid_argument("start state not in the truncated state set");
  }
  return p;
}

}  // namespace

// ---------------------------------------------------------------------------
// SolutionField helpers
// ---------------------------------------------------------------------------

std::size_t SolutionField::state_pos(State y) const {
  auto it = std::lower_bound(states.begin(), states.end(), y);
  if (it == states.end() || *it != y) return npos;
  return static_cast<std::size_t>(it - states.begin());
}

double SolutionField::value(std::size_t time_idx, State y) const {
  const std::size_t p = state_pos(y);
  if (p == npos) throw std::invalid_argument("state not tabulated");
  return value_at(time_idx, p);
}

double SolutionField::total_mass(std::size_t time_idx) const {
  double s = 0.0;
  for (std::size_t p = 0; p < states.size(); ++p) s += value_at(time_idx, p);
  return s;
}

std::size_t SolutionField::time_index(double t) const {
  const double tol = 1e-9 * std::max(1.0, std::abs(t));
  auto it = std::lower_bound(times.begin(), times.end(), t - tol);
  if (it == times.end() || std::abs(*it - t) > tol) {
    throw std::invalid_argument("time not on the field grid");
  }
  return static_cast<std::size_t>(it - times.begin());
}

std::vector<double> make_time_grid(double a, double b, double step) {
  if (!(step > 0.0) || !(b > a)) {
    throw std::invalid_argument("make_time_grid: need b > a and step > 0");
  }
  const double n_real = (b - a) / step;
  const std::size_t n = static_cast<std::size_t>(std::llround(n_real));
  if (n < 1 || std::abs(n_real - static_cast<double>(n)) > 1e-6) {
    throw std::invalid_argument("make_time_grid: step does not divide b - a");
  }
  std::vector<double> g(n);
  for (std::size_t k = 0; k + 1 < n; ++k) {
    g[k] = a + step * static_cast<double>(k + 1);
  }
  g[n - 1] = b;
  return g;
}

// ---------------------------------------------------------------------------
// Series operations
// ---------------------------------------------------------------------------

SolutionField term0(const QModel& model, double u, State x,
                    const std::vector<double>& time_grid,
                    const std::vector<State>& states) {
  TermEngine eng(model, u, time_grid, states, 1);
  const std::size_t xpos = require_state(eng, x);
  std::vector<double> t0 = eng.make_buffer();
  eng.fill_term0(xpos, t0);
  SolutionField f = assemble_field(eng, u, x, time_grid, t0, 0);
  f.terms_used = 1;
  double m = 0.0;
  for (std::size_t ti = 0; ti < f.times.size(); ++ti) {
    m = std::max(m, f.total_mass(ti));
  }
  f.last_term_mass = m;
  return f;
}

SolutionField next_term(const QModel& model, const SolutionField& prev,
                        TermVariant variant) {
  if (prev.term_index < 0) {
    throw std::invalid_argument("next_term: prev must be a single series term");
  }
  const int n = prev.term_index + 1;
  // A single-point grid gets an internal sub-grid for the w-integral.
  const int substeps = prev.times.size() == 1 ? 256 : 1;
  TermEngine eng(model, prev.u, prev.times, prev.states, substeps);
  const std::size_t xpos = require_state(eng, prev.x);
  const std::size_t nn = eng.node_count();

  if (variant == TermVariant::ForwardForm) {
    // Re-derive terms 0..n through the forward recursion (the tabulated prev
    // holds output-grid values only, which cannot seed a refined w-grid).
    std::vector<double> term = eng.make_buffer(), next_buf = eng.make_buffer();
    std::vector<double> mass(nn), out_raw(nn), out_ret(nn), out_exp(nn);
    eng.fill_term0(xpos, term);
    std::vector<std::size_t> active{xpos}, rows_term{xpos}, rows_next;
    double out_total = 0.0, ret_total = 0.0, max_mass = 0.0;
    for (int m = 1; m <= n; ++m) {
      std::fill(out_raw.begin(), out_raw.end(), 0.0);
      std::fill(out_ret.begin(), out_ret.end(), 0.0);
      std::fill(out_exp.begin(), out_exp.end(), 0.0);
      eng.clear_rows(next_buf, rows_next);
      auto res = eng.step(term, active, next_buf, out_raw, out_ret, out_exp,
                          mass, 0.0);
      double acc_r = 0.0, acc_q = 0.0;
      for (std::size_t p = 0; p + 1 < nn; ++p) {
        const double h = eng.nodes()[p + 1] - eng.nodes()[p];
        acc_r += 0.5 * h * (out_raw[p] + out_raw[p + 1]);
        acc_q += 0.5 * h * (out_ret[p] + out_ret[p + 1]);
      }
      out_total += acc_r;
      ret_total += acc_q;
      max_mass = res.max_mass;
      std::swap(term, next_buf);
      rows_next = std::move(rows_term);
      rows_term = std::move(res.touched);
      active = std::move(res.next_active);
    }
    SolutionField f = assemble_field(eng, prev.u, prev.x, prev.times, term, n);
    f.terms_used = n + 1;
    f.last_term_mass = max_mass;
    f.truncation_outflow = out_total;
    f.returning_outflow = ret_total;
    return f;
  }

  // BackwardForm: start-time recursion with each output time as terminal.
  SolutionField f;
  f.u = prev.u;
  f.x = prev.x;
  f.times = prev.times;
  f.states = prev.states;
  f.term_index = n;
  f.terms_used = n + 1;
  const std::size_t K = eng.state_count();
  const std::size_t r = eng.output_stride();
  f.values.assign(prev.times.size() * K, 0.0);
  for (std::size_t ti = 0; ti < prev.times.size(); ++ti) {
    const std::size_t jm = (ti + 1) * r;
    eng.backward_levels(jm, n, [&](int level, const std::vector<double>& A) {
      if (level != n) return;
      const double* row = &A[0 * K * K + xpos * K];
      for (std::size_t y = 0; y < K; ++y) f.values[ti * K + y] = row[y];
    });
  }
  double m = 0.0;
  for (std::size_t ti = 0; ti < f.times.size(); ++ti) {
    m = std::max(m, f.total_mass(ti));
  }
  f.last_term_mass = m;
  return f;
}

SolutionField minimal_solution(const QModel& model, double u, State x,
                               const std::vector<double>& time_grid,
                               const std::vector<State>& states,
                               const SolveOptions& opts) {
  if (!(opts.eps > 0.0)) throw std::invalid_argument("minimal_solution: eps <= 0");
  if (opts.max_terms < 1) {
    throw std::invalid_argument("minimal_solution: max_terms < 1");
  }
  TermEngine eng(model, u, time_grid, states, opts.substeps);
  const std::size_t xpos = require_state(eng, x);
  SeriesRun run = run_series(eng, xpos, opts);

  SolutionField f = assemble_field(eng, u, x, time_grid, run.sum, -1);
  f.terms_used = run.terms_used;
  f.last_term_mass = run.last_term_mass;
  f.series_tail_bound = run.tail_bound;
  f.term_mass = std::move(run.term_mass);
  f.truncation_outflow = run.outcum_raw.back();
  f.returning_outflow = run.outcum_ret.back();
  f.explosive_outflow = run.outcum_exp.back();
  f.truncation_warning = f.truncation_outflow > opts.outflow_warning_cap;

  double max_total = 0.0;
  for (double m : run.total_per_node) max_total = std::max(max_total, m);
  if (max_total > 1.0 + 1e-12) {
    // Quadrature bias pushed the partial sums past 1; renormalize and record.
    f.mass_excess = max_total - 1.0;
    for (double& v : f.values) v /= max_total;
  }

  if (!run.converged) {
    throw NonConvergenceError(
        "series did not reach the stopping rule within max_terms", std::move(f));
  }
  return f;
}

BackwardFamily backward_family(const QModel& model, double u,
                               const std::vector<double>& time_grid,
                               const std::vector<State>& states,
                               const SolveOptions& opts) {
  TermEngine eng(model, u, time_grid, states, opts.substeps);
  const std::size_t K = eng.state_count();
  const std::size_t r = eng.output_stride();
  const std::size_t jm = eng.node_count() - 1;

  BackwardFamily fam;
  fam.u = u;
  fam.t = time_grid.back();
  fam.nodes.push_back(u);
  fam.nodes.insert(fam.nodes.end(), time_grid.begin(), time_grid.end());
  fam.states = states;
  const std::size_t out_nodes = fam.nodes.size();
  fam.values.assign(out_nodes * K * K, 0.0);

  // Sum start-time levels until the largest level mass over all (node, x)
  // rows drops below eps.  Levels are generated in blocks since the level
  // recursion cannot be resumed cheaply.
  int levels = 16;
  bool done = false;
  while (!done) {
    std::fill(fam.values.begin(), fam.values.end(), 0.0);
    double last_mass = 1.0;
    int used = 0;
    eng.backward_levels(jm, levels, [&](int level, const std::vector<double>& A) {
      if (done) return;  // stopping level already reached within this block
      double mx = 0.0;
      for (std::size_t oi = 0; oi < out_nodes; ++oi) {
        const std::size_t node = oi == 0 ? 0 : oi * r;
        for (std::size_t x = 0; x < K; ++x) {
          const double* row = &A[(node * K + x) * K];
          double m = 0.0;
          for (std::size_t y = 0; y < K; ++y) {
            fam.values[(oi * K + x) * K + y] += row[y];
            m += row[y];
          }
          mx = std::max(mx, m);
        }
      }
      last_mass = mx;
      used = level + 1;
      if (mx < opts.eps) done = true;
    });
    fam.terms_used = used;
    fam.last_term_mass = last_mass;
    if (done) break;
    if (levels >= opts.max_terms) {
      throw std::runtime_error(
          "backward_family: series did not converge within max_terms");
    }
    levels = std::min(opts.max_terms, levels * 4);
  }
  return fam;
}

// ---------------------------------------------------------------------------
// Diagnostics
// ---------------------------------------------------------------------------

double ck_residual(const SolutionField& field_a,
                   const std::vector<SolutionField>& fields_mid, double s,
                   double t) {
  if (fields_mid.size() != field_a.states.size()) {
    throw std::invalid_argument("ck_residual: need one mid field per state");
  }
  const std::size_t si = field_a.time_index(s);
  const std::size_t ti = field_a.time_index(t);
  if (!(field_a.u < s && s < t)) {
    throw std::invalid_argument("ck_residual: need u < s < t");
  }
  const std::size_t K = field_a.states.size();
  std::vector<std::size_t> mid_ti(K);
  for (std::size_t k = 0; k < K; ++k) {
    const SolutionField& m = fields_mid[k];
    if (m.states != field_a.states) {
      throw std::invalid_argument("ck_residual: truncation mismatch");
    }
    if (std::abs(m.u - s) > 1e-9 || m.x != field_a.states[k]) {
      throw std::invalid_argument("ck_residual: mid field not started at (s, y)");
    }
    mid_ti[k] = m.time_index(t);
  }
  double worst = 0.0;
  for (std::size_t yp = 0; yp < K; ++yp) {
    double rhs = 0.0;
    for (std::size_t k = 0; k < K; ++k) {
      const double w = field_a.value_at(si, k);
      if (w == 0.0) continue;
      rhs += w * fields_mid[k].value_at(mid_ti[k], yp);
    }
    worst = std::max(worst, std::abs(field_a.value_at(ti, yp) - rhs));
  }
  return worst;
}

RegularityDefect regularity_defect(const SolutionField& field, double t) {
  const std::size_t ti = field.time_index(t);
  RegularityDefect d;
  d.defect = std::clamp(1.0 - field.total_mass(ti), 0.0, 1.0);
  d.truncation_outflow = field.truncation_outflow;
  d.returning_outflow = field.returning_outflow;
  return d;
}

// ---------------------------------------------------------------------------
// Serialization
// ---------------------------------------------------------------------------

nlohmann::json field_to_json(const SolutionField& field) {
  nlohmann::json j;
  j["u"] = field.u;
  j["x"] = field.x;
  j["times"] = field.times;
  j["states"] = field.states;
  if (field.term_index >= 0) j["term_index"] = field.term_index;
  j["terms_used"] = field.terms_used;
  j["last_term_mass"] = field.last_term_mass;
  j["series_tail_bound"] = field.series_tail_bound;
  j["truncation_outflow"] = field.truncation_outflow;
  j["returning_outflow"] = field.returning_outflow;
  j["explosive_outflow"] = field.explosive_outflow;
  j["truncation_warning"] = field.truncation_warning;
  if (field.mass_excess > 0.0) j["mass_excess"] = field.mass_excess;
  if (!field.term_mass.empty()) j["term_mass"] = field.term_mass;
  nlohmann::json rows = nlohmann::json::array();
  for (std::size_t ti = 0; ti < field.times.size(); ++ti) {
    nlohmann::json row = nlohmann::json::array();
    for (std::size_t s = 0; s < field.states.size(); ++s) {
      row.push_back(field.value_at(ti, s));
    }
    rows.push_back(std::move(row));
  }
  j["values"] = std::move(rows);
  return j;
}

void field_to_csv(const SolutionField& field, std::ostream& out) {
  out << "t,state,value\n";
  char buf[64];
  for (std::size_t ti = 0; ti < field.times.size(); ++ti) {
    for (std::size_t s = 0; s < field.states.size(); ++s) {
      std::snprintf(buf, sizeof(buf), "%.17g,%u,%.17g", field.times[ti],
                    field.states[s], field.value_at(ti, s));
      out << buf << "\n";
    }
  }
}

}  // namespace mjp
