#include "mjp/simulate.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <ostream>
#include <sstream>

namespace mjp {

namespace {

constexpr double kRootTol = 1e-10;
constexpr double kInstantRate = 1e300;  // treated as an immediate jump
constexpr std::size_t kHistBins = 65;   // 0..63 plus overflow

std::uint64_t splitmix64(std::uint64_t z) {
  z += 0x9e3779b97f4a7c15ULL;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

// Monotone root of Lambda(u, tau) = target on [u, hi]; caller guarantees
// Lambda(u, hi) >= target.  Newton polished, bisection safeguarded.
double invert_integrated_rate(const QModel& model, State x, double u,
                              double target, double hi) {
  double lo = u;
  double f_hi = integrated_rate(model, x, u, hi) - target;
  if (f_hi < 0.0) {
    throw std::runtime_error("invert_integrated_rate: lost bracket");
  }
  const double q0 = model.rate(x, u);
  double tau = (q0 > 0.0 && std::isfinite(q0))
                   ? std::min(u + target / q0, 0.5 * (u + hi))
                   : 0.5 * (u + hi);
  if (!(tau > lo) || !(tau < hi)) tau = 0.5 * (lo + hi);
  for (int iter = 0; iter < 200; ++iter) {
    const double f = integrated_rate(model, x, u, tau) - target;
    if (std::abs(f) <= kRootTol) return tau;
    if (f > 0.0) {
      hi = tau;
    } else {
      lo = tau;
    }
    if (hi - lo < 1e-15 * std::max(1.0, std::abs(hi))) return 0.5 * (lo + hi);
    const double q = model.rate(x, tau);
    double next = (q > 0.0 && std::isfinite(q)) ? tau - f / q : 0.0;
    if (!(next > lo) || !(next < hi)) next = 0.5 * (lo + hi);
    tau = next;
  }
  std::ostringstream os;
  os << "holding-time root finder did not converge; bracket [" << lo << ","
     << hi << "] for state " << x;
  throw std::runtime_error(os.str());
}

double exp1(Rng& rng) {
  std::exponential_distribution<double> d(1.0);
  return d(rng);
}

}  // namespace

Rng path_rng(std::uint64_t seed, std::uint64_t path_index) {
  return Rng(splitmix64(splitmix64(seed) ^ path_index));
}

std::optional<double> sample_holding(const QModel& model, State x, double u,
                                     Rng& rng, double horizon) {
  const double latest = model.latest_time();
  if (!(u < latest)) {
    throw std::invalid_argument("sample_holding: u beyond the usable horizon");
  }
  const double E = exp1(rng);  // drawn first: one draw per call, always

  const double q_now = model.rate(x, u);
  if (!std::isfinite(q_now) || q_now >= kInstantRate) return u;  // boundary layer

  double hi = std::min(horizon, latest);
  if (std::isfinite(hi)) {
    double lam_hi;
    try {
      lam_hi = integrated_rate(model, x, u, hi);
    } catch (const DivergenceError&) {
      lam_hi = std::numeric_limits<double>::infinity();
    }
    if (lam_hi < E) return std::nullopt;
    if (!std::isfinite(lam_hi)) {
      // rate diverges inside (u, hi]: bisect the endpoint down to a finite
      // bracket; the root lies strictly before the singularity
      double probe = hi;
      for (int k = 0; k < 200; ++k) {
        probe = 0.5 * (u + probe);
        double lam;
        try {
          lam = integrated_rate(model, x, u, probe);
        } catch (const DivergenceError&) {
          continue;
        }
        if (std::isfinite(lam) && lam >= E) {
          hi = probe;
          break;
        }
      }
    }
    return invert_integrated_rate(model, x, u, E, hi);
  }

  // Infinite horizon: geometric bracket expansion.
  double width = 1.0;
  for (int k = 0; k < 64; ++k) {
    const double cand = u + width;
    const double lam = integrated_rate(model, x, u, cand);
    if (lam >= E) return invert_integrated_rate(model, x, u, E, cand);
    width *= 2.0;
  }
  return std::nullopt;  // integrated rate bounded below E for all time
}

State sample_jump_target(const QModel& model, State x, double t, Rng& rng) {
  const std::vector<KernelEntry> dist = jump_distribution(model, x, t);
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  const double r = u01(rng);
  double cum = 0.0;
  for (const KernelEntry& e : dist) {
    cum += e.rate;
    if (r < cum) return e.target;
  }
  return dist.back().target;  // r landed in the rounding slack
}

PathSample sample_path(const QModel& model, State x0, double u,
                       double horizon_t, Rng& rng, int jump_cap) {
  if (!(horizon_t > u)) {
    throw std::invalid_argument("sample_path: horizon must exceed u");
  }
  if (horizon_t > model.latest_time() + 1e-12) {
    throw std::invalid_argument("sample_path: horizon beyond usable interval");
  }
  PathSample path;
  path.initial_state = x0;
  path.censored_at = horizon_t;
  State state = x0;
  double t = u;
  while (true) {
    if (static_cast<int>(path.jump_times.size()) >= jump_cap) {
      path.hit_jump_cap = true;
      path.censored_at = t;
      const double q = model.rate(state, t);
      // runaway heuristic: expected jumps to the horizon vastly exceed cap
      path.exploded =
          !std::isfinite(q) || q * (horizon_t - t) > 1e6;
      break;
    }
    const std::optional<double> tau =
        sample_holding(model, state, t, rng, horizon_t);
    if (!tau || *tau > horizon_t) break;  // censored at the horizon
    const double jump_at = std::max(*tau, t);
    state = sample_jump_target(model, state, jump_at, rng);
    path.jump_times.push_back(jump_at);
    path.visited_states.push_back(state);
    t = jump_at;
  }
  return path;
}

MCEstimate mc_estimate(const QModel& model, double u, State x, double t,
                       std::uint64_t n_paths, std::uint64_t seed,
                       const std::vector<State>& count_states, int jump_cap) {
  if (n_paths < 1) throw std::invalid_argument("mc_estimate: n_paths < 1");
  MCEstimate est;
  est.u = u;
  est.x = x;
  est.t = t;
  est.states = count_states;
  est.counts.assign(count_states.size(), 0);
  est.n_paths = n_paths;
  est.jump_count_hist.assign(kHistBins, 0);
  est.seed = seed;
  est.generator = "mt19937_64/splitmix64-substreams";

  for (std::uint64_t i = 0; i < n_paths; ++i) {
    Rng rng = path_rng(seed, i);
    const PathSample path = sample_path(model, x, u, t, rng, jump_cap);
    const std::size_t bin = std::min(path.jump_count(), kHistBins - 1);
    ++est.jump_count_hist[bin];
    if (path.exploded) {
      ++est.explosion_count;
      continue;
    }
    const State y = path.final_state();
    auto it = std::lower_bound(count_states.begin(), count_states.end(), y);
    if (it != count_states.end() && *it == y) {
      ++est.counts[static_cast<std::size_t>(it - count_states.begin())];
    } else {
      ++est.out_of_truncation;
    }
  }
  return est;
}

double MCEstimate::std_err(std::size_t i) const {
  const double p = p_hat(i);
  return std::sqrt(p * (1.0 - p) / static_cast<double>(n_paths));
}

nlohmann::json MCEstimate::to_json() const {
  nlohmann::json j;
  j["u"] = u;
  j["x"] = x;
  j["t"] = t;
  j["n_paths"] = n_paths;
  j["seed"] = seed;
  j["generator"] = generator;
  j["states"] = states;
  j["counts"] = counts;
  j["out_of_truncation"] = out_of_truncation;
  j["explosion_count"] = explosion_count;
  j["jump_count_hist"] = jump_count_hist;
  nlohmann::json p = nlohmann::json::array(), se = nlohmann::json::array();
  for (std::size_t i = 0; i < counts.size(); ++i) {
    p.push_back(p_hat(i));
    se.push_back(std_err(i));
  }
  j["p_hat"] = std::move(p);
  j["std_err"] = std::move(se);
  return j;
}

void MCEstimate::to_csv(std::ostream& out) const {
  out << "state,count,p_hat,std_err\n";
  char buf[96];
  for (std::size_t i = 0; i < states.size(); ++i) {
    std::snprintf(buf, sizeof(buf), "%u,%llu,%.17g,%.17g", states[i],
                  static_cast<unsigned long long>(counts[i]), p_hat(i),
                  std_err(i));
    out << buf << "\n";
  }
  out << "# seed=" << seed << " n_paths=" << n_paths
      << " explosions=" << explosion_count
      << " out_of_truncation=" << out_of_truncation << "\n";
}

}  // namespace mjp
