#ifndef MJP_SIMULATE_HPP
#define MJP_SIMULATE_HPP

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mjp/qmodel.hpp"

namespace mjp {

using Rng = std::mt19937_64;

struct PathSample {
  State initial_state = 0;
  std::vector<double> jump_times;      // strictly increasing
  std::vector<State> visited_states;   // state entered at each jump
  bool exploded = false;       // cap hit with runaway expected jump count
  bool hit_jump_cap = false;   // raw cap event, always recorded
  double censored_at = 0.0;    // horizon, or last jump time when capped

  State final_state() const {
    return visited_states.empty() ? initial_state : visited_states.back();
  }
  std::size_t jump_count() const { return jump_times.size(); }
};

struct MCEstimate {
  double u = 0.0;
  State x = 0;
  double t = 0.0;
  std::vector<State> states;            // counting truncation, ascending
  std::vector<std::uint64_t> counts;    // per entry of states
  std::uint64_t out_of_truncation = 0;  // alive but outside `states`
  std::uint64_t explosion_count = 0;
  std::uint64_t n_paths = 0;
  std::vector<std::uint64_t> jump_count_hist;  // last bin = overflow
  std::uint64_t seed = 0;
  std::string generator;

  double p_hat(std::size_t i) const {
    return static_cast<double>(counts[i]) / static_cast<double>(n_paths);
  }
  double std_err(std::size_t i) const;
  double explosion_frequency() const {
    return static_cast<double>(explosion_count) / static_cast<double>(n_paths);
  }

  nlohmann::json to_json() const;
  void to_csv(std::ostream& out) const;
};

/// Next jump time after u for a path sitting in x: the root of
/// int_u^tau q(x,theta) dtheta = E with E ~ Exponential(1), found by
/// safeguarded Newton/bisection to |residual| <= 1e-10.  nullopt when the
/// integrated rate up to the horizon (T1 - epsilon, or the supplied cap for
/// infinite horizons) never reaches E.
std::optional<double> sample_holding(const QModel& model, State x, double u,
                                     Rng& rng,
                                     double horizon = kInfiniteTime);

/// Target of a jump from x at time t, by inverse-CDF over the normalized
/// kernel.  Throws NoJumpError via jump_distribution when q(x,t) = 0.
State sample_jump_target(const QModel& model, State x, double t, Rng& rng);

/// Simulates one path from x0 over [u, horizon_t], alternating holding-time
/// and jump-target draws, stopping at the horizon or after jump_cap jumps.
PathSample sample_path(const QModel& model, State x0, double u,
                       double horizon_t, Rng& rng, int jump_cap = 10000);

/// Runs n_paths independent paths with per-path sub-streams derived from
/// seed (counter-based, order-independent); counts final states over the
/// given truncation.  Deterministic for fixed (seed, n_paths, model).
MCEstimate mc_estimate(const QModel& model, double u, State x, double t,
                       std::uint64_t n_paths, std::uint64_t seed,
                       const std::vector<State>& count_states,
                       int jump_cap = 10000);

/// The per-path generator: mt19937_64 keyed by splitmix64 applied to
/// (seed, path index).  Exposed so tests can reproduce single paths.
Rng path_rng(std::uint64_t seed, std::uint64_t path_index);

}  // namespace mjp

#endif  // MJP_SIMULATE_HPP
