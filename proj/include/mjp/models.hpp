#ifndef MJP_MODELS_HPP
#define MJP_MODELS_HPP

#include <cstdint>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mjp/qmodel.hpp"

namespace mjp {

/// Named model family plus parameters, matching the JSON model-spec format:
/// { "family": ..., "params": {...}, "horizon": [T0, T1|"inf"],
///   "epsilon_T1": real }
struct ModelSpec {
  std::string family;
  nlohmann::json params = nlohmann::json::object();
  double t_begin = 0.0;
  double t_end = kInfiniteTime;
  double epsilon_t1 = 0.0;
  std::string description;

  nlohmann::json to_json() const;
  static ModelSpec from_json(const nlohmann::json& j);
};

ModelSpec load_spec_file(const std::string& path);

/// Builds a QModel from a spec.  Families:
///   constant     — q(x,t)=c, partner-flip kernel (x xor 1); c may be 0
///   poisson      — q(n,t)=lambda, kernel n -> n+1
///   yule         — q(n,t)=n+1, kernel n -> n+1
///   pure-birth   — q(n,t)=lambda_n = growth^(n+1), kernel n -> n+1
///   oscillating  — integers interleaved to indices; q(0)=1 spreading as
///                  2^-(|j|+1), q(j)=2^|j| flipping j <-> -j
///   reciprocal   — q(x,t)=1/(T1-t), partner-flip kernel
///   custom-table — piecewise-constant-in-time rate/kernel tables
QModel build_model(const ModelSpec& spec);

// Direct builders used by tests and the catalog.
QModel make_constant_model(double rate, double t0 = 0.0,
                           double t1 = kInfiniteTime);
QModel make_poisson_model(double rate, double t0 = 0.0,
                          double t1 = kInfiniteTime);
QModel make_yule_model(double t0 = 0.0, double t1 = kInfiniteTime);
QModel make_pure_birth_model(double growth = 2.0, double t0 = 0.0,
                             double t1 = kInfiniteTime);
QModel make_oscillating_model(int kernel_support = 45, double t0 = 0.0,
                              double t1 = kInfiniteTime);
QModel make_reciprocal_model(double t1, double epsilon_t1 = 1e-6);

/// Index mapping for the oscillating model: 0 -> 0, +k -> 2k-1, -k -> 2k.
State oscillating_index(int j);
int oscillating_value(State index);
/// Truncation set {index(j) : |j| <= max_abs}.
std::vector<State> oscillating_truncation(int max_abs);

/// Contiguous truncation {0, ..., count-1}.
std::vector<State> range_truncation(std::size_t count);

}  // namespace mjp

#endif  // MJP_MODELS_HPP
