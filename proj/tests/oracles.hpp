// Independent numeric oracles for the test suite: a composite-Simpson
// integrator (separate from the library's adaptive quadrature), a dense
// matrix exponential for time-homogeneous truncated generators, closed-form
// transition laws, and small statistics helpers.
#ifndef MJP_TESTS_ORACLES_HPP
#define MJP_TESTS_ORACLES_HPP

#include <cmath>
#include <cstddef>
#include <functional>
#include <stdexcept>
#include <vector>

namespace oracles {

// Composite Simpson with interval doubling until successive refinements
// agree to tol.
inline double integrate(const std::function<double(double)>& f, double a,
                        double b, double tol = 1e-12) {
  if (a == b) return 0.0;
  auto simpson_n = [&](std::size_t n) {
    const double h = (b - a) / static_cast<double>(n);
    double s = f(a) + f(b);
    for (std::size_t i = 1; i < n; ++i) {
      s += (i % 2 ? 4.0 : 2.0) * f(a + h * static_cast<double>(i));
    }
    return s * h / 3.0;
  };
  double prev = simpson_n(8);
  for (std::size_t n = 16; n <= (1u << 22); n *= 2) {
    const double cur = simpson_n(n);
    if (std::abs(cur - prev) < tol) return cur;
    prev = cur;
  }
  throw std::runtime_error("oracle integrate: no convergence");
}

// Dense matrix exponential exp(A) by scaling and squaring with a Taylor
// series; fine for the small well-scaled generators used in tests.
inline std::vector<double> expm(std::vector<double> A, std::size_t K) {
  double norm = 0.0;
  for (std::size_t i = 0; i < K; ++i) {
    double row = 0.0;
    for (std::size_t j = 0; j < K; ++j) row += std::abs(A[i * K + j]);
    norm = std::max(norm, row);
  }
  int s = 0;
  while (norm > 0.5) {
    norm *= 0.5;
    ++s;
  }
  const double scale = std::ldexp(1.0, -s);
  for (double& v : A) v *= scale;

  auto matmul = [K](const std::vector<double>& X, const std::vector<double>& Y) {
    std::vector<double> Z(K * K, 0.0);
    for (std::size_t i = 0; i < K; ++i) {
      for (std::size_t k = 0; k < K; ++k) {
        const double x = X[i * K + k];
        if (x == 0.0) continue;
        for (std::size_t j = 0; j < K; ++j) Z[i * K + j] += x * Y[k * K + j];
      }
    }
    return Z;
  };

  std::vector<double> R(K * K, 0.0), T(K * K, 0.0);
  for (std::size_t i = 0; i < K; ++i) R[i * K + i] = 1.0;
  T = R;
  for (int n = 1; n <= 24; ++n) {
    T = matmul(T, A);
    const double inv = 1.0 / static_cast<double>(n);
    bool nonzero = false;
    for (std::size_t i = 0; i < K * K; ++i) {
      T[i] *= inv;
      R[i] += T[i];
      if (std::abs(T[i]) > 1e-300) nonzero = true;
    }
    if (!nonzero) break;
  }
  for (int k = 0; k < s; ++k) R = matmul(R, R);
  return R;
}

// Transition matrix exp(Q t) for a time-homogeneous generator given by the
// per-state rate and kernel entries (target, rate), truncated to K states.
inline std::vector<double> transition_matrix(
    const std::vector<double>& rates,
    const std::vector<std::vector<std::pair<std::size_t, double>>>& kernels,
    std::size_t K, double t) {
  std::vector<double> Q(K * K, 0.0);
  for (std::size_t i = 0; i < K; ++i) {
    Q[i * K + i] = -rates[i] * t;
    for (const auto& [j, r] : kernels[i]) {
      if (j < K) Q[i * K + j] += r * t;
    }
  }
  return expm(std::move(Q), K);
}

inline double poisson_pmf(double lambda_t, int k) {
  double v = std::exp(-lambda_t);
  for (int i = 1; i <= k; ++i) v *= lambda_t / static_cast<double>(i);
  return v;
}

// Yule process with q(n) = n+1 started at 0: geometric law at time t.
inline double yule_pmf(double t, int k) {
  return std::exp(-t) * std::pow(1.0 - std::exp(-t), k);
}

// Two-way oscillating-integers model started at 0 at time u.
inline double oscillating_value_at(double u, double t, int j) {
  if (j == 0) return std::exp(-(t - u));
  return (1.0 - std::exp(-(t - u))) * std::ldexp(1.0, -(std::abs(j) + 1));
}

// |p_hat - p| measured in standard errors of a binomial proportion.
inline double z_score(double p_hat, double p, double n) {
  const double se = std::sqrt(std::max(p * (1.0 - p), 1e-300) / n);
  return std::abs(p_hat - p) / se;
}

// One-sample Kolmogorov-Smirnov statistic against a CDF; data gets sorted.
inline double ks_statistic(std::vector<double> data,
                           const std::function<double(double)>& cdf) {
  std::sort(data.begin(), data.end());
  const double n = static_cast<double>(data.size());
  double d = 0.0;
  for (std::size_t i = 0; i < data.size(); ++i) {
    const double F = cdf(data[i]);
    d = std::max(d, std::abs(F - static_cast<double>(i) / n));
    d = std::max(d, std::abs(static_cast<double>(i + 1) / n - F));
  }
  return d;
}

}  // namespace oracles

#endif  // MJP_TESTS_ORACLES_HPP
