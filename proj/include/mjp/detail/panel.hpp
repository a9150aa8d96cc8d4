#ifndef MJP_DETAIL_PANEL_HPP
#define MJP_DETAIL_PANEL_HPP

#include <cmath>
#include <limits>

#include "mjp/qmodel.hpp"

namespace mjp::detail {

// Exponentially weighted panel rule.  Over one panel [w_i, w_i + h] with the
// rate taken through its exact integral a and the inflow g interpolated
// linearly, the Duhamel update
//     I(w_{i+1}) = e^{-a} I(w_i) + int_0^h e^{-lambda (h - tau)} g(tau) dtau
// has the closed-form panel
//     g_i * h*w3 + g_{i+1} * h*w2,
//     w1 = (1 - e^{-a})/a,  w2 = (a - 1 + e^{-a})/a^2,  w3 = w1 - w2.
// The survival factor is exact, so the rule stays stable for arbitrarily
// stiff rates (plain trapezoid would amplify error by e^{a}).  The mirrored
// orientation (weighting by e^{-lambda tau}) swaps the two coefficients:
//     f_i * h*w2 + f_{i+1} * h*w3.
struct PanelCoef {
  double E = 1.0;    // exp(-a)
  double w2h = 0.0;  // h * w2
  double w3h = 0.0;  // h * w3
};

inline double panel_weight_w2(double a) {
  if (a < 0.5) {
    // sum_{m>=0} (-a)^m / (m+2)!, alternating and rapidly convergent
    double term = 0.5, sum = 0.5;
    for (int m = 1; m < 30; ++m) {
      term *= -a / static_cast<double>(m + 2);
      sum += term;
      if (std::abs(term) < 1e-18) break;
    }
    return sum;
  }
  return (a - 1.0 + std::exp(-a)) / (a * a);
}

inline PanelCoef panel_coef(double a, double h) {
  PanelCoef c;
  if (!std::isfinite(a)) {
    if (std::isnan(a)) throw InvalidModelError("panel_coef: NaN integrated rate");
    c.E = 0.0;  // infinite rate: instant boundary layer carries no mass
    return c;
  }
  if (a < 0.0) {
    if (a < -1e-12) {
      throw InvalidModelError("panel_coef: negative integrated rate");
    }
    a = 0.0;
  }
  c.E = std::exp(-a);
  const double w1 = (a == 0.0) ? 1.0 : -std::expm1(-a) / a;
  const double w2 = panel_weight_w2(a);
  c.w2h = h * w2;
  c.w3h = h * (w1 - w2);
  if (c.w3h < 0.0) c.w3h = 0.0;  // cancellation guard at very large a
  return c;
}

/// Panel coefficient for the model rate of state x over [lo, hi]; a divergent
/// integrated rate is treated as an instant (mass-free) boundary layer.
inline PanelCoef panel_coef_for(const QModel& model, State x, double lo,
                                double hi) {
  double a;
  try {
    a = integrated_rate(model, x, lo, hi);
  } catch (const DivergenceError&) {
    a = std::numeric_limits<double>::infinity();
  }
  return panel_coef(a, hi - lo);
}

}  // namespace mjp::detail

#endif  // MJP_DETAIL_PANEL_HPP
