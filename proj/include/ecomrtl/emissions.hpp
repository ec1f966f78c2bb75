#pragma once

// Instantaneous emission surrogate E(v, a): an idle floor plus a term linear
// in positive tractive power. Braking and standing still cost exactly the
// idle floor (no regeneration).

#include <span>
#include <utility>

namespace ecomrtl {

struct EmissionParams {
  double beta0 = 0.12;       // g/s idle floor
  double beta1 = 0.09;       // g/kJ of positive tractive work
  double mass = 1200.0;      // kg
  double roll_coeff = 150.0; // N
  double drag_coeff = 0.45;  // N s^2 / m^2

  /// Throws std::invalid_argument unless beta0 > 0 and every coefficient >= 0.
  void validate() const;
};

/// Tractive power in watts: v (F_roll + F_drag(v)) + m v a.
double tractive_power(double v, double a, const EmissionParams& p);

/// g/s. Throws ContractViolation for v < 0.
double instantaneous_emission(double v, double a, const EmissionParams& p);

/// Left-endpoint integral of E over a (speed, accel) sequence; grams.
/// Throws std::invalid_argument for dt <= 0.
double trip_emission(std::span<const std::pair<double, double>> trace, double dt, const EmissionParams& p);

}  // namespace ecomrtl
