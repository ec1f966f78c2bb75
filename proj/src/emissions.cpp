#include "ecomrtl/emissions.hpp"

#include <algorithm>
#include <stdexcept>
#include <string>

#include "ecomrtl/errors.hpp"

namespace ecomrtl {

void EmissionParams::validate() const {
  if (!(beta0 > 0.0)) throw std::invalid_argument("emission: beta0 must be > 0 (idling must cost)");
  if (!(beta1 >= 0.0 && mass >= 0.0 && roll_coeff >= 0.0 && drag_coeff >= 0.0)) {
    throw std::invalid_argument("emission: coefficients must be >= 0");
  }
}

double tractive_power(double v, double a, const EmissionParams& p) {
  return v * (p.roll_coeff + p.drag_coeff * v * v) + p.mass * v * a;
}

double instantaneous_emission(double v, double a, const EmissionParams& p) {
  if (!(v >= 0.0)) throw ContractViolation("instantaneous_emission: negative speed " + std::to_string(v));
  return p.beta0 + p.beta1 * std::max(0.0, tractive_power(v, a, p)) / 1000.0;
}

double trip_emission(std::span<const std::pair<double, double>> trace, double dt, const EmissionParams& p) {
  if (!(dt > 0.0)) throw std::invalid_argument("trip_emission: dt must be > 0");
  double grams = 0.0;
  for (const auto& [v, a] : trace) grams += instantaneous_emission(v, a, p) * dt;
  return grams;
}

}  // namespace ecomrtl
