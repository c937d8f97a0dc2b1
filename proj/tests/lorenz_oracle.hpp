#pragma once

// Long-double reference flow for the Lorenz system, independent of rk4_step.

#include <array>
#include <cmath>

#include "chaoscast/chaos_gen.hpp"

namespace chaoscast::testing {

using LVec = std::array<long double, 3>;

// Classic RK4 in long double with `substeps` steps over `span`.
inline LVec oracle_flow(const LorenzState& s, const LorenzParams& p, double span, int substeps) {
  const long double sg = p.sigma, r = p.rho, b = p.beta;
  auto f = [&](const LVec& v) -> LVec {
    return {sg * (v[1] - v[0]), v[0] * (r - v[2]) - v[1], v[0] * v[1] - b * v[2]};
  };
  LVec v{s.x, s.y, s.z};
  const long double h = static_cast<long double>(span) / substeps;
  for (int i = 0; i < substeps; ++i) {
    LVec k1 = f(v), t{}, k2, k3, k4;
    for (int j = 0; j < 3; ++j) t[j] = v[j] + h / 2 * k1[j];
    k2 = f(t);
    for (int j = 0; j < 3; ++j) t[j] = v[j] + h / 2 * k2[j];
    k3 = f(t);
    for (int j = 0; j < 3; ++j) t[j] = v[j] + h * k3[j];
    k4 = f(t);
    for (int j = 0; j < 3; ++j) v[j] += h / 6 * (k1[j] + 2 * k2[j] + 2 * k3[j] + k4[j]);
  }
  return v;
}

inline double distance(const LorenzState& s, const LVec& ref) {
  const long double dx = s.x - ref[0], dy = s.y - ref[1], dz = s.z - ref[2];
  return static_cast<double>(std::sqrt(dx * dx + dy * dy + dz * dz));
}

}  // namespace chaoscast::testing
