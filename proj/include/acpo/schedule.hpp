#pragma once

#include <vector>

#include "acpo/errors.hpp"

namespace acpo {

// Forward-process tables: beta[t], alpha[t] = 1-beta[t], and alpha_bar[t] =
// prod alpha[0..t]. Index t runs over [0, T).
struct NoiseSchedule {
  int T = 0;
  std::vector<double> beta;
  std::vector<double> alpha;
  std::vector<double> alpha_bar;
};

// Linear beta ramp: beta[t] = beta_start + (beta_end-beta_start) * t/(T-1).
inline NoiseSchedule make_schedule(int T, double beta_start, double beta_end) {
  if (T < 2) throw ConfigError("make_schedule: T must be >= 2");
  if (!(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0))
    throw ConfigError("make_schedule: need 0 < beta_start <= beta_end < 1");
  NoiseSchedule s;
  s.T = T;
  s.beta.resize(T);
  s.alpha.resize(T);
  s.alpha_bar.resize(T);
  double prod = 1.0;
  for (int t = 0; t < T; ++t) {
    s.beta[t] = beta_start + (beta_end - beta_start) * t / (T - 1);
    s.alpha[t] = 1.0 - s.beta[t];
    prod *= s.alpha[t];
    s.alpha_bar[t] = prod;
  }
  return s;
}

}  // namespace acpo
