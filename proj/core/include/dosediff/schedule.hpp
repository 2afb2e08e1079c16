#pragma once

#include <vector>

#include "dosediff/errors.hpp"

namespace dosediff::diffusion {

// Per-step noise schedule. Index 0 of each vector corresponds to t = 1.
//   alpha_t = 1 - beta_t
//   gamma_t = prod_{i<=t} alpha_i   (cumulative noise intensity)
//   sigma_t = sqrt(1 - alpha_t) = sqrt(beta_t)
struct NoiseSchedule {
  int T = 0;
  std::vector<double> beta;
  std::vector<double> alpha;
  std::vector<double> gamma;
  std::vector<double> sigma;

  double beta_at(int t) const { return at(beta, t); }
  double alpha_at(int t) const { return at(alpha, t); }
  double gamma_at(int t) const { return at(gamma, t); }
  double sigma_at(int t) const { return at(sigma, t); }

 private:
  double at(const std::vector<double>& v, int t) const {
    DD_CHECK(t >= 1 && t <= T, "schedule step t out of range [1, T]");
    return v[static_cast<std::size_t>(t - 1)];
  }
};

// beta_t interpolated linearly from beta_start at t=1 to beta_end at t=T.
// Both endpoints must lie in (0, 1); either direction is accepted.
NoiseSchedule build_schedule(int T, double beta_start, double beta_end);

}  // namespace dosediff::diffusion
