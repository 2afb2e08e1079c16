#include "dosediff/schedule.hpp"

#include <cmath>

namespace dosediff::diffusion {

NoiseSchedule build_schedule(int T, double beta_start, double beta_end) {
  DD_CHECK(T >= 1, "build_schedule: T must be >= 1");
  DD_CHECK(beta_start > 0.0 && beta_start < 1.0, "build_schedule: beta_start must be in (0,1)");
  DD_CHECK(beta_end > 0.0 && beta_end < 1.0, "build_schedule: beta_end must be in (0,1)");

  NoiseSchedule s;
  s.T = T;
  s.beta.resize(static_cast<std::size_t>(T));
  s.alpha.resize(static_cast<std::size_t>(T));
  s.gamma.resize(static_cast<std::size_t>(T));
  s.sigma.resize(static_cast<std::size_t>(T));

  double running = 1.0;
  for (int i = 0; i < T; ++i) {
    const double frac = T == 1 ? 0.0 : static_cast<double>(i) / static_cast<double>(T - 1);
    const double b = beta_start + (beta_end - beta_start) * frac;
    s.beta[static_cast<std::size_t>(i)] = b;
    s.alpha[static_cast<std::size_t>(i)] = 1.0 - b;
    running *= 1.0 - b;
    s.gamma[static_cast<std::size_t>(i)] = running;
    s.sigma[static_cast<std::size_t>(i)] = std::sqrt(b);
  }
  return s;
}

}  // namespace dosediff::diffusion
