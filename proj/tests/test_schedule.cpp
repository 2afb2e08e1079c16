#include <doctest.h>

#include <cmath>

#include "dosediff/schedule.hpp"

using namespace dosediff;
using diffusion::NoiseSchedule;
using diffusion::build_schedule;

TEST_CASE("schedule: single-step case") {
  NoiseSchedule s = build_schedule(1, 0.01, 0.01);
  CHECK(s.beta_at(1) == doctest::Approx(0.01));
  CHECK(s.alpha_at(1) == doctest::Approx(0.99));
  CHECK(s.gamma_at(1) == doctest::Approx(0.99));
  CHECK(s.sigma_at(1) == doctest::Approx(0.1));
}

TEST_CASE("schedule: full-scale endpoints with linear interpolation") {
  NoiseSchedule s = build_schedule(1000, 1e-2, 1e-4);
  CHECK(s.beta_at(1) == doctest::Approx(1e-2));
  CHECK(s.beta_at(1000) == doctest::Approx(1e-4));
  const double expected_mid = 1e-2 + (1e-4 - 1e-2) * 499.0 / 999.0;
  CHECK(s.beta_at(500) == doctest::Approx(expected_mid).epsilon(1e-12));
  CHECK(std::abs(s.beta_at(500) - 5.054e-3) < 2e-6);
}

TEST_CASE("schedule: gamma equals an independent left fold") {
  NoiseSchedule s = build_schedule(257, 0.04, 2e-4);
  double fold = 1.0;
  for (int t = 1; t <= s.T; ++t) {
    fold *= 1.0 - s.beta_at(t);
  }
  CHECK(std::abs(s.gamma_at(s.T) - fold) / fold < 1e-7);
}

TEST_CASE("schedule invariants: monotone gamma, ratio identity, sigma") {
  for (auto [start, end] : {std::pair{5e-2, 5e-4}, std::pair{1e-4, 2e-2}}) {
    NoiseSchedule s = build_schedule(200, start, end);
    for (int t = 1; t <= s.T; ++t) {
      CHECK(s.beta_at(t) > 0.0);
      CHECK(s.beta_at(t) < 1.0);
      CHECK(s.sigma_at(t) * s.sigma_at(t) == doctest::Approx(s.beta_at(t)));
      if (t > 1) {
        CHECK(s.gamma_at(t) < s.gamma_at(t - 1));
        CHECK(std::abs(s.gamma_at(t) / s.gamma_at(t - 1) - s.alpha_at(t)) < 1e-7);
      } else {
        CHECK(s.gamma_at(1) == doctest::Approx(s.alpha_at(1)));
      }
    }
  }
}

TEST_CASE("schedule: contract violations") {
  CHECK_THROWS_AS(build_schedule(0, 0.01, 0.01), ContractError);
  CHECK_THROWS_AS(build_schedule(10, 0.0, 0.01), ContractError);
  CHECK_THROWS_AS(build_schedule(10, 0.01, 1.0), ContractError);
  NoiseSchedule s = build_schedule(10, 0.01, 0.001);
  CHECK_THROWS_AS(s.gamma_at(0), ContractError);
  CHECK_THROWS_AS(s.gamma_at(11), ContractError);
}
