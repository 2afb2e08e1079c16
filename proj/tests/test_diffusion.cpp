#include <doctest.h>

#include <cmath>
#include <cstring>
#include <numbers>

#include "dosediff/diffusion.hpp"
#include "dosediff/nets.hpp"
#include "dosediff/ops.hpp"
#include "testutil.hpp"

using namespace dosediff;
using namespace dosediff::diffusion;
using testutil::randn_tensor;

namespace {

// Predictor returning a constant value; encode is a no-op.
class ConstantModel : public ConditionalModel {
 public:
  explicit ConstantModel(float value) : value_(value) {}
  std::vector<Tensor> encode(const Tensor&) const override { return {}; }
  Tensor predict(const std::vector<Tensor>&, const Tensor& y_t,
                 const std::vector<float>&) const override {
    return Tensor::full(y_t.shape(), value_);
  }
  std::vector<Tensor> parameters() override { return {}; }

 private:
  float value_;
};

// Oracle predictor that inverts the closed-form forward draw; with y0 known
// it recovers the injected noise exactly, so the training loss is zero.
class PerfectModel : public ConditionalModel {
 public:
  explicit PerfectModel(Tensor y0) : y0_(std::move(y0)) {}
  std::vector<Tensor> encode(const Tensor&) const override { return {}; }
  Tensor predict(const std::vector<Tensor>&, const Tensor& y_t,
                 const std::vector<float>& gamma) const override {
    Tensor out = Tensor::zeros(y_t.shape());
    const int n = y_t.dim(0);
    const std::size_t plane = y_t.data().size() / static_cast<std::size_t>(n);
    for (int i = 0; i < n; ++i) {
      const double g = gamma[static_cast<std::size_t>(i)];
      const float a = static_cast<float>(std::sqrt(g));
      const float b = static_cast<float>(std::sqrt(1.0 - g));
      for (std::size_t j = 0; j < plane; ++j) {
        const std::size_t idx = static_cast<std::size_t>(i) * plane + j;
        out.mutable_data()[idx] = (y_t.data()[idx] - a * y0_.data()[idx]) / b;
      }
    }
    return out;
  }
  std::vector<Tensor> parameters() override { return {}; }

 private:
  Tensor y0_;
};

class NonFiniteModel : public ConditionalModel {
 public:
  std::vector<Tensor> encode(const Tensor&) const override { return {}; }
  Tensor predict(const std::vector<Tensor>&, const Tensor& y_t,
                 const std::vector<float>&) const override {
    return Tensor::full(y_t.shape(), std::numeric_limits<float>::infinity());
  }
  std::vector<Tensor> parameters() override { return {}; }
};

}  // namespace

TEST_CASE("forward_sample: zero noise scales by sqrt(gamma)") {
  NoiseSchedule s = build_schedule(50, 0.05, 0.001);
  Rng rng(1);
  Tensor y0 = testutil::rand_tensor({1, 1, 4, 4}, rng);
  Tensor eps = Tensor::zeros({1, 1, 4, 4});
  const int t = 20;
  Tensor y = forward_sample(y0, t, eps, s);
  const float a = static_cast<float>(std::sqrt(s.gamma_at(t)));
  for (std::size_t i = 0; i < y.data().size(); ++i) {
    CHECK(y.data()[i] == doctest::Approx(a * y0.data()[i]));
  }
}

TEST_CASE("forward_sample: near-one gamma keeps y0") {
  NoiseSchedule s = build_schedule(10, 1e-7, 1e-7);
  Rng rng(2);
  Tensor y0 = testutil::rand_tensor({1, 1, 3, 3}, rng);
  Tensor eps = randn_tensor({1, 1, 3, 3}, rng);
  Tensor y = forward_sample(y0, 10, eps, s);
  for (std::size_t i = 0; i < y.data().size(); ++i) {
    CHECK(std::abs(y.data()[i] - y0.data()[i]) < 2e-3f);
  }
}

TEST_CASE("forward: iterated noise-free steps equal the closed form") {
  NoiseSchedule s = build_schedule(40, 0.03, 0.002);
  Rng rng(3);
  Tensor y0 = testutil::rand_tensor({2, 1, 4, 4}, rng);
  Tensor zero = Tensor::zeros({2, 1, 4, 4});
  Tensor y = y0;
  for (int t = 1; t <= 25; ++t) {
    y = forward_step(y, t, zero, s);
  }
  Tensor closed = forward_sample(y0, 25, zero, s);
  for (std::size_t i = 0; i < y.data().size(); ++i) {
    CHECK(std::abs(y.data()[i] - closed.data()[i]) < 1e-6f);
  }
}

TEST_CASE("forward_step: scalar value and alpha->1 limit") {
  NoiseSchedule s = build_schedule(1, 0.01, 0.01);
  Tensor y_prev = Tensor::full({1, 1, 1, 1}, 1.0f);
  Tensor zero = Tensor::zeros({1, 1, 1, 1});
  Tensor y = forward_step(y_prev, 1, zero, s);
  CHECK(y.data()[0] == doctest::Approx(0.994987f).epsilon(1e-5));

  NoiseSchedule tiny = build_schedule(1, 1e-7, 1e-7);
  Tensor y2 = forward_step(y_prev, 1, zero, tiny);
  CHECK(y2.data()[0] == doctest::Approx(1.0f).epsilon(1e-6));
}

TEST_CASE("forward_step: Monte-Carlo moments match the closed-form marginal") {
  const int t = 10;
  NoiseSchedule s = build_schedule(10, 0.05, 0.01);
  Rng rng(12345);
  const int draws = 10000;
  double sum = 0.0, sum_sq = 0.0;
  Tensor eps = Tensor::zeros({1});
  for (int d = 0; d < draws; ++d) {
    Tensor y = Tensor::full({1}, 1.0f);
    for (int step = 1; step <= t; ++step) {
      eps.mutable_data()[0] = static_cast<float>(rng.normal());
      y = forward_step(y, step, eps, s);
    }
    sum += y.data()[0];
    sum_sq += static_cast<double>(y.data()[0]) * y.data()[0];
  }
  const double mean = sum / draws;
  const double var = sum_sq / draws - mean * mean;
  const double expect_mean = std::sqrt(s.gamma_at(t));
  const double expect_var = 1.0 - s.gamma_at(t);
  const double stderr_mean = std::sqrt(expect_var / draws);
  CHECK(std::abs(mean - expect_mean) < 3.0 * stderr_mean);
  CHECK(std::abs(var - expect_var) / expect_var < 0.10);
}

TEST_CASE("posterior_mean: zero predicted noise rescales y_t") {
  NoiseSchedule s = build_schedule(30, 0.02, 0.001);
  Rng rng(4);
  Tensor y_t = testutil::rand_tensor({1, 1, 4, 4}, rng);
  Tensor zero = Tensor::zeros({1, 1, 4, 4});
  Tensor m = posterior_mean(y_t, zero, 7, s);
  const float inv = static_cast<float>(1.0 / std::sqrt(s.alpha_at(7)));
  for (std::size_t i = 0; i < m.data().size(); ++i) {
    CHECK(m.data()[i] == doctest::Approx(inv * y_t.data()[i]));
  }
}

TEST_CASE("posterior_mean: scalar spot value") {
  // alpha = 0.99 and gamma = 0.9: (1 - 0.01/sqrt(0.1))/sqrt(0.99)
  NoiseSchedule s;
  s.T = 1;
  s.beta = {0.01};
  s.alpha = {0.99};
  s.gamma = {0.9};
  s.sigma = {0.1};
  Tensor y_t = Tensor::full({1}, 1.0f);
  Tensor eps_hat = Tensor::full({1}, 1.0f);
  Tensor m = posterior_mean(y_t, eps_hat, 1, s);
  CHECK(m.data()[0] == doctest::Approx(0.97325f).epsilon(1e-4));
}

TEST_CASE("reverse_step: zero z equals the posterior mean, sigma scales z") {
  NoiseSchedule s = build_schedule(20, 0.01, 0.001);
  Rng rng(5);
  Tensor y_t = testutil::rand_tensor({1, 1, 3, 3}, rng);
  Tensor eps_hat = testutil::rand_tensor({1, 1, 3, 3}, rng);
  Tensor zero = Tensor::zeros({1, 1, 3, 3});
  Tensor a = reverse_step(y_t, eps_hat, zero, 9, s);
  Tensor b = posterior_mean(y_t, eps_hat, 9, s);
  CHECK(std::memcmp(a.data().data(), b.data().data(), a.data().size() * sizeof(float)) == 0);

  NoiseSchedule one = build_schedule(1, 0.01, 0.01);
  Tensor z = Tensor::full({1, 1, 1, 1}, 1.0f);
  Tensor out = reverse_step(Tensor::zeros({1, 1, 1, 1}), Tensor::zeros({1, 1, 1, 1}), z, 1, one);
  CHECK(out.data()[0] == doctest::Approx(0.1f));
}

TEST_CASE("reverse_step: t=1 reconstructs y0 from a perfect prediction") {
  NoiseSchedule s = build_schedule(100, 0.05, 0.001);
  Rng rng(6);
  Tensor y0 = testutil::rand_tensor({1, 1, 4, 4}, rng);
  Tensor eps = randn_tensor({1, 1, 4, 4}, rng);
  Tensor y1 = forward_sample(y0, 1, eps, s);
  Tensor back = reverse_step(y1, eps, Tensor::zeros({1, 1, 4, 4}), 1, s);
  for (std::size_t i = 0; i < back.data().size(); ++i) {
    CHECK(std::abs(back.data()[i] - y0.data()[i]) < 1e-5f);
  }
}

TEST_CASE("sample: single-step chain with a zero predictor") {
  NoiseSchedule s = build_schedule(1, 0.02, 0.02);
  ConstantModel model(0.0f);
  Tensor x = Tensor::zeros({1, 6, 16, 16});
  Rng rng(77);
  Tensor y = diffusion::sample(x, model, s, rng);
  // Replicate the chain's single draw: y_T then one noise-free reverse step.
  Rng replay(77);
  Tensor y_T = Tensor::zeros({1, 1, 16, 16});
  replay.fill_normal(y_T.mutable_data());
  const float inv = static_cast<float>(1.0 / std::sqrt(s.alpha_at(1)));
  for (std::size_t i = 0; i < y.data().size(); ++i) {
    CHECK(y.data()[i] == doctest::Approx(inv * y_T.data()[i]));
  }
}

TEST_CASE("sample: deterministic given the seed") {
  NoiseSchedule s = build_schedule(8, 0.05, 0.01);
  ConstantModel model(0.1f);
  Tensor x = Tensor::zeros({2, 6, 16, 16});
  Rng rng_a(99), rng_b(99);
  Tensor a = diffusion::sample(x, model, s, rng_a);
  Tensor b = diffusion::sample(x, model, s, rng_b);
  CHECK(std::memcmp(a.data().data(), b.data().data(), a.data().size() * sizeof(float)) == 0);
}

TEST_CASE("training_step: oracle model reaches zero loss") {
  NoiseSchedule s = build_schedule(50, 0.04, 0.002);
  Rng rng(8);
  Tensor x = Tensor::zeros({2, 6, 16, 16});
  Tensor y0 = testutil::rand_tensor({2, 1, 16, 16}, rng);
  PerfectModel model(y0);
  Adam opt(std::vector<Tensor>{});
  Rng step_rng(9);
  const float loss = training_step(x, y0, model, s, opt, step_rng);
  CHECK(loss < 1e-5f);
}

TEST_CASE("training_step: zero model loss approximates E|N(0,1)|") {
  NoiseSchedule s = build_schedule(50, 0.04, 0.002);
  ConstantModel model(0.0f);
  Tensor x = Tensor::zeros({4, 6, 16, 16});
  Tensor y0 = Tensor::zeros({4, 1, 16, 16});
  Adam opt(std::vector<Tensor>{});
  Rng rng(10);
  double total = 0.0;
  const int reps = 20;
  for (int i = 0; i < reps; ++i) {
    total += training_step(x, y0, model, s, opt, rng);
  }
  const double expect = std::sqrt(2.0 / std::numbers::pi);
  CHECK(std::abs(total / reps - expect) < 0.02);
}

TEST_CASE("training_step: inputs and schedule are not mutated") {
  NoiseSchedule s = build_schedule(20, 0.05, 0.01);
  const std::vector<double> gamma_before = s.gamma;
  Rng rng(11);
  Tensor x = testutil::rand_tensor({2, 6, 16, 16}, rng);
  Tensor y0 = testutil::rand_tensor({2, 1, 16, 16}, rng);
  std::vector<float> x_before(x.data().begin(), x.data().end());
  std::vector<float> y_before(y0.data().begin(), y0.data().end());
  ConstantModel model(0.0f);
  Adam opt(std::vector<Tensor>{});
  Rng step_rng(12);
  training_step(x, y0, model, s, opt, step_rng);
  CHECK(std::memcmp(x.data().data(), x_before.data(), x_before.size() * sizeof(float)) == 0);
  CHECK(std::memcmp(y0.data().data(), y_before.data(), y_before.size() * sizeof(float)) == 0);
  CHECK(s.gamma == gamma_before);
}

TEST_CASE("training_step: non-finite loss aborts with a diagnostic") {
  NoiseSchedule s = build_schedule(5, 0.05, 0.01);
  NonFiniteModel model;
  Tensor x = Tensor::zeros({1, 6, 16, 16});
  Tensor y0 = Tensor::zeros({1, 1, 16, 16});
  Adam opt(std::vector<Tensor>{});
  Rng rng(13);
  CHECK_THROWS_AS(training_step(x, y0, model, s, opt, rng), DivergenceError);
}

TEST_CASE("training_step: loss decreases on a tiny model in both schedule directions") {
  for (auto [start, end] : {std::pair{0.08, 0.002}, std::pair{0.002, 0.08}}) {
    NoiseSchedule s = build_schedule(20, start, end);
    nets::NetConfig cfg;
    cfg.widths = {8, 8, 8, 8, 8, 8};
    cfg.temb_dim = 16;
    nets::DiffusionModel model(cfg, 321);
    Adam opt(model.parameters(), AdamConfig{.lr = 2e-3f});
    Rng data_rng(14);
    Tensor x = testutil::rand_tensor({4, 6, 16, 16}, data_rng, 0.0f, 1.0f);
    Tensor y0 = testutil::rand_tensor({4, 1, 16, 16}, data_rng);
    Rng rng(15);
    double first = 0.0, last = 0.0;
    const int steps = 120;
    for (int i = 0; i < steps; ++i) {
      const float loss = training_step(x, y0, model, s, opt, rng);
      if (i < 10) first += loss;
      if (i >= steps - 10) last += loss;
    }
    CHECK(last < 0.7 * first);
  }
}
