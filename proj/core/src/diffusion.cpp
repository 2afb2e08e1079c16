#include "dosediff/diffusion.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "dosediff/ops.hpp"

namespace dosediff::diffusion {

namespace {

void check_congruent(const Tensor& a, const Tensor& b, const char* op) {
  DD_CHECK(a.shape() == b.shape(), std::string(op) + ": shape mismatch " +
                                       shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

// out = ca * a + cb * b, elementwise (data path, no gradient recording).
Tensor axpby(float ca, const Tensor& a, float cb, const Tensor& b) {
  Tensor out = Tensor::zeros(a.shape());
  const float* pa = a.data().data();
  const float* pb = b.data().data();
  float* po = out.mutable_data().data();
  const std::size_t n = a.data().size();
  for (std::size_t i = 0; i < n; ++i) po[i] = ca * pa[i] + cb * pb[i];
  return out;
}

}  // namespace

Tensor forward_sample(const Tensor& y0, int t, const Tensor& eps, const NoiseSchedule& sched) {
  check_congruent(y0, eps, "forward_sample");
  const double gamma = sched.gamma_at(t);
  return axpby(static_cast<float>(std::sqrt(gamma)), y0,
               static_cast<float>(std::sqrt(1.0 - gamma)), eps);
}

Tensor forward_step(const Tensor& y_prev, int t, const Tensor& eps, const NoiseSchedule& sched) {
  check_congruent(y_prev, eps, "forward_step");
  const double alpha = sched.alpha_at(t);
  return axpby(static_cast<float>(std::sqrt(alpha)), y_prev,
               static_cast<float>(std::sqrt(1.0 - alpha)), eps);
}

Tensor posterior_mean(const Tensor& y_t, const Tensor& eps_hat, int t,
                      const NoiseSchedule& sched) {
  check_congruent(y_t, eps_hat, "posterior_mean");
  const double alpha = sched.alpha_at(t);
  const double gamma = sched.gamma_at(t);
  const double inv_sqrt_alpha = 1.0 / std::sqrt(alpha);
  const double eps_coef = (1.0 - alpha) / std::sqrt(1.0 - gamma);
  return axpby(static_cast<float>(inv_sqrt_alpha), y_t,
               static_cast<float>(-inv_sqrt_alpha * eps_coef), eps_hat);
}

Tensor reverse_step(const Tensor& y_t, const Tensor& eps_hat, const Tensor& z, int t,
                    const NoiseSchedule& sched) {
  check_congruent(y_t, z, "reverse_step");
  Tensor mean = posterior_mean(y_t, eps_hat, t, sched);
  const double sigma = sched.sigma_at(t);
  return axpby(1.0f, mean, static_cast<float>(sigma), z);
}

Tensor sample(const Tensor& x, const ConditionalModel& model, const NoiseSchedule& sched,
              Rng& rng) {
  DD_CHECK(x.rank() == 4, "sample: x must be [N,C,H,W]");
  const int n = x.dim(0), h = x.dim(2), w = x.dim(3);

  std::vector<Tensor> features = model.encode(x);

  Tensor y = Tensor::zeros({n, 1, h, w});
  rng.fill_normal(y.mutable_data());

  Tensor zero = Tensor::zeros({n, 1, h, w});
  for (int t = sched.T; t >= 1; --t) {
    const std::vector<float> gamma(static_cast<std::size_t>(n),
                                   static_cast<float>(sched.gamma_at(t)));
    Tensor eps_hat = model.predict(features, y, gamma);
    if (t > 1) {
      Tensor z = Tensor::zeros({n, 1, h, w});
      rng.fill_normal(z.mutable_data());
      y = reverse_step(y, eps_hat, z, t, sched);
    } else {
      y = reverse_step(y, eps_hat, zero, t, sched);
    }
  }
  return y;
}

float training_step(const Tensor& x, const Tensor& y0, ConditionalModel& model,
                    const NoiseSchedule& sched, Adam& opt, Rng& rng) {
  DD_CHECK(x.rank() == 4 && y0.rank() == 4, "training_step: batched rank-4 inputs required");
  DD_CHECK(x.dim(0) == y0.dim(0), "training_step: batch size mismatch");
  DD_CHECK(x.dim(2) == y0.dim(2) && x.dim(3) == y0.dim(3),
           "training_step: spatial size mismatch");
  const int n = x.dim(0);
  const std::size_t plane = y0.data().size() / static_cast<std::size_t>(n);

  // Per-element step draw keeps the gradient variance lower than one shared t.
  Tensor eps = Tensor::zeros(y0.shape());
  rng.fill_normal(eps.mutable_data());
  Tensor y_t = Tensor::zeros(y0.shape());
  std::vector<float> gamma(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    const int t = rng.uniform_int(1, sched.T);
    const double g = sched.gamma_at(t);
    gamma[static_cast<std::size_t>(i)] = static_cast<float>(g);
    const float a = static_cast<float>(std::sqrt(g));
    const float b = static_cast<float>(std::sqrt(1.0 - g));
    const float* py = y0.data().data() + static_cast<std::size_t>(i) * plane;
    const float* pe = eps.data().data() + static_cast<std::size_t>(i) * plane;
    float* po = y_t.mutable_data().data() + static_cast<std::size_t>(i) * plane;
    for (std::size_t j = 0; j < plane; ++j) po[j] = a * py[j] + b * pe[j];
  }

  GradientTape tape;
  std::vector<Tensor> features = model.encode(x);
  Tensor eps_hat = model.predict(features, y_t, gamma);
  Tensor loss = mean_abs_error(eps_hat, eps);
  const float loss_value = loss.item();
  if (!std::isfinite(loss_value)) {
    throw DivergenceError("training_step: non-finite loss (" + std::to_string(loss_value) +
                          ") — training diverged");
  }
  tape.backward(loss);
  opt.step();
  return loss_value;
}

Tensor DoseNormalizer::to_model(const Tensor& dose) const {
  Tensor out = Tensor::zeros(dose.shape());
  const float inv = 2.0f / dose_scale;
  const float* pd = dose.data().data();
  float* po = out.mutable_data().data();
  const std::size_t n = dose.data().size();
  for (std::size_t i = 0; i < n; ++i) po[i] = pd[i] * inv - 1.0f;
  return out;
}

Tensor DoseNormalizer::to_dose(const Tensor& model_out) const {
  Tensor out = Tensor::zeros(model_out.shape());
  const float half = dose_scale * 0.5f;
  const float* pm = model_out.data().data();
  float* po = out.mutable_data().data();
  const std::size_t n = model_out.data().size();
  for (std::size_t i = 0; i < n; ++i) {
    po[i] = std::clamp((pm[i] + 1.0f) * half, 0.0f, dose_scale);
  }
  return out;
}

}  // namespace dosediff::diffusion
