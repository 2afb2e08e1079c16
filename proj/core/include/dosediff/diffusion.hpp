#pragma once

#include <vector>

#include "dosediff/adam.hpp"
#include "dosediff/rng.hpp"
#include "dosediff/schedule.hpp"
#include "dosediff/tensor.hpp"

namespace dosediff::diffusion {

// Closed-form marginal draw: y_t = sqrt(gamma_t) y0 + sqrt(1 - gamma_t) eps.
Tensor forward_sample(const Tensor& y0, int t, const Tensor& eps, const NoiseSchedule& sched);

// Single Markov transition: y_t = sqrt(alpha_t) y_{t-1} + sqrt(1 - alpha_t) eps.
Tensor forward_step(const Tensor& y_prev, int t, const Tensor& eps, const NoiseSchedule& sched);

// Denoised posterior mean:
//   (1/sqrt(alpha_t)) (y_t - ((1 - alpha_t)/sqrt(1 - gamma_t)) eps_hat).
Tensor posterior_mean(const Tensor& y_t, const Tensor& eps_hat, int t,
                      const NoiseSchedule& sched);

// One reverse transition: posterior_mean + sigma_t z. The final step (t = 1)
// must be called with z = 0 so the chain returns a clean estimate.
Tensor reverse_step(const Tensor& y_t, const Tensor& eps_hat, const Tensor& z, int t,
                    const NoiseSchedule& sched);

// Model interface the chain drives; lets tests plug in oracle predictors.
// gamma carries one noise-intensity value per batch element.
class ConditionalModel {
 public:
  virtual ~ConditionalModel() = default;
  virtual std::vector<Tensor> encode(const Tensor& x) const = 0;
  virtual Tensor predict(const std::vector<Tensor>& features, const Tensor& y_t,
                         const std::vector<float>& gamma) const = 0;
  virtual std::vector<Tensor> parameters() = 0;
};

// Full reverse chain: y_T ~ N(0, I), then T denoising transitions conditioned
// on the structure features of x. Pure function of (x, parameters, schedule,
// rng seed); the rng draws y_T first, then one z per step down to t = 2.
Tensor sample(const Tensor& x, const ConditionalModel& model, const NoiseSchedule& sched,
              Rng& rng);

// One optimization step of the noise-prediction objective: per batch element
// draw t ~ Uniform{1..T} and eps ~ N(0, I), form y_t, and take an Adam step
// on mean |model(features, y_t, gamma_t) - eps|. Returns the loss value.
// x and y0 are inputs in model space (dose maps already normalized).
float training_step(const Tensor& x, const Tensor& y0, ConditionalModel& model,
                    const NoiseSchedule& sched, Adam& opt, Rng& rng);

// Affine map between dose units [0, dose_scale] and the model range [-1, 1].
// to_dose clamps back into the valid dose range; intermediate chain states
// are never clamped.
struct DoseNormalizer {
  float dose_scale = 2.0f;
  Tensor to_model(const Tensor& dose) const;
  Tensor to_dose(const Tensor& model_out) const;
};

}  // namespace dosediff::diffusion
