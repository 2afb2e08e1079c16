#include "dosediff/adam.hpp"

#include <cmath>

namespace dosediff {

Adam::Adam(std::vector<Tensor> params, AdamConfig config)
    : params_(std::move(params)), config_(config) {
  moments_.resize(params_.size());
  for (std::size_t i = 0; i < params_.size(); ++i) {
    DD_CHECK(params_[i].defined(), "Adam: undefined parameter tensor");
    const std::size_t n = static_cast<std::size_t>(params_[i].numel());
    moments_[i].m.assign(n, 0.0f);
    moments_[i].v.assign(n, 0.0f);
  }
}

void Adam::step() {
  for (const Tensor& p : params_) {
    DD_CHECK(p.grad_defined(), "Adam: parameter is missing its gradient");
  }
  ++step_;
  const float b1 = config_.beta1;
  const float b2 = config_.beta2;
  const float corr1 = 1.0f - std::pow(b1, static_cast<float>(step_));
  const float corr2 = 1.0f - std::pow(b2, static_cast<float>(step_));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    float* w = params_[i].mutable_data().data();
    const float* g = params_[i].grad().data();
    float* m = moments_[i].m.data();
    float* v = moments_[i].v.data();
    const std::size_t n = static_cast<std::size_t>(params_[i].numel());
    for (std::size_t j = 0; j < n; ++j) {
      m[j] = b1 * m[j] + (1.0f - b1) * g[j];
      v[j] = b2 * v[j] + (1.0f - b2) * g[j] * g[j];
      const float m_hat = m[j] / corr1;
      const float v_hat = v[j] / corr2;
      w[j] -= config_.lr * m_hat / (std::sqrt(v_hat) + config_.eps);
    }
  }
}

void Adam::zero_grad() {
  for (Tensor& p : params_) p.zero_grad();
}

}  // namespace dosediff
