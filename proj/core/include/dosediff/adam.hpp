#pragma once

#include <cstdint>
#include <vector>

#include "dosediff/tensor.hpp"

namespace dosediff {

struct AdamConfig {
  float lr = 1e-3f;
  float beta1 = 0.9f;
  float beta2 = 0.999f;
  float eps = 1e-8f;
};

// Adam with bias correction. Holds first/second moment buffers per parameter
// and a shared step counter; step() consumes the gradients currently stored
// on the parameters and leaves them untouched for the caller to clear.
class Adam {
 public:
  Adam(std::vector<Tensor> params, AdamConfig config = {});

  void step();
  void zero_grad();
  void set_lr(float lr) { config_.lr = lr; }

  std::int64_t step_count() const { return step_; }
  const AdamConfig& config() const { return config_; }
  const std::vector<Tensor>& params() const { return params_; }

 private:
  struct Moments {
    std::vector<float> m, v;
  };
  std::vector<Tensor> params_;
  std::vector<Moments> moments_;
  AdamConfig config_;
  std::int64_t step_ = 0;
};

}  // namespace dosediff
