#pragma once

#include <vector>

#include "pcll/tensor.hpp"

namespace pcll {

struct AdamConfig {
  float lr = 1e-3f;
  float beta1 = 0.9f;
  float beta2 = 0.98f;
  float eps = 1e-8f;
};

// Adam with bias correction. Moment buffers are created lazily, one per
// parameter, in the order the parameters are passed.
class Adam {
 public:
  explicit Adam(AdamConfig config = {}) : config_(config) {}

  // Applies one update to every parameter that has a gradient. Gradients
  // are left untouched; callers zero them afterwards.
  void step(std::vector<Tensor>& params);

  long steps() const { return step_; }
  const AdamConfig& config() const { return config_; }
  void set_lr(float lr) { config_.lr = lr; }

 private:
  AdamConfig config_;
  long step_ = 0;
  std::vector<std::vector<float>> m_;
  std::vector<std::vector<float>> v_;
};

// Rescales gradients so their global L2 norm is at most max_norm. Returns the
// norm before clipping.
float clip_grad_norm(std::vector<Tensor>& params, float max_norm);

void zero_grads(std::vector<Tensor>& params);

}  // namespace pcll
