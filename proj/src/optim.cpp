#include "pcll/optim.hpp"

#include <cmath>

namespace pcll {

void Adam::step(std::vector<Tensor>& params) {
  if (m_.empty()) {
    m_.resize(params.size());
    v_.resize(params.size());
    for (std::size_t i = 0; i < params.size(); ++i) {
      m_[i].assign(params[i].numel(), 0.0f);
      v_[i].assign(params[i].numel(), 0.0f);
    }
  }
  if (m_.size() != params.size()) throw std::invalid_argument("Adam: parameter list changed between steps");
  ++step_;
  const double bc1 = 1.0 - std::pow(static_cast<double>(config_.beta1), static_cast<double>(step_));
  const double bc2 = 1.0 - std::pow(static_cast<double>(config_.beta2), static_cast<double>(step_));
  const float lr_t = static_cast<float>(config_.lr / bc1);
  const float inv_bc2 = static_cast<float>(1.0 / bc2);
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto g = params[i].grad();
    if (g.empty()) continue;
    auto p = params[i].data();
    auto& m = m_[i];
    auto& v = v_[i];
    for (std::size_t j = 0; j < p.size(); ++j) {
      m[j] = config_.beta1 * m[j] + (1.0f - config_.beta1) * g[j];
      v[j] = config_.beta2 * v[j] + (1.0f - config_.beta2) * g[j] * g[j];
      p[j] -= lr_t * m[j] / (std::sqrt(v[j] * inv_bc2) + config_.eps);
    }
  }
}

float clip_grad_norm(std::vector<Tensor>& params, float max_norm) {
  double sq = 0.0;
  for (auto& p : params)
    for (float g : p.grad()) sq += static_cast<double>(g) * g;
  const float norm = static_cast<float>(std::sqrt(sq));
  if (norm > max_norm && norm > 0.0f) {
    const float s = max_norm / norm;
    for (auto& p : params)
      for (float& g : p.grad()) g *= s;
  }
  return norm;
}

void zero_grads(std::vector<Tensor>& params) {
  for (auto& p : params) p.zero_grad();
}

}  // namespace pcll
