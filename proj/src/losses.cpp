#include "pcll/losses.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace pcll {

void LossConfig::validate() const {
  if (!(lambda >= 0.0f)) throw std::invalid_argument("loss.lambda: must be >= 0");
  if (!(alpha >= 0.0f && alpha <= 1.0f)) throw std::invalid_argument("loss.alpha: must be in [0, 1]");
  if (beta_cycles_per_epoch < 1) throw std::invalid_argument("loss.beta_cycles_per_epoch: must be >= 1");
  if (!(beta_ramp_fraction > 0.0f && beta_ramp_fraction <= 1.0f))
    throw std::invalid_argument("loss.beta_ramp_fraction: must be in (0, 1]");
}

float beta_at(double step, const BetaSchedule& schedule) {
  if (step < 0) throw std::invalid_argument("beta_at: negative step");
  const double cycle = static_cast<double>(std::max(1, schedule.steps_per_epoch)) / std::max(1, schedule.cycles);
  const double pos = std::fmod(step, cycle);
  const double ramp = schedule.ramp_fraction * cycle;
  return static_cast<float>(std::min(1.0, pos / ramp));
}

RenderedPrompt decoder_input(const RenderedPrompt& full) {
  RenderedPrompt d = full;
  // keep the postfix's first token: it is the stop marker of input decoding
  const int end = std::min(full.x.end + 1, full.postfix.end);
  d.ids.resize(static_cast<std::size_t>(end));
  d.postfix = {full.x.end, end};
  d.y = {full.x.end, full.x.end};
  d.has_output = false;
  return d;
}

namespace {

void require_output(const RenderedPrompt& seq, const char* op) {
  if (!seq.has_output || seq.y.empty()) throw std::invalid_argument(std::string(op) + ": empty y span");
}

void require_x(const RenderedPrompt& seq, const char* op) {
  if (seq.x.empty()) throw std::invalid_argument(std::string(op) + ": empty x span");
}

// x plus the postfix's first token when present.
int rec_end(const RenderedPrompt& seq) { return seq.postfix.empty() ? seq.x.end : seq.x.end + 1; }

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) throw ShapeError(op, a.shape(), b.shape());
}

}  // namespace

void append_lm_targets(std::vector<ops::TokenTarget>& out, const RenderedPrompt& seq, int row_offset, float lambda,
                       float weight) {
  require_output(seq, "lm_loss");
  const int n = seq.length();
  const float w_full = weight / static_cast<float>(n - 1);
  for (int j = 1; j < n; ++j) out.push_back({row_offset + j - 1, seq.ids[static_cast<std::size_t>(j)], w_full});
  if (lambda == 0.0f) return;
  const float w_y = weight * lambda / static_cast<float>(seq.y.size() + 1);
  for (int j = seq.y.begin; j <= seq.y.end; ++j)
    out.push_back({row_offset + j - 1, seq.ids[static_cast<std::size_t>(j)], w_y});
}

void append_rec_targets(std::vector<ops::TokenTarget>& out, const RenderedPrompt& seq, int row_offset, float weight) {
  require_x(seq, "reconstruction_nll");
  const int end = rec_end(seq);
  const float w = weight / static_cast<float>(end - seq.x.begin);
  for (int j = seq.x.begin; j < end; ++j)
    out.push_back({row_offset + j - 1, seq.ids[static_cast<std::size_t>(j)], w});
}

void append_lm_kd_targets(std::vector<ops::SoftTarget>& out, const RenderedPrompt& seq, int row_offset,
                          int teacher_offset, float weight) {
  require_output(seq, "kd_lm_loss");
  const int n = seq.length();
  const float w_full = weight / static_cast<float>(n - 1);
  for (int j = 1; j < n; ++j) out.push_back({row_offset + j - 1, teacher_offset + j - 1, w_full});
  const float w_y = weight / static_cast<float>(seq.y.size() + 1);
  for (int j = seq.y.begin; j <= seq.y.end; ++j) out.push_back({row_offset + j - 1, teacher_offset + j - 1, w_y});
}

void append_rec_kd_targets(std::vector<ops::SoftTarget>& out, const RenderedPrompt& seq, int row_offset,
                           int teacher_offset, float weight) {
  require_x(seq, "kd_rec_loss");
  const int end = rec_end(seq);
  const float w = weight / static_cast<float>(end - seq.x.begin);
  for (int j = seq.x.begin; j < end; ++j) out.push_back({row_offset + j - 1, teacher_offset + j - 1, w});
}

Tensor lm_loss(const Tensor& logits, const RenderedPrompt& seq, float lambda) {
  std::vector<ops::TokenTarget> t;
  append_lm_targets(t, seq, 0, lambda, 1.0f);
  return ops::weighted_nll(logits, t);
}

Tensor reconstruction_nll(const Tensor& logits, const RenderedPrompt& seq) {
  std::vector<ops::TokenTarget> t;
  append_rec_targets(t, seq, 0, 1.0f);
  return ops::weighted_nll(logits, t);
}

Tensor cvae_elbo_loss(const Tensor& recon_nll, const Tensor& kl, float beta) {
  return ops::add(recon_nll, ops::scale(kl, beta));
}

namespace {

Tensor teacher_probs(const Tensor& teacher_logits) {
  NoGradGuard guard;
  return ops::softmax(teacher_logits.detach());
}

}  // namespace

Tensor kd_lm_loss(const Tensor& student_logits, const Tensor& teacher_logits, const RenderedPrompt& seq) {
  require_same_shape(student_logits, teacher_logits, "kd_lm_loss");
  std::vector<ops::SoftTarget> t;
  append_lm_kd_targets(t, seq, 0, 0, 1.0f);
  return ops::weighted_soft_ce(student_logits, t, teacher_probs(teacher_logits));
}

Tensor kd_rec_loss(const Tensor& student_logits, const Tensor& teacher_logits, const RenderedPrompt& seq) {
  require_same_shape(student_logits, teacher_logits, "kd_rec_loss");
  std::vector<ops::SoftTarget> t;
  append_rec_kd_targets(t, seq, 0, 0, 1.0f);
  return ops::weighted_soft_ce(student_logits, t, teacher_probs(teacher_logits));
}

Tensor replay_loss(const Tensor& plain, const Tensor& kd, float alpha) {
  if (!(alpha >= 0.0f && alpha <= 1.0f)) throw std::invalid_argument("replay_loss: alpha must be in [0, 1]");
  return ops::add(ops::scale(kd, alpha), ops::scale(plain, 1.0f - alpha));
}

}  // namespace pcll
