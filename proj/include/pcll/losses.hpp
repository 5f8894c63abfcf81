#pragma once

// Training objectives. Every loss is a quantity to minimize; token NLLs are
// per-token means within their span.
//
// Row convention: in a sequence placed at row offset o, the token at index j
// (j >= 1) is predicted by logits row o + j - 1.

#include <vector>

#include "pcll/ops.hpp"
#include "pcll/prompt.hpp"
#include "pcll/tensor.hpp"

namespace pcll {

struct LossConfig {
  float lambda = 0.25f;  // weight of the output-given-prompt term
  float alpha = 0.5f;    // distillation mix on pseudo samples
  int beta_cycles_per_epoch = 4;
  float beta_ramp_fraction = 0.5f;

  void validate() const;
};

struct BetaSchedule {
  int steps_per_epoch = 1;
  int cycles = 4;
  float ramp_fraction = 0.5f;
};

// Cyclic annealing: each cycle of steps_per_epoch/cycles steps ramps beta
// linearly from 0 to 1 over its first ramp_fraction, then holds 1.
float beta_at(double step, const BetaSchedule& schedule);

// The reconstruction input [BOS] prefix x plus the first postfix token.
RenderedPrompt decoder_input(const RenderedPrompt& full);

// ---- target builders for packed batches

// Full-sequence mean NLL (weight) plus output-span mean NLL (weight * lambda).
// The output span includes the closing [EOS].
void append_lm_targets(std::vector<ops::TokenTarget>& out, const RenderedPrompt& seq, int row_offset,
                       float lambda, float weight);
// Mean NLL of the x tokens and the postfix token that closes x.
void append_rec_targets(std::vector<ops::TokenTarget>& out, const RenderedPrompt& seq, int row_offset, float weight);
// Distillation counterparts; teacher distributions sit at teacher_offset in the target matrix.
void append_lm_kd_targets(std::vector<ops::SoftTarget>& out, const RenderedPrompt& seq, int row_offset,
                          int teacher_offset, float weight);
void append_rec_kd_targets(std::vector<ops::SoftTarget>& out, const RenderedPrompt& seq, int row_offset,
                           int teacher_offset, float weight);

// ---- single-sequence objectives (logits rows start at 0)

// NLL_full + lambda * NLL_y
Tensor lm_loss(const Tensor& logits, const RenderedPrompt& seq, float lambda);
// Mean NLL of x and its closing postfix token.
Tensor reconstruction_nll(const Tensor& logits, const RenderedPrompt& seq);
// NLL_x + beta * kl
Tensor cvae_elbo_loss(const Tensor& recon_nll, const Tensor& kl, float beta);
// Cross-entropy against the teacher's softmax over the full sequence plus the output span.
Tensor kd_lm_loss(const Tensor& student_logits, const Tensor& teacher_logits, const RenderedPrompt& seq);
// Cross-entropy against the teacher's softmax over x and its closing postfix token.
Tensor kd_rec_loss(const Tensor& student_logits, const Tensor& teacher_logits, const RenderedPrompt& seq);
// alpha * kd + (1 - alpha) * plain
Tensor replay_loss(const Tensor& plain, const Tensor& kd, float alpha);

}  // namespace pcll
