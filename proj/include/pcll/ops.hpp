#pragma once

// Differentiable operations on pcll::Tensor.
//
// Tensors are treated as row-major [rows, cols] matrices where cols is the
// last dimension. Binary elementwise ops accept either identical shapes or a
// single-row right operand broadcast over every row of the left one.

#include <span>
#include <vector>

#include "pcll/tensor.hpp"

namespace pcll::ops {

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, float factor);
Tensor add_scalar(const Tensor& a, float value);

Tensor exp(const Tensor& a);
Tensor tanh(const Tensor& a);
Tensor gelu(const Tensor& a);
// Gradient is zero where the input lies outside [lo, hi].
Tensor clamp(const Tensor& a, float lo, float hi);

Tensor softmax(const Tensor& a);
Tensor log_softmax(const Tensor& a);
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, float eps = 1e-5f);

// out[i] = table[ids[i]]; an index of -1 yields a zero row.
Tensor gather_rows(const Tensor& table, std::span<const int> ids);
inline Tensor embedding(const Tensor& table, std::span<const int> ids) { return gather_rows(table, ids); }

Tensor concat(std::span<const Tensor> parts, int axis);
Tensor slice_rows(const Tensor& a, int begin, int end);
Tensor slice_cols(const Tensor& a, int begin, int end);

// Reductions of a 2-D tensor: axis 0 -> [1, cols], axis 1 -> [rows, 1].
Tensor sum(const Tensor& a, int axis);
Tensor mean(const Tensor& a, int axis);
Tensor sum_all(const Tensor& a);
Tensor mean_all(const Tensor& a);

// Multi-head causal self-attention over sequences packed along the rows.
// qkv is [N, 3*d]; offsets[s]..offsets[s+1] are the rows of sequence s.
Tensor causal_attention(const Tensor& qkv, std::span<const int> offsets, int n_heads);

struct TokenTarget {
  int row;
  int token;
  float weight;
};

struct SoftTarget {
  int row;          // row of the student logits
  int target_row;   // row of the target distribution
  float weight;
};

// sum_i weight_i * -log softmax(logits[row_i])[token_i]
Tensor weighted_nll(const Tensor& logits, std::span<const TokenTarget> targets);

// sum_i weight_i * -sum_v p[target_row_i][v] * log softmax(logits[row_i])[v]
// The target distribution is a constant.
Tensor weighted_soft_ce(const Tensor& logits, std::span<const SoftTarget> targets,
                        const Tensor& target_probs);

}  // namespace pcll::ops
