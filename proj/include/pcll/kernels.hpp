#pragma once

// Dense float kernels used by the autograd ops.
//
// Every kernel exists twice: a serial reference and an OpenMP version. The
// parallel versions split work over independent output rows (or independent
// sequence/head pairs) and keep the per-element summation order of the
// serial code, so both produce bit-identical results. The unqualified
// functions in pcll::kernels dispatch to the parallel path.

#include <cstddef>
#include <span>

namespace pcll::kernels {

struct AttentionShape {
  int n_heads = 1;
  int d_model = 0;  // q, k and v each have d_model columns inside qkv
};

#define PCLL_DECLARE_KERNELS                                                                 \
  /* C[m,n] (+)= A[m,k] * B[k,n] */                                                          \
  void matmul_nn(int m, int n, int k, const float* a, const float* b, float* c,             \
                 bool accumulate);                                                           \
  /* C[m,n] (+)= A[m,k] * B[n,k]^T */                                                        \
  void matmul_nt(int m, int n, int k, const float* a, const float* b, float* c,             \
                 bool accumulate);                                                           \
  /* C[m,n] (+)= A[k,m]^T * B[k,n] */                                                        \
  void matmul_tn(int m, int n, int k, const float* a, const float* b, float* c,             \
                 bool accumulate);                                                           \
  void softmax_rows(int rows, int cols, const float* x, float* y);                          \
  void log_softmax_rows(int rows, int cols, const float* x, float* y);                      \
  /* Writes normalized (pre-affine) values to xhat and 1/sigma per row to inv_std. */       \
  void layer_norm_rows(int rows, int cols, const float* x, const float* gamma,              \
                       const float* beta, float eps, float* xhat, float* inv_std, float* y); \
  /* Accumulates dx; dgamma/dbeta are accumulated serially by the caller. */                \
  void layer_norm_backward_rows(int rows, int cols, const float* dy, const float* xhat,      \
                                const float* inv_std, const float* gamma, float* dx);        \
  /* qkv is [N, 3*d]; offsets has n_seq+1 entries; probs holds per (seq, head) the */       \
  /* lower-triangular softmax rows, laid out by attention_probs_size().            */       \
  void causal_attention(std::span<const int> offsets, AttentionShape shape,                 \
                        const float* qkv, float* probs, float* out);                        \
  void causal_attention_backward(std::span<const int> offsets, AttentionShape shape,        \
                                 const float* qkv, const float* probs, const float* dout,   \
                                 float* dqkv);

namespace serial {
PCLL_DECLARE_KERNELS
}  // namespace serial

namespace parallel {
PCLL_DECLARE_KERNELS
}  // namespace parallel

#undef PCLL_DECLARE_KERNELS

using parallel::causal_attention;
using parallel::causal_attention_backward;
using parallel::layer_norm_backward_rows;
using parallel::layer_norm_rows;
using parallel::log_softmax_rows;
using parallel::matmul_nn;
using parallel::matmul_nt;
using parallel::matmul_tn;
using parallel::softmax_rows;

// Number of floats needed for the attention probability buffer.
std::size_t attention_probs_size(std::span<const int> offsets, int n_heads);

// Whether the library was built with OpenMP.
bool openmp_enabled();
int max_threads();

}  // namespace pcll::kernels
