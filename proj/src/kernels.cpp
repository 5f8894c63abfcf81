#include "pcll/kernels.hpp"

#include <algorithm>
#include <cmath>
#include <vector>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace pcll::kernels {
namespace {

// Below this many multiply-adds the thread fork costs more than it saves.
constexpr long kMinParallelWork = 1L << 15;

// c[0,n) += sum_p a[p] * b[p, :]. Element-wise over j with p in order, so the
// wider clone computes exactly what the default one does.
#if defined(__GNUC__) && defined(__x86_64__) && !defined(__clang__)
__attribute__((target_clones("avx2", "default")))
#endif
void axpy_rows(int n, int k, const float* a, const float* b, float* c) {
  for (int p = 0; p < k; ++p) {
    const float av = a[p];
    const float* brow = b + static_cast<std::size_t>(p) * n;
    for (int j = 0; j < n; ++j) c[j] += av * brow[j];
  }
}

template <bool Par>
void matmul_nn_impl(int m, int n, int k, const float* a, const float* b, float* c,
                    bool accumulate) {
  const long work = static_cast<long>(m) * n * k;
#pragma omp parallel for schedule(static) if (Par && work >= kMinParallelWork)
  for (int i = 0; i < m; ++i) {
    float* crow = c + static_cast<std::size_t>(i) * n;
    if (!accumulate) std::fill(crow, crow + n, 0.0f);
    axpy_rows(n, k, a + static_cast<std::size_t>(i) * k, b, crow);
  }
}

template <bool Par>
void matmul_nt_impl(int m, int n, int k, const float* a, const float* b, float* c,
                    bool accumulate) {
  // Transpose B once so the inner loop runs over contiguous memory.
  std::vector<float> bt(static_cast<std::size_t>(k) * n);
  for (int j = 0; j < n; ++j)
    for (int p = 0; p < k; ++p) bt[static_cast<std::size_t>(p) * n + j] = b[static_cast<std::size_t>(j) * k + p];
  matmul_nn_impl<Par>(m, n, k, a, bt.data(), c, accumulate);
}

template <bool Par>
void matmul_tn_impl(int m, int n, int k, const float* a, const float* b, float* c,
                    bool accumulate) {
  // Transpose A once; the nn loop then keeps the same summation order over p.
  std::vector<float> at(static_cast<std::size_t>(m) * k);
  for (int p = 0; p < k; ++p)
    for (int i = 0; i < m; ++i) at[static_cast<std::size_t>(i) * k + p] = a[static_cast<std::size_t>(p) * m + i];
  matmul_nn_impl<Par>(m, n, k, at.data(), b, c, accumulate);
}

template <bool Par>
void softmax_rows_impl(int rows, int cols, const float* x, float* y) {
#pragma omp parallel for schedule(static) if (Par && static_cast<long>(rows) * cols >= kMinParallelWork)
  for (int r = 0; r < rows; ++r) {
    const float* xr = x + static_cast<std::size_t>(r) * cols;
    float* yr = y + static_cast<std::size_t>(r) * cols;
    const float mx = *std::max_element(xr, xr + cols);
    float sum = 0.0f;
    for (int j = 0; j < cols; ++j) {
      yr[j] = std::exp(xr[j] - mx);
      sum += yr[j];
    }
    const float inv = 1.0f / sum;
    for (int j = 0; j < cols; ++j) yr[j] *= inv;
  }
}

template <bool Par>
void log_softmax_rows_impl(int rows, int cols, const float* x, float* y) {
#pragma omp parallel for schedule(static) if (Par && static_cast<long>(rows) * cols >= kMinParallelWork)
  for (int r = 0; r < rows; ++r) {
    const float* xr = x + static_cast<std::size_t>(r) * cols;
    float* yr = y + static_cast<std::size_t>(r) * cols;
    const float mx = *std::max_element(xr, xr + cols);
    float sum = 0.0f;
    for (int j = 0; j < cols; ++j) sum += std::exp(xr[j] - mx);
    const float lse = mx + std::log(sum);
    for (int j = 0; j < cols; ++j) yr[j] = xr[j] - lse;
  }
}

template <bool Par>
void layer_norm_rows_impl(int rows, int cols, const float* x, const float* gamma,
                          const float* beta, float eps, float* xhat, float* inv_std, float* y) {
#pragma omp parallel for schedule(static) if (Par && static_cast<long>(rows) * cols >= kMinParallelWork)
  for (int r = 0; r < rows; ++r) {
    const float* xr = x + static_cast<std::size_t>(r) * cols;
    float* hr = xhat + static_cast<std::size_t>(r) * cols;
    float* yr = y + static_cast<std::size_t>(r) * cols;
    float mean = 0.0f;
    for (int j = 0; j < cols; ++j) mean += xr[j];
    mean /= static_cast<float>(cols);
    float var = 0.0f;
    for (int j = 0; j < cols; ++j) {
      const float d = xr[j] - mean;
      var += d * d;
    }
    var /= static_cast<float>(cols);
    const float inv = 1.0f / std::sqrt(var + eps);
    inv_std[r] = inv;
    for (int j = 0; j < cols; ++j) {
      hr[j] = (xr[j] - mean) * inv;
      yr[j] = hr[j] * gamma[j] + beta[j];
    }
  }
}

template <bool Par>
void layer_norm_backward_rows_impl(int rows, int cols, const float* dy, const float* xhat,
                                   const float* inv_std, const float* gamma, float* dx) {
#pragma omp parallel for schedule(static) if (Par && static_cast<long>(rows) * cols >= kMinParallelWork)
  for (int r = 0; r < rows; ++r) {
    const float* dyr = dy + static_cast<std::size_t>(r) * cols;
    const float* hr = xhat + static_cast<std::size_t>(r) * cols;
    float* dxr = dx + static_cast<std::size_t>(r) * cols;
    float mean_g = 0.0f;
    float mean_gh = 0.0f;
    for (int j = 0; j < cols; ++j) {
      const float g = dyr[j] * gamma[j];
      mean_g += g;
      mean_gh += g * hr[j];
    }
    mean_g /= static_cast<float>(cols);
    mean_gh /= static_cast<float>(cols);
    for (int j = 0; j < cols; ++j) {
      const float g = dyr[j] * gamma[j];
      dxr[j] += inv_std[r] * (g - mean_g - hr[j] * mean_gh);
    }
  }
}

// Start of each sequence's probability block (per head blocks of L*L follow).
std::vector<std::size_t> prob_bases(std::span<const int> offsets, int n_heads) {
  std::vector<std::size_t> base(offsets.size(), 0);
  for (std::size_t s = 0; s + 1 < offsets.size(); ++s) {
    const std::size_t len = static_cast<std::size_t>(offsets[s + 1] - offsets[s]);
    base[s + 1] = base[s] + len * len * static_cast<std::size_t>(n_heads);
  }
  return base;
}

template <bool Par>
void causal_attention_impl(std::span<const int> offsets, AttentionShape shape, const float* qkv,
                           float* probs, float* out) {
  const int n_seq = static_cast<int>(offsets.size()) - 1;
  const int d = shape.d_model;
  const int hd = d / shape.n_heads;
  const int stride = 3 * d;
  const float scale = 1.0f / std::sqrt(static_cast<float>(hd));
  const auto base = prob_bases(offsets, shape.n_heads);
  const int tasks = n_seq * shape.n_heads;
#pragma omp parallel for schedule(dynamic) if (Par && tasks > 1)
  for (int task = 0; task < tasks; ++task) {
    const int s = task / shape.n_heads;
    const int h = task % shape.n_heads;
    const int o = offsets[s];
    const int len = offsets[s + 1] - o;
    float* p = probs + base[s] + static_cast<std::size_t>(h) * len * len;
    for (int i = 0; i < len; ++i) {
      const float* qi = qkv + static_cast<std::size_t>(o + i) * stride + h * hd;
      float* pi = p + static_cast<std::size_t>(i) * len;
      float mx = -INFINITY;
      for (int j = 0; j <= i; ++j) {
        const float* kj = qkv + static_cast<std::size_t>(o + j) * stride + d + h * hd;
        float dot = 0.0f;
        for (int c = 0; c < hd; ++c) dot += qi[c] * kj[c];
        pi[j] = dot * scale;
        mx = std::max(mx, pi[j]);
      }
      float sum = 0.0f;
      for (int j = 0; j <= i; ++j) {
        pi[j] = std::exp(pi[j] - mx);
        sum += pi[j];
      }
      const float inv = 1.0f / sum;
      for (int j = 0; j <= i; ++j) pi[j] *= inv;
      for (int j = i + 1; j < len; ++j) pi[j] = 0.0f;
      float* oi = out + static_cast<std::size_t>(o + i) * d + h * hd;
      std::fill(oi, oi + hd, 0.0f);
      for (int j = 0; j <= i; ++j) {
        const float* vj = qkv + static_cast<std::size_t>(o + j) * stride + 2 * d + h * hd;
        for (int c = 0; c < hd; ++c) oi[c] += pi[j] * vj[c];
      }
    }
  }
}

template <bool Par>
void causal_attention_backward_impl(std::span<const int> offsets, AttentionShape shape,
                                    const float* qkv, const float* probs, const float* dout,
                                    float* dqkv) {
  const int n_seq = static_cast<int>(offsets.size()) - 1;
  const int d = shape.d_model;
  const int hd = d / shape.n_heads;
  const int stride = 3 * d;
  const float scale = 1.0f / std::sqrt(static_cast<float>(hd));
  const auto base = prob_bases(offsets, shape.n_heads);
  const int tasks = n_seq * shape.n_heads;
#pragma omp parallel for schedule(dynamic) if (Par && tasks > 1)
  for (int task = 0; task < tasks; ++task) {
    const int s = task / shape.n_heads;
    const int h = task % shape.n_heads;
    const int o = offsets[s];
    const int len = offsets[s + 1] - o;
    const float* p = probs + base[s] + static_cast<std::size_t>(h) * len * len;
    std::vector<float> dp(static_cast<std::size_t>(len));
    for (int i = 0; i < len; ++i) {
      const float* pi = p + static_cast<std::size_t>(i) * len;
      const float* doi = dout + static_cast<std::size_t>(o + i) * d + h * hd;
      float row_dot = 0.0f;
      for (int j = 0; j <= i; ++j) {
        const std::size_t rj = static_cast<std::size_t>(o + j) * stride;
        const float* vj = qkv + rj + 2 * d + h * hd;
        float* dvj = dqkv + rj + 2 * d + h * hd;
        float acc = 0.0f;
        for (int c = 0; c < hd; ++c) {
          acc += doi[c] * vj[c];
          dvj[c] += pi[j] * doi[c];
        }
        dp[static_cast<std::size_t>(j)] = acc;
        row_dot += pi[j] * acc;
      }
      const std::size_t ri = static_cast<std::size_t>(o + i) * stride;
      const float* qi = qkv + ri + h * hd;
      float* dqi = dqkv + ri + h * hd;
      for (int j = 0; j <= i; ++j) {
        const float ds = pi[j] * (dp[static_cast<std::size_t>(j)] - row_dot) * scale;
        if (ds == 0.0f) continue;
        const std::size_t rj = static_cast<std::size_t>(o + j) * stride;
        const float* kj = qkv + rj + d + h * hd;
        float* dkj = dqkv + rj + d + h * hd;
        for (int c = 0; c < hd; ++c) {
          dqi[c] += ds * kj[c];
          dkj[c] += ds * qi[c];
        }
      }
    }
  }
}

}  // namespace

#define PCLL_DEFINE_KERNELS(NS, PAR)                                                          \
  namespace NS {                                                                              \
  void matmul_nn(int m, int n, int k, const float* a, const float* b, float* c,              \
                 bool accumulate) {                                                           \
    matmul_nn_impl<PAR>(m, n, k, a, b, c, accumulate);                                        \
  }                                                                                           \
  void matmul_nt(int m, int n, int k, const float* a, const float* b, float* c,              \
                 bool accumulate) {                                                           \
    matmul_nt_impl<PAR>(m, n, k, a, b, c, accumulate);                                        \
  }                                                                                           \
  void matmul_tn(int m, int n, int k, const float* a, const float* b, float* c,              \
                 bool accumulate) {                                                           \
    matmul_tn_impl<PAR>(m, n, k, a, b, c, accumulate);                                        \
  }                                                                                           \
  void softmax_rows(int rows, int cols, const float* x, float* y) {                          \
    softmax_rows_impl<PAR>(rows, cols, x, y);                                                 \
  }                                                                                           \
  void log_softmax_rows(int rows, int cols, const float* x, float* y) {                      \
    log_softmax_rows_impl<PAR>(rows, cols, x, y);                                             \
  }                                                                                           \
  void layer_norm_rows(int rows, int cols, const float* x, const float* gamma,               \
                       const float* beta, float eps, float* xhat, float* inv_std, float* y) { \
    layer_norm_rows_impl<PAR>(rows, cols, x, gamma, beta, eps, xhat, inv_std, y);             \
  }                                                                                           \
  void layer_norm_backward_rows(int rows, int cols, const float* dy, const float* xhat,       \
                                const float* inv_std, const float* gamma, float* dx) {        \
    layer_norm_backward_rows_impl<PAR>(rows, cols, dy, xhat, inv_std, gamma, dx);             \
  }                                                                                           \
  void causal_attention(std::span<const int> offsets, AttentionShape shape,                  \
                        const float* qkv, float* probs, float* out) {                         \
    causal_attention_impl<PAR>(offsets, shape, qkv, probs, out);                              \
  }                                                                                           \
  void causal_attention_backward(std::span<const int> offsets, AttentionShape shape,         \
                                 const float* qkv, const float* probs, const float* dout,    \
                                 float* dqkv) {                                               \
    causal_attention_backward_impl<PAR>(offsets, shape, qkv, probs, dout, dqkv);              \
  }                                                                                           \
  }

PCLL_DEFINE_KERNELS(serial, false)
PCLL_DEFINE_KERNELS(parallel, true)

#undef PCLL_DEFINE_KERNELS

std::size_t attention_probs_size(std::span<const int> offsets, int n_heads) {
  return prob_bases(offsets, n_heads).back();
}

bool openmp_enabled() {
#ifdef _OPENMP
  return true;
#else
  return false;
#endif
}

int max_threads() {
#ifdef _OPENMP
  return omp_get_max_threads();
#else
  return 1;
#endif
}

}  // namespace pcll::kernels
