#include "pcll/ops.hpp"

#include <algorithm>
#include <cmath>

#include "pcll/kernels.hpp"

namespace pcll::ops {
namespace {

using detail::Node;
using NodePtr = std::shared_ptr<Node>;

int rows_of(const Tensor& t) {
  const auto& s = t.shape();
  if (s.empty()) return 1;
  int r = 1;
  for (std::size_t i = 0; i + 1 < s.size(); ++i) r *= s[i];
  return r;
}

int cols_of(const Tensor& t) {
  const auto& s = t.shape();
  return s.empty() ? 1 : s.back();
}

void require_2d(const char* op, const Tensor& t) {
  if (t.rank() != 2) throw ShapeError(op, "expected a 2-D tensor, got " + to_string(t.shape()));
}

bool any_requires_grad(std::initializer_list<const Tensor*> inputs) {
  if (!grad_enabled()) return false;
  return std::any_of(inputs.begin(), inputs.end(), [](const Tensor* t) { return t->requires_grad(); });
}

// Builds the result node and wires it into the graph when needed.
Tensor make_result(Shape shape, std::vector<float> values, std::initializer_list<const Tensor*> inputs,
                   std::function<void(Node&)> backward) {
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->data = std::move(values);
  if (any_requires_grad(inputs)) {
    node->requires_grad = true;
    for (const Tensor* t : inputs) node->parents.push_back(t->node());
    node->backward_fn = std::move(backward);
  }
  return Tensor(std::move(node));
}

// Gradient buffer of parent i, or nullptr when it does not need one.
float* grad_of(Node& self, std::size_t i) {
  Node& p = *self.parents[i];
  return p.requires_grad ? p.pending_grad().data() : nullptr;
}

enum class Broadcast { same, row };

Broadcast check_binary(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() == b.shape()) return Broadcast::same;
  if (rows_of(b) == 1 && cols_of(b) == cols_of(a)) return Broadcast::row;
  throw ShapeError(op, a.shape(), b.shape());
}

template <typename Fwd, typename GradA, typename GradB>
Tensor binary(const char* op, const Tensor& a, const Tensor& b, Fwd fwd, GradA ga, GradB gb) {
  const Broadcast mode = check_binary(op, a, b);
  const int cols = cols_of(a);
  const std::size_t n = a.numel();
  auto ad = a.data();
  auto bd = b.data();
  std::vector<float> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t j = mode == Broadcast::same ? i : i % static_cast<std::size_t>(cols);
    out[i] = fwd(ad[i], bd[j]);
  }
  return make_result(a.shape(), std::move(out), {&a, &b}, [mode, cols, ga, gb](Node& self) {
    const auto& av = self.parents[0]->data;
    const auto& bv = self.parents[1]->data;
    float* da = grad_of(self, 0);
    float* db = grad_of(self, 1);
    for (std::size_t i = 0; i < self.pending.size(); ++i) {
      const std::size_t j = mode == Broadcast::same ? i : i % static_cast<std::size_t>(cols);
      const float g = self.pending[i];
      if (da) da[i] += ga(g, av[i], bv[j]);
      if (db) db[j] += gb(g, av[i], bv[j]);
    }
  });
}

template <typename Fwd, typename Deriv>
Tensor unary(const Tensor& a, Fwd fwd, Deriv deriv) {
  auto ad = a.data();
  std::vector<float> out(ad.size());
  for (std::size_t i = 0; i < ad.size(); ++i) out[i] = fwd(ad[i]);
  return make_result(a.shape(), std::move(out), {&a}, [deriv](Node& self) {
    float* da = grad_of(self, 0);
    if (!da) return;
    const auto& x = self.parents[0]->data;
    for (std::size_t i = 0; i < self.pending.size(); ++i) da[i] += self.pending[i] * deriv(x[i], self.data[i]);
  });
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_2d("matmul", a);
  require_2d("matmul", b);
  if (a.dim(1) != b.dim(0)) throw ShapeError("matmul", a.shape(), b.shape());
  const int m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<float> out(static_cast<std::size_t>(m) * n);
  kernels::matmul_nn(m, n, k, a.data().data(), b.data().data(), out.data(), false);
  return make_result({m, n}, std::move(out), {&a, &b}, [m, n, k](Node& self) {
    const float* g = self.pending.data();
    if (float* da = grad_of(self, 0)) kernels::matmul_nt(m, k, n, g, self.parents[1]->data.data(), da, true);
    if (float* db = grad_of(self, 1)) kernels::matmul_tn(k, n, m, self.parents[0]->data.data(), g, db, true);
  });
}

Tensor transpose(const Tensor& a) {
  require_2d("transpose", a);
  const int r = a.dim(0), c = a.dim(1);
  auto ad = a.data();
  std::vector<float> out(ad.size());
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < c; ++j) out[static_cast<std::size_t>(j) * r + i] = ad[static_cast<std::size_t>(i) * c + j];
  return make_result({c, r}, std::move(out), {&a}, [r, c](Node& self) {
    float* da = grad_of(self, 0);
    if (!da) return;
    for (int i = 0; i < r; ++i)
      for (int j = 0; j < c; ++j)
        da[static_cast<std::size_t>(i) * c + j] += self.pending[static_cast<std::size_t>(j) * r + i];
  });
}

Tensor add(const Tensor& a, const Tensor& b) {
  return binary(
      "add", a, b, [](float x, float y) { return x + y; }, [](float g, float, float) { return g; },
      [](float g, float, float) { return g; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary(
      "sub", a, b, [](float x, float y) { return x - y; }, [](float g, float, float) { return g; },
      [](float g, float, float) { return -g; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary(
      "mul", a, b, [](float x, float y) { return x * y; }, [](float g, float, float y) { return g * y; },
      [](float g, float x, float) { return g * x; });
}

Tensor scale(const Tensor& a, float factor) {
  return unary(
      a, [factor](float x) { return x * factor; }, [factor](float, float) { return factor; });
}

Tensor add_scalar(const Tensor& a, float value) {
  return unary(
      a, [value](float x) { return x + value; }, [](float, float) { return 1.0f; });
}

Tensor exp(const Tensor& a) {
  return unary(
      a, [](float x) { return std::exp(x); }, [](float, float y) { return y; });
}

Tensor tanh(const Tensor& a) {
  return unary(
      a, [](float x) { return std::tanh(x); }, [](float, float y) { return 1.0f - y * y; });
}

Tensor gelu(const Tensor& a) {
  constexpr float kC = 0.7978845608028654f;  // sqrt(2/pi)
  constexpr float kA = 0.044715f;
  return unary(
      a,
      [](float x) { return 0.5f * x * (1.0f + std::tanh(kC * (x + kA * x * x * x))); },
      [](float x, float) {
        const float u = kC * (x + kA * x * x * x);
        const float t = std::tanh(u);
        const float du = kC * (1.0f + 3.0f * kA * x * x);
        return 0.5f * (1.0f + t) + 0.5f * x * (1.0f - t * t) * du;
      });
}

Tensor clamp(const Tensor& a, float lo, float hi) {
  return unary(
      a, [lo, hi](float x) { return std::clamp(x, lo, hi); },
      [lo, hi](float x, float) { return (x >= lo && x <= hi) ? 1.0f : 0.0f; });
}

Tensor softmax(const Tensor& a) {
  const int r = rows_of(a), c = cols_of(a);
  std::vector<float> out(a.numel());
  kernels::softmax_rows(r, c, a.data().data(), out.data());
  return make_result(a.shape(), std::move(out), {&a}, [r, c](Node& self) {
    float* da = grad_of(self, 0);
    if (!da) return;
    for (int i = 0; i < r; ++i) {
      const float* y = self.data.data() + static_cast<std::size_t>(i) * c;
      const float* g = self.pending.data() + static_cast<std::size_t>(i) * c;
      float dot = 0.0f;
      for (int j = 0; j < c; ++j) dot += g[j] * y[j];
      for (int j = 0; j < c; ++j) da[static_cast<std::size_t>(i) * c + j] += y[j] * (g[j] - dot);
    }
  });
}

Tensor log_softmax(const Tensor& a) {
  const int r = rows_of(a), c = cols_of(a);
  std::vector<float> out(a.numel());
  kernels::log_softmax_rows(r, c, a.data().data(), out.data());
  return make_result(a.shape(), std::move(out), {&a}, [r, c](Node& self) {
    float* da = grad_of(self, 0);
    if (!da) return;
    for (int i = 0; i < r; ++i) {
      const float* y = self.data.data() + static_cast<std::size_t>(i) * c;
      const float* g = self.pending.data() + static_cast<std::size_t>(i) * c;
      float gsum = 0.0f;
      for (int j = 0; j < c; ++j) gsum += g[j];
      for (int j = 0; j < c; ++j) da[static_cast<std::size_t>(i) * c + j] += g[j] - std::exp(y[j]) * gsum;
    }
  });
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, float eps) {
  const int r = rows_of(x), c = cols_of(x);
  if (gamma.numel() != static_cast<std::size_t>(c)) throw ShapeError("layer_norm", x.shape(), gamma.shape());
  if (beta.numel() != static_cast<std::size_t>(c)) throw ShapeError("layer_norm", x.shape(), beta.shape());
  auto xhat = std::make_shared<std::vector<float>>(x.numel());
  auto inv_std = std::make_shared<std::vector<float>>(static_cast<std::size_t>(r));
  std::vector<float> out(x.numel());
  kernels::layer_norm_rows(r, c, x.data().data(), gamma.data().data(), beta.data().data(), eps, xhat->data(),
                           inv_std->data(), out.data());
  return make_result(x.shape(), std::move(out), {&x, &gamma, &beta}, [r, c, xhat, inv_std](Node& self) {
    const float* g = self.pending.data();
    const float* gam = self.parents[1]->data.data();
    if (float* dx = grad_of(self, 0))
      kernels::layer_norm_backward_rows(r, c, g, xhat->data(), inv_std->data(), gam, dx);
    float* dgamma = grad_of(self, 1);
    float* dbeta = grad_of(self, 2);
    for (int i = 0; i < r; ++i) {
      for (int j = 0; j < c; ++j) {
        const std::size_t idx = static_cast<std::size_t>(i) * c + j;
        if (dgamma) dgamma[j] += g[idx] * (*xhat)[idx];
        if (dbeta) dbeta[j] += g[idx];
      }
    }
  });
}

Tensor gather_rows(const Tensor& table, std::span<const int> ids) {
  require_2d("gather_rows", table);
  const int n_rows = table.dim(0), c = table.dim(1);
  std::vector<int> idx(ids.begin(), ids.end());
  std::vector<float> out(idx.size() * static_cast<std::size_t>(c), 0.0f);
  auto td = table.data();
  for (std::size_t i = 0; i < idx.size(); ++i) {
    const int id = idx[i];
    if (id == -1) continue;
    if (id < 0 || id >= n_rows)
      throw ShapeError("gather_rows", "index " + std::to_string(id) + " out of range for " + to_string(table.shape()));
    std::copy_n(td.data() + static_cast<std::size_t>(id) * c, c, out.data() + i * c);
  }
  const int n = static_cast<int>(idx.size());
  return make_result({n, c}, std::move(out), {&table}, [idx = std::move(idx), c](Node& self) {
    float* dt = grad_of(self, 0);
    if (!dt) return;
    for (std::size_t i = 0; i < idx.size(); ++i) {
      if (idx[i] < 0) continue;
      float* dst = dt + static_cast<std::size_t>(idx[i]) * c;
      const float* src = self.pending.data() + i * c;
      for (int j = 0; j < c; ++j) dst[j] += src[j];
    }
  });
}

Tensor concat(std::span<const Tensor> parts, int axis) {
  if (parts.empty()) throw ShapeError("concat", "no inputs");
  if (axis != 0 && axis != 1) throw ShapeError("concat", "axis must be 0 or 1");
  for (const auto& p : parts) require_2d("concat", p);
  const int other = axis == 0 ? 1 : 0;
  int total = 0;
  for (const auto& p : parts) {
    if (p.dim(other) != parts[0].dim(other)) throw ShapeError("concat", parts[0].shape(), p.shape());
    total += p.dim(axis);
  }
  const int r = axis == 0 ? total : parts[0].dim(0);
  const int c = axis == 1 ? total : parts[0].dim(1);
  std::vector<float> out(static_cast<std::size_t>(r) * c);
  std::vector<int> starts;
  int at = 0;
  for (const auto& p : parts) {
    starts.push_back(at);
    auto pd = p.data();
    const int pr = p.dim(0), pc = p.dim(1);
    for (int i = 0; i < pr; ++i)
      for (int j = 0; j < pc; ++j) {
        const int oi = axis == 0 ? at + i : i;
        const int oj = axis == 1 ? at + j : j;
        out[static_cast<std::size_t>(oi) * c + oj] = pd[static_cast<std::size_t>(i) * pc + j];
      }
    at += p.dim(axis);
  }

  auto node = std::make_shared<Node>();
  node->shape = {r, c};
  node->data = std::move(out);
  const bool needs = grad_enabled() && std::any_of(parts.begin(), parts.end(), [](const Tensor& t) { return t.requires_grad(); });
  if (needs) {
    node->requires_grad = true;
    for (const auto& p : parts) node->parents.push_back(p.node());
    node->backward_fn = [starts, axis, c](Node& self) {
      for (std::size_t k = 0; k < self.parents.size(); ++k) {
        float* dp = grad_of(self, k);
        if (!dp) continue;
        const int pr = self.parents[k]->shape[0], pc = self.parents[k]->shape[1];
        for (int i = 0; i < pr; ++i)
          for (int j = 0; j < pc; ++j) {
            const int oi = axis == 0 ? starts[k] + i : i;
            const int oj = axis == 1 ? starts[k] + j : j;
            dp[static_cast<std::size_t>(i) * pc + j] += self.pending[static_cast<std::size_t>(oi) * c + oj];
          }
      }
    };
  }
  return Tensor(std::move(node));
}

Tensor slice_rows(const Tensor& a, int begin, int end) {
  require_2d("slice_rows", a);
  if (begin < 0 || end > a.dim(0) || begin >= end)
    throw ShapeError("slice_rows", "bad range [" + std::to_string(begin) + "," + std::to_string(end) + ") for " +
                                       to_string(a.shape()));
  const int c = a.dim(1);
  auto ad = a.data();
  std::vector<float> out(ad.begin() + static_cast<std::ptrdiff_t>(begin) * c,
                         ad.begin() + static_cast<std::ptrdiff_t>(end) * c);
  return make_result({end - begin, c}, std::move(out), {&a}, [begin, c](Node& self) {
    float* da = grad_of(self, 0);
    if (!da) return;
    float* dst = da + static_cast<std::size_t>(begin) * c;
    for (std::size_t i = 0; i < self.pending.size(); ++i) dst[i] += self.pending[i];
  });
}

Tensor slice_cols(const Tensor& a, int begin, int end) {
  require_2d("slice_cols", a);
  if (begin < 0 || end > a.dim(1) || begin >= end)
    throw ShapeError("slice_cols", "bad range [" + std::to_string(begin) + "," + std::to_string(end) + ") for " +
                                       to_string(a.shape()));
  const int r = a.dim(0), c = a.dim(1), w = end - begin;
  auto ad = a.data();
  std::vector<float> out(static_cast<std::size_t>(r) * w);
  for (int i = 0; i < r; ++i)
    std::copy_n(ad.data() + static_cast<std::size_t>(i) * c + begin, w, out.data() + static_cast<std::size_t>(i) * w);
  return make_result({r, w}, std::move(out), {&a}, [r, c, w, begin](Node& self) {
    float* da = grad_of(self, 0);
    if (!da) return;
    for (int i = 0; i < r; ++i)
      for (int j = 0; j < w; ++j)
        da[static_cast<std::size_t>(i) * c + begin + j] += self.pending[static_cast<std::size_t>(i) * w + j];
  });
}

Tensor sum(const Tensor& a, int axis) {
  require_2d("sum", a);
  if (axis != 0 && axis != 1) throw ShapeError("sum", "axis must be 0 or 1");
  const int r = a.dim(0), c = a.dim(1);
  auto ad = a.data();
  Shape shape = axis == 0 ? Shape{1, c} : Shape{r, 1};
  std::vector<float> out(axis == 0 ? c : r, 0.0f);
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < c; ++j) out[axis == 0 ? j : i] += ad[static_cast<std::size_t>(i) * c + j];
  return make_result(std::move(shape), std::move(out), {&a}, [r, c, axis](Node& self) {
    float* da = grad_of(self, 0);
    if (!da) return;
    for (int i = 0; i < r; ++i)
      for (int j = 0; j < c; ++j) da[static_cast<std::size_t>(i) * c + j] += self.pending[axis == 0 ? j : i];
  });
}

Tensor mean(const Tensor& a, int axis) {
  require_2d("mean", a);
  const int n = axis == 0 ? a.dim(0) : a.dim(1);
  return scale(sum(a, axis), 1.0f / static_cast<float>(n));
}

Tensor sum_all(const Tensor& a) {
  auto ad = a.data();
  float total = 0.0f;
  for (float v : ad) total += v;
  return make_result({1}, {total}, {&a}, [](Node& self) {
    float* da = grad_of(self, 0);
    if (!da) return;
    const float g = self.pending[0];
    for (std::size_t i = 0; i < self.parents[0]->data.size(); ++i) da[i] += g;
  });
}

Tensor mean_all(const Tensor& a) { return scale(sum_all(a), 1.0f / static_cast<float>(a.numel())); }

Tensor causal_attention(const Tensor& qkv, std::span<const int> offsets, int n_heads) {
  require_2d("causal_attention", qkv);
  if (qkv.dim(1) % 3 != 0) throw ShapeError("causal_attention", "qkv width must be 3*d, got " + to_string(qkv.shape()));
  const int d = qkv.dim(1) / 3;
  if (n_heads <= 0 || d % n_heads != 0)
    throw ShapeError("causal_attention", "d_model " + std::to_string(d) + " not divisible by heads");
  if (offsets.size() < 2 || offsets.front() != 0 || offsets.back() != qkv.dim(0))
    throw ShapeError("causal_attention", "offsets do not cover " + to_string(qkv.shape()));
  for (std::size_t s = 0; s + 1 < offsets.size(); ++s)
    if (offsets[s + 1] <= offsets[s]) throw ShapeError("causal_attention", "empty or unordered sequence");
  std::vector<int> offs(offsets.begin(), offsets.end());
  auto probs = std::make_shared<std::vector<float>>(kernels::attention_probs_size(offs, n_heads));
  std::vector<float> out(static_cast<std::size_t>(qkv.dim(0)) * d);
  const kernels::AttentionShape shape{n_heads, d};
  kernels::causal_attention(offs, shape, qkv.data().data(), probs->data(), out.data());
  return make_result({qkv.dim(0), d}, std::move(out), {&qkv}, [offs = std::move(offs), shape, probs](Node& self) {
    float* dq = grad_of(self, 0);
    if (!dq) return;
    kernels::causal_attention_backward(offs, shape, self.parents[0]->data.data(), probs->data(),
                                       self.pending.data(), dq);
  });
}

namespace {

// Loss values are reduced in double so that small parameter changes are not
// lost to float rounding.
double log_sum_exp(const float* row, int n) {
  const float mx = *std::max_element(row, row + n);
  double s = 0.0;
  for (int j = 0; j < n; ++j) s += std::exp(static_cast<double>(row[j]) - mx);
  return mx + std::log(s);
}

}  // namespace

Tensor weighted_nll(const Tensor& logits, std::span<const TokenTarget> targets) {
  require_2d("weighted_nll", logits);
  const int r = logits.dim(0), v = logits.dim(1);
  std::vector<TokenTarget> tg(targets.begin(), targets.end());
  for (const auto& t : tg)
    if (t.row < 0 || t.row >= r || t.token < 0 || t.token >= v)
      throw ShapeError("weighted_nll", "target (" + std::to_string(t.row) + "," + std::to_string(t.token) +
                                           ") outside " + to_string(logits.shape()));
  // log-softmax only of the rows that are referenced
  auto logp = std::make_shared<std::vector<float>>(tg.size() * static_cast<std::size_t>(v));
  double total = 0.0;
  auto ld = logits.data();
  for (std::size_t i = 0; i < tg.size(); ++i) {
    const float* row = ld.data() + static_cast<std::size_t>(tg[i].row) * v;
    kernels::serial::log_softmax_rows(1, v, row, logp->data() + i * v);
    total += static_cast<double>(tg[i].weight) * (log_sum_exp(row, v) - row[tg[i].token]);
  }
  return make_result({1}, {static_cast<float>(total)}, {&logits}, [tg = std::move(tg), logp, v](Node& self) {
    float* dl = grad_of(self, 0);
    if (!dl) return;
    const float g = self.pending[0];
    for (std::size_t i = 0; i < tg.size(); ++i) {
      float* row = dl + static_cast<std::size_t>(tg[i].row) * v;
      const float* lp = logp->data() + i * v;
      const float w = g * tg[i].weight;
      for (int j = 0; j < v; ++j) row[j] += w * std::exp(lp[j]);
      row[tg[i].token] -= w;
    }
  });
}

Tensor weighted_soft_ce(const Tensor& logits, std::span<const SoftTarget> targets, const Tensor& target_probs) {
  require_2d("weighted_soft_ce", logits);
  require_2d("weighted_soft_ce", target_probs);
  const int r = logits.dim(0), v = logits.dim(1);
  if (target_probs.dim(1) != v) throw ShapeError("weighted_soft_ce", logits.shape(), target_probs.shape());
  std::vector<SoftTarget> tg(targets.begin(), targets.end());
  for (const auto& t : tg)
    if (t.row < 0 || t.row >= r || t.target_row < 0 || t.target_row >= target_probs.dim(0))
      throw ShapeError("weighted_soft_ce", "target row out of range");
  auto logp = std::make_shared<std::vector<float>>(tg.size() * static_cast<std::size_t>(v));
  std::vector<float> probs(target_probs.data().begin(), target_probs.data().end());
  auto ld = logits.data();
  double total = 0.0;
  for (std::size_t i = 0; i < tg.size(); ++i) {
    float* lp = logp->data() + i * v;
    const float* row = ld.data() + static_cast<std::size_t>(tg[i].row) * v;
    kernels::serial::log_softmax_rows(1, v, row, lp);
    const double lse = log_sum_exp(row, v);
    const float* p = probs.data() + static_cast<std::size_t>(tg[i].target_row) * v;
    double ce = 0.0;
    for (int j = 0; j < v; ++j) ce += static_cast<double>(p[j]) * (lse - row[j]);
    total += static_cast<double>(tg[i].weight) * ce;
  }
  return make_result({1}, {static_cast<float>(total)}, {&logits},
                     [tg = std::move(tg), logp, probs = std::move(probs), v](Node& self) {
                       float* dl = grad_of(self, 0);
                       if (!dl) return;
                       const float g = self.pending[0];
                       for (std::size_t i = 0; i < tg.size(); ++i) {
                         float* row = dl + static_cast<std::size_t>(tg[i].row) * v;
                         const float* lp = logp->data() + i * v;
                         const float* p = probs.data() + static_cast<std::size_t>(tg[i].target_row) * v;
                         float mass = 0.0f;
                         for (int j = 0; j < v; ++j) mass += p[j];
                         const float w = g * tg[i].weight;
                         for (int j = 0; j < v; ++j) row[j] += w * (mass * std::exp(lp[j]) - p[j]);
                       }
                     });
}

}  // namespace pcll::ops
