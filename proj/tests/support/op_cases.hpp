#pragma once

// The finite-difference suite over every differentiable op, shared by the
// unit tests and the acceptance run.

#include <random>
#include <string>
#include <vector>

#include "gradcheck.hpp"
#include "pcll/ops.hpp"

namespace pcll::testing {

struct OpCheck {
  std::string op;
  double rel_error = 0.0;
};

inline std::vector<OpCheck> op_gradient_checks(std::uint64_t seed = 11, double h = 4e-3) {
  std::mt19937_64 rng(seed);
  std::vector<OpCheck> out;
  auto run = [&](std::string name, const GraphFn& f, std::vector<Tensor> in) {
    out.push_back({std::move(name), gradcheck(f, std::move(in), seed, h).max_rel_error});
  };
  auto r = [&](Shape s, float scale = 1.0f) { return random_tensor(rng, std::move(s), scale); };

  run("matmul", [](const auto& v) { return ops::matmul(v[0], v[1]); }, {r({3, 4}), r({4, 5})});
  run("transpose", [](const auto& v) { return ops::transpose(v[0]); }, {r({3, 4})});
  run("add", [](const auto& v) { return ops::add(v[0], v[1]); }, {r({3, 4}), r({3, 4})});
  run("add/broadcast", [](const auto& v) { return ops::add(v[0], v[1]); }, {r({3, 4}), r({1, 4})});
  run("sub/broadcast", [](const auto& v) { return ops::sub(v[0], v[1]); }, {r({3, 4}), r({1, 4})});
  run("mul", [](const auto& v) { return ops::mul(v[0], v[1]); }, {r({3, 4}), r({3, 4})});
  run("mul/broadcast", [](const auto& v) { return ops::mul(v[0], v[1]); }, {r({3, 4}), r({1, 4})});
  run("scale", [](const auto& v) { return ops::scale(v[0], -1.7f); }, {r({2, 3})});
  run("add_scalar", [](const auto& v) { return ops::add_scalar(v[0], 0.3f); }, {r({2, 3})});
  run("exp", [](const auto& v) { return ops::exp(v[0]); }, {r({2, 3}, 0.5f)});
  run("tanh", [](const auto& v) { return ops::tanh(v[0]); }, {r({2, 3})});
  run("gelu", [](const auto& v) { return ops::gelu(v[0]); }, {r({2, 3})});
  // clamp is checked away from its kinks
  run("clamp", [](const auto& v) { return ops::clamp(v[0], -1.0f, 1.0f); },
      {Tensor::from({1, 4}, {-3.0f, -0.5f, 0.4f, 2.5f}, true)});
  run("softmax", [](const auto& v) { return ops::softmax(v[0]); }, {r({3, 5})});
  run("log_softmax", [](const auto& v) { return ops::log_softmax(v[0]); }, {r({3, 5})});
  run("layer_norm", [](const auto& v) { return ops::layer_norm(v[0], v[1], v[2]); }, {r({4, 6}), r({1, 6}), r({1, 6})});
  const std::vector<int> ids{2, 0, 2, -1, 1};
  run("gather_rows", [ids](const auto& v) { return ops::gather_rows(v[0], ids); }, {r({3, 4})});
  run("concat/rows", [](const auto& v) { return ops::concat(std::vector<Tensor>{v[0], v[1]}, 0); }, {r({2, 3}), r({1, 3})});
  run("concat/cols", [](const auto& v) { return ops::concat(std::vector<Tensor>{v[0], v[1]}, 1); }, {r({2, 3}), r({2, 2})});
  run("slice_rows", [](const auto& v) { return ops::slice_rows(v[0], 1, 3); }, {r({4, 3})});
  run("slice_cols", [](const auto& v) { return ops::slice_cols(v[0], 1, 3); }, {r({4, 3})});
  for (int axis : {0, 1}) {
    run("sum/" + std::to_string(axis), [axis](const auto& v) { return ops::sum(v[0], axis); }, {r({3, 4})});
    run("mean/" + std::to_string(axis), [axis](const auto& v) { return ops::mean(v[0], axis); }, {r({3, 4})});
  }
  run("sum_all", [](const auto& v) { return ops::sum_all(v[0]); }, {r({3, 4})});
  run("mean_all", [](const auto& v) { return ops::mean_all(v[0]); }, {r({3, 4})});
  const std::vector<int> offsets{0, 3, 7};
  run("causal_attention", [offsets](const auto& v) { return ops::causal_attention(v[0], offsets, 2); },
      {r({7, 12}, 0.8f)});

  // scalar losses: float output rounding is too coarse for differencing, so
  // the numeric side differentiates a double-precision reference
  const int v = 5;
  const std::vector<ops::TokenTarget> t{{0, 2, 0.5f}, {1, 0, 0.25f}, {2, 4, 1.0f}, {0, 1, 0.3f}};
  auto nll_ref = [t, v](const std::vector<std::vector<double>>& x) {
    double s = 0.0;
    for (const auto& e : t) s -= e.weight * ref_log_softmax(x[0], e.row, v)[static_cast<std::size_t>(e.token)];
    return s;
  };
  out.push_back({"weighted_nll", gradcheck_reference([t](const auto& in) { return ops::weighted_nll(in[0], t); },
                                                     {r({3, v})}, nll_ref)
                                     .max_rel_error});
  const Tensor probs = ops::softmax(random_tensor(rng, {2, v}, 1.0f, false));
  const std::vector<ops::SoftTarget> s{{0, 1, 0.5f}, {2, 0, 0.7f}};
  auto ce_ref = [s, probs, v](const std::vector<std::vector<double>>& in) {
    double total = 0.0;
    for (const auto& e : s) {
      const auto lp = ref_log_softmax(in[0], e.row, v);
      for (int j = 0; j < v; ++j) total -= e.weight * probs.at(e.target_row, j) * lp[static_cast<std::size_t>(j)];
    }
    return total;
  };
  out.push_back({"weighted_soft_ce",
                 gradcheck_reference([s, probs](const auto& in) { return ops::weighted_soft_ce(in[0], s, probs); },
                                     {r({3, v})}, ce_ref)
                     .max_rel_error});
  return out;
}

}  // namespace pcll::testing
