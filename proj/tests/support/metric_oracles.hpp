#pragma once

// Brute-force restatements of the metrics, written without reference to the
// library code: nested loops over plain vectors.

#include <map>
#include <set>
#include <string>
#include <vector>

#include "pcll/data.hpp"

namespace pcll::testing {

using Matrix = std::vector<std::vector<double>>;

inline double oracle_score(const Matrix& r) {
  double s = 0.0;
  for (double v : r.back()) s += v;
  return s / static_cast<double>(r.back().size());
}

// all_tasks: Z_i averages every column; otherwise only columns 0..i.
inline double oracle_lca(const Matrix& r, bool all_tasks = true) {
  double area = 0.0;
  for (std::size_t i = 0; i < r.size(); ++i) {
    const std::size_t cols = all_tasks ? r[i].size() : i + 1;
    double z = 0.0;
    for (std::size_t j = 0; j < cols; ++j) z += r[i][j];
    area += z / static_cast<double>(cols);
  }
  return area / static_cast<double>(r.size());
}

inline double oracle_dist(const std::vector<std::vector<std::string>>& corpus, int n) {
  std::set<std::vector<std::string>> unique;
  long total = 0;
  for (const auto& u : corpus)
    for (int i = 0; i + n <= static_cast<int>(u.size()); ++i) {
      unique.insert(std::vector<std::string>(u.begin() + i, u.begin() + i + n));
      ++total;
    }
  return static_cast<double>(unique.size()) / static_cast<double>(total);
}

inline double oracle_slot_f1(const std::vector<std::vector<SlotPair>>& pred,
                             const std::vector<std::vector<SlotPair>>& gold) {
  std::set<std::string> types;
  for (const auto& g : gold)
    for (const auto& p : g) types.insert(p.slot);
  if (types.empty()) {
    for (const auto& p : pred)
      if (!p.empty()) return 0.0;
    return 100.0;
  }
  double total = 0.0;
  for (const auto& type : types) {
    double tp = 0, fp = 0, fn = 0;
    for (std::size_t s = 0; s < gold.size(); ++s) {
      std::vector<bool> used(gold[s].size(), false);
      for (const auto& p : pred[s]) {
        if (p.slot != type) continue;
        bool hit = false;
        for (std::size_t k = 0; k < gold[s].size() && !hit; ++k)
          if (!used[k] && gold[s][k] == p) {
            used[k] = true;
            hit = true;
          }
        if (hit)
          tp += 1;
        else
          fp += 1;
      }
      for (std::size_t k = 0; k < gold[s].size(); ++k)
        if (gold[s][k].slot == type && !used[k]) fn += 1;
    }
    const double precision = tp + fp > 0 ? tp / (tp + fp) : 0.0;
    const double recall = tp + fn > 0 ? tp / (tp + fn) : 0.0;
    total += precision + recall > 0 ? 2 * precision * recall / (precision + recall) : 0.0;
  }
  return 100.0 * total / static_cast<double>(types.size());
}

}  // namespace pcll::testing
