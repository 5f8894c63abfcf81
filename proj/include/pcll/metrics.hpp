#pragma once

#include <optional>
#include <span>
#include <string>
#include <vector>

#include "pcll/data.hpp"

namespace pcll {

class MetricError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// R[i][j]: test score of task j after finishing task i (training order).
class ScoreMatrix {
 public:
  explicit ScoreMatrix(int n_tasks = 0);

  int n_tasks() const { return n_; }
  int rows_filled() const { return filled_; }
  bool complete() const { return filled_ == n_; }

  // Rows must be filled in order; entries must lie in [0, 100].
  void set_row(int i, std::span<const double> scores);
  double at(int i, int j) const;
  std::span<const double> row(int i) const;

  std::string to_csv(std::span<const std::string> task_names) const;
  static ScoreMatrix from_csv(const std::string& text, std::vector<std::string>* task_names = nullptr);

 private:
  int n_ = 0;
  int filled_ = 0;
  std::vector<double> r_;
};

// Percent of exact matches after whitespace normalization and lowercasing.
double intent_accuracy(std::span<const std::string> predictions, std::span<const std::string> golds);

// Macro F1 (percent) over slot types present in gold; per type, F1 of exact
// (slot, value) pair matches pooled over the test set.
double slot_macro_f1(std::span<const std::vector<SlotPair>> predictions, std::span<const std::vector<SlotPair>> golds);

// Mean of the final row.
double score_avg(const ScoreMatrix& r);

enum class LcaMode {
  all_tasks,   // Z_i averages all T tasks
  seen_tasks,  // Z_i averages tasks 1..i
};

// Mean over task boundaries of Z_i.
double lca(const ScoreMatrix& r, LcaMode mode = LcaMode::all_tasks);

// Unique n-grams / total n-grams across the corpus.
double dist_n(std::span<const std::vector<std::string>> utterances, int n);

}  // namespace pcll
