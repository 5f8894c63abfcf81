#include "pcll/metrics.hpp"

#include <iomanip>
#include <map>
#include <set>
#include <sstream>

namespace pcll {

ScoreMatrix::ScoreMatrix(int n_tasks) : n_(n_tasks), r_(static_cast<std::size_t>(n_tasks) * n_tasks, 0.0) {
  if (n_tasks < 0) throw MetricError("ScoreMatrix: negative size");
}

void ScoreMatrix::set_row(int i, std::span<const double> scores) {
  if (i != filled_) throw MetricError("ScoreMatrix: row " + std::to_string(i) + " set out of order");
  if (i >= n_) throw MetricError("ScoreMatrix: row index out of range");
  if (scores.size() != static_cast<std::size_t>(n_)) throw MetricError("ScoreMatrix: row has wrong width");
  for (double s : scores)
    if (!(s >= 0.0 && s <= 100.0)) throw MetricError("ScoreMatrix: entry outside [0, 100]");
  std::copy(scores.begin(), scores.end(), r_.begin() + static_cast<std::ptrdiff_t>(i) * n_);
  ++filled_;
}

double ScoreMatrix::at(int i, int j) const {
  if (i < 0 || i >= filled_ || j < 0 || j >= n_) throw MetricError("ScoreMatrix: entry not available");
  return r_[static_cast<std::size_t>(i) * n_ + j];
}

std::span<const double> ScoreMatrix::row(int i) const {
  if (i < 0 || i >= filled_) throw MetricError("ScoreMatrix: row not filled");
  return {r_.data() + static_cast<std::size_t>(i) * n_, static_cast<std::size_t>(n_)};
}

std::string ScoreMatrix::to_csv(std::span<const std::string> task_names) const {
  std::ostringstream os;
  os << "after_task";
  for (int j = 0; j < n_; ++j) os << ',' << (j < static_cast<int>(task_names.size()) ? task_names[j] : "task" + std::to_string(j));
  os << '\n';
  os << std::fixed << std::setprecision(4);
  for (int i = 0; i < filled_; ++i) {
    os << (i < static_cast<int>(task_names.size()) ? task_names[i] : "task" + std::to_string(i));
    for (int j = 0; j < n_; ++j) os << ',' << at(i, j);
    os << '\n';
  }
  return os.str();
}

ScoreMatrix ScoreMatrix::from_csv(const std::string& text, std::vector<std::string>* task_names) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line)) throw MetricError("score csv: empty");
  std::vector<std::string> header;
  {
    std::istringstream hs(line);
    std::string cell;
    while (std::getline(hs, cell, ',')) header.push_back(cell);
  }
  if (header.empty() || header[0] != "after_task") throw MetricError("score csv: bad header");
  const int n = static_cast<int>(header.size()) - 1;
  ScoreMatrix r(n);
  int i = 0;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::string cell;
    std::getline(ls, cell, ',');
    std::vector<double> row;
    while (std::getline(ls, cell, ',')) row.push_back(std::stod(cell));
    r.set_row(i++, row);
  }
  if (task_names) task_names->assign(header.begin() + 1, header.end());
  return r;
}

double intent_accuracy(std::span<const std::string> predictions, std::span<const std::string> golds) {
  if (golds.empty()) throw MetricError("intent_accuracy: empty evaluation set");
  if (predictions.size() != golds.size()) throw MetricError("intent_accuracy: length mismatch");
  std::size_t correct = 0;
  for (std::size_t i = 0; i < golds.size(); ++i)
    if (normalize_text(predictions[i]) == normalize_text(golds[i])) ++correct;
  return 100.0 * static_cast<double>(correct) / static_cast<double>(golds.size());
}

double slot_macro_f1(std::span<const std::vector<SlotPair>> predictions, std::span<const std::vector<SlotPair>> golds) {
  if (predictions.size() != golds.size()) throw MetricError("slot_macro_f1: length mismatch");
  struct Counts {
    double tp = 0, fp = 0, fn = 0;
  };
  std::map<std::string, Counts> per_type;
  std::set<std::string> gold_types;
  for (std::size_t i = 0; i < golds.size(); ++i) {
    std::multiset<SlotPair> gold(golds[i].begin(), golds[i].end());
    for (const auto& g : golds[i]) gold_types.insert(g.slot);
    for (const auto& p : predictions[i]) {
      auto it = gold.find(p);
      if (it != gold.end()) {
        per_type[p.slot].tp += 1;
        gold.erase(it);
      } else {
        per_type[p.slot].fp += 1;
      }
    }
    for (const auto& g : gold) per_type[g.slot].fn += 1;
  }
  if (gold_types.empty()) return predictions.empty() || std::all_of(predictions.begin(), predictions.end(), [](const auto& p) { return p.empty(); }) ? 100.0 : 0.0;
  double total = 0.0;
  for (const auto& type : gold_types) {
    const Counts& c = per_type[type];
    const double denom = 2 * c.tp + c.fp + c.fn;
    total += denom > 0 ? 2 * c.tp / denom : 0.0;
  }
  return 100.0 * total / static_cast<double>(gold_types.size());
}

double score_avg(const ScoreMatrix& r) {
  if (r.n_tasks() == 0 || !r.complete()) throw MetricError("score_avg: incomplete score matrix");
  const auto last = r.row(r.n_tasks() - 1);
  double s = 0.0;
  for (double v : last) s += v;
  return s / static_cast<double>(last.size());
}

double lca(const ScoreMatrix& r, LcaMode mode) {
  if (r.n_tasks() == 0 || !r.complete()) throw MetricError("lca: incomplete score matrix");
  const int t = r.n_tasks();
  double area = 0.0;
  for (int i = 0; i < t; ++i) {
    const int width = mode == LcaMode::all_tasks ? t : i + 1;
    double z = 0.0;
    for (int j = 0; j < width; ++j) z += r.at(i, j);
    area += z / width;
  }
  return area / t;
}

double dist_n(std::span<const std::vector<std::string>> utterances, int n) {
  if (n < 1) throw MetricError("dist_n: n must be >= 1");
  if (utterances.empty()) throw MetricError("dist_n: empty corpus");
  std::set<std::vector<std::string>> unique;
  std::size_t total = 0;
  for (const auto& u : utterances) {
    if (u.size() < static_cast<std::size_t>(n)) continue;
    for (std::size_t i = 0; i + static_cast<std::size_t>(n) <= u.size(); ++i) {
      unique.emplace(u.begin() + static_cast<std::ptrdiff_t>(i), u.begin() + static_cast<std::ptrdiff_t>(i) + n);
      ++total;
    }
  }
  return total == 0 ? 0.0 : static_cast<double>(unique.size()) / static_cast<double>(total);
}

}  // namespace pcll
