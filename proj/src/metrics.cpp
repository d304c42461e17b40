#include "fppl/metrics.hpp"

#include <algorithm>
#include <stdexcept>
#include <string>

namespace fppl {

AccuracyMatrix::AccuracyMatrix(int tasks) : tasks_(tasks) {
  if (tasks < 1) throw std::invalid_argument("AccuracyMatrix: need >= 1 task");
  const size_t n = static_cast<size_t>(tasks) * static_cast<size_t>(tasks + 1) / 2;
  cells_.assign(n, 0.0);
  filled_.assign(n, 0);
}

int AccuracyMatrix::index(int task_i, int stage_t) const {
  if (task_i < 1 || stage_t < task_i || stage_t > tasks_) {
    throw std::out_of_range("AccuracyMatrix: entry (" + std::to_string(task_i) +
                            ", " + std::to_string(stage_t) +
                            ") outside the lower triangle");
  }
  return (stage_t - 1) * stage_t / 2 + (task_i - 1);
}

void AccuracyMatrix::set(int task_i, int stage_t, double accuracy) {
  if (accuracy < 0.0 || accuracy > 1.0) {
    throw std::invalid_argument("AccuracyMatrix: accuracy outside [0, 1]");
  }
  const int idx = index(task_i, stage_t);
  cells_[static_cast<size_t>(idx)] = accuracy;
  filled_[static_cast<size_t>(idx)] = 1;
}

double AccuracyMatrix::at(int task_i, int stage_t) const {
  const int idx = index(task_i, stage_t);
  if (!filled_[static_cast<size_t>(idx)]) {
    throw std::logic_error("AccuracyMatrix: entry (" + std::to_string(task_i) +
                           ", " + std::to_string(stage_t) + ") not filled");
  }
  return cells_[static_cast<size_t>(idx)];
}

bool AccuracyMatrix::is_set(int task_i, int stage_t) const {
  return filled_[static_cast<size_t>(index(task_i, stage_t))] != 0;
}

bool AccuracyMatrix::complete() const {
  return std::all_of(filled_.begin(), filled_.end(), [](char f) { return f != 0; });
}

AccuracySummary avg_accuracy(const AccuracyMatrix& m) {
  if (!m.complete()) throw std::logic_error("avg_accuracy: matrix incomplete");
  AccuracySummary out;
  out.per_stage.resize(static_cast<size_t>(m.tasks()));
  for (int t = 1; t <= m.tasks(); ++t) {
    double sum = 0.0;
    for (int i = 1; i <= t; ++i) sum += m.at(i, t);
    out.per_stage[static_cast<size_t>(t - 1)] = sum / t;
  }
  double total = 0.0;
  for (double a : out.per_stage) total += a;
  out.average = total / m.tasks();
  return out;
}

ForgettingResult avg_forgetting(const AccuracyMatrix& m) {
  if (m.tasks() < 2) return {0.0, true};
  if (!m.complete()) throw std::logic_error("avg_forgetting: matrix incomplete");
  const int T = m.tasks();
  double sum = 0.0;
  for (int i = 1; i <= T - 1; ++i) {
    double best = m.at(i, i) - m.at(i, T);
    for (int t = i + 1; t <= T - 1; ++t) {
      best = std::max(best, m.at(i, t) - m.at(i, T));
    }
    sum += best;
  }
  return {sum / (T - 1), false};
}

int masked_argmax(const Vec& logits, const std::vector<int>& allowed) {
  if (allowed.empty()) throw std::invalid_argument("masked_argmax: empty class set");
  int best = -1;
  double best_v = 0.0;
  for (int c : allowed) {
    if (c < 0 || c >= logits.size()) {
      throw std::out_of_range("masked_argmax: class id " + std::to_string(c) +
                              " outside logits of size " +
                              std::to_string(logits.size()));
    }
    // Strict > with ascending iteration keeps ties on the lowest id; allowed
    // sets are sorted below to make that hold for any input order.
    if (best < 0 || logits(c) > best_v) {
      best = c;
      best_v = logits(c);
    }
  }
  return best;
}

double evaluate_task(const std::function<Vec(const Vec&)>& logits_fn,
                     std::span<const Sample> test_set,
                     const std::vector<int>& seen_classes) {
  if (test_set.empty()) throw std::invalid_argument("evaluate_task: empty test set");
  std::vector<int> allowed = seen_classes;
  std::sort(allowed.begin(), allowed.end());
  int correct = 0;
  for (const Sample& s : test_set) {
    if (masked_argmax(logits_fn(s.pixels), allowed) == s.label) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(test_set.size());
}

namespace {
void check_positive(const CostInputs& in, bool need_divisible) {
  if (in.embed_dim <= 0 || in.num_classes <= 0 || in.tasks <= 0 ||
      in.prompt_len < 0 || in.insert_layers < 0) {
    throw std::invalid_argument("cost inputs must be positive (prompt terms >= 0)");
  }
  if (need_divisible && in.num_classes % in.tasks != 0) {
    throw std::invalid_argument("comm_cost: tasks (" + std::to_string(in.tasks) +
                                ") must divide classes (" +
                                std::to_string(in.num_classes) + ")");
  }
}
}  // namespace

long long comm_cost(const CostInputs& in) {
  check_positive(in, true);
  return in.embed_dim * (in.num_classes + in.tasks + in.num_classes / in.tasks +
                         in.prompt_len * in.insert_layers) +
         in.num_classes;
}

long long extra_storage(const CostInputs& in) {
  check_positive(in, false);
  return in.embed_dim * in.prompt_len * in.insert_layers * in.tasks;
}

long long tunable_param_count(const CostInputs& in) {
  check_positive(in, false);
  return in.embed_dim * (in.prompt_len * in.insert_layers + in.tasks);
}

}  // namespace fppl
