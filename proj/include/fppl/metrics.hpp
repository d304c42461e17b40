#pragma once

#include <functional>
#include <span>
#include <vector>

#include "fppl/data.hpp"
#include "fppl/tensor.hpp"

namespace fppl {

// Lower-triangular accuracy record: at(i, t) is accuracy on task i's test set
// after learning task t, 1 <= i <= t <= T. Filled column-by-column as tasks
// complete.
class AccuracyMatrix {
 public:
  explicit AccuracyMatrix(int tasks);

  int tasks() const { return tasks_; }
  void set(int task_i, int stage_t, double accuracy);
  double at(int task_i, int stage_t) const;
  bool is_set(int task_i, int stage_t) const;
  bool complete() const;

 private:
  int index(int task_i, int stage_t) const;
  int tasks_;
  std::vector<double> cells_;
  std::vector<char> filled_;
};

struct AccuracySummary {
  std::vector<double> per_stage;  // A_1..A_T
  double average = 0.0;           // mean of A_t over stages
};

// A_t = mean of column t's entries; average = mean of A_t. Throws if the
// matrix is incomplete.
AccuracySummary avg_accuracy(const AccuracyMatrix& m);

struct ForgettingResult {
  double value = 0.0;
  bool degenerate = false;  // true when T < 2 (forgetting undefined)
};

// Mean over tasks i < T of max over stages t in {i..T-1} of
// (at(i,t) - at(i,T)). Including t = i in the max keeps each task's term
// >= at(i,i) - at(i,T).
ForgettingResult avg_forgetting(const AccuracyMatrix& m);

// Index of the largest logit among `allowed` class ids; ties go to the
// lowest id. Throws if allowed is empty or out of range.
int masked_argmax(const Vec& logits, const std::vector<int>& allowed);

// Fraction of test samples whose masked argmax equals the label. The model is
// abstracted as a pixels -> logits function so evaluation stays decoupled
// from the federation types. Throws on an empty test set.
double evaluate_task(const std::function<Vec(const Vec&)>& logits_fn,
                     std::span<const Sample> test_set,
                     const std::vector<int>& seen_classes);

struct CostInputs {
  long long embed_dim = 0;     // D
  long long num_classes = 0;   // N_all
  long long tasks = 0;         // T
  long long prompt_len = 0;    // L_p
  long long insert_layers = 0; // M
};

// Per-client upload float count at the final task:
// D * (N_all + T + N_all/T + L_p*M) + N_all. Throws if T does not divide
// N_all or any input is non-positive.
long long comm_cost(const CostInputs& in);

// Extra client storage for retained frozen prompts: D * L_p * M * T.
long long extra_storage(const CostInputs& in);

// Tunable parameters excluding the classifier at the final task:
// D * (L_p*M + T).
long long tunable_param_count(const CostInputs& in);

}  // namespace fppl
