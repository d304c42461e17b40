#pragma once

#include <cstdint>
#include <vector>

#include "fppl/backbone.hpp"
#include "fppl/tensor.hpp"

namespace fppl {

// Coslinear map: one weight column per seen task, scored against the query
// by cosine similarity.
struct CoslinearWeights {
  Mat w;  // embed_dim x task_count

  int task_count() const { return static_cast<int>(w.cols()); }
};

// Task-specific prompt store: one frozen set per completed task plus the
// tunable set of the current task. Frozen sets are reachable only by const
// reference and never change after a transition.
class PromptBank {
 public:
  PromptBank() = default;
  PromptBank(PromptSet initial, int task_index = 1);
  // Rebuilds a bank from an already-frozen history plus the live set; the
  // task index becomes frozen.size() + 1.
  PromptBank(std::vector<PromptSet> frozen, PromptSet current);

  int task_index() const { return task_index_; }
  const std::vector<PromptSet>& frozen() const { return frozen_; }
  const PromptSet& current() const { return current_; }
  PromptSet& current() { return current_; }
  void set_current(PromptSet p) { current_ = std::move(p); }

  // prompt set for task i in 1..task_index (frozen sets, then current).
  const PromptSet& task_prompt(int i) const;

  // Freezes the current set, re-seeds the new current as a copy of it and
  // bumps the task index. Throws if invoked twice for the same target task.
  void advance(int new_task);

  uint64_t frozen_checksum() const;

 private:
  std::vector<PromptSet> frozen_;
  PromptSet current_;
  int task_index_ = 1;
};

// Checksum of a bare frozen-prompt list, defined identically to
// PromptBank::frozen_checksum so server and client replicas can be compared.
uint64_t frozen_list_checksum(const std::vector<PromptSet>& frozen);

// Cosine similarity between the query and every column; entries in [-1, 1].
// Throws on a zero query or a zero column (degenerate cosine).
Vec coslinear_logits(const CoslinearWeights& psi, const Vec& query);

// Numerically stable softmax (max subtraction).
Vec softmax(const Vec& logits);

// Softmax-weighted sum of all task prompts, one weight per task.
PromptSet fuse(const PromptBank& bank, const Vec& logits);

// Grows psi by one column for the new task: a copy of the last column plus
// seeded noise so all clients derive the identical column.
void grow_coslinear(CoslinearWeights& psi, uint64_t noise_seed, double noise_scale = 1e-3);

}  // namespace fppl
