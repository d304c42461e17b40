#pragma once

#include <map>
#include <set>
#include <span>
#include <utility>
#include <vector>

#include "fppl/tensor.hpp"

namespace fppl {

// Per-class mean feature vectors of one client's task shard.
struct LocalPrototypeSet {
  int client_id = 0;
  int task = 0;
  std::map<int, Vec> means;    // class id -> mean feature (ascending order)
  std::map<int, int> counts;   // class id -> sample count

  bool empty() const { return means.empty(); }
  size_t class_count() const { return means.size(); }
};

struct GlobalPrototypeSet {
  std::map<int, Vec> means;

  bool contains(int cls) const { return means.count(cls) != 0; }
  const Vec& at(int cls) const { return means.at(cls); }
  bool empty() const { return means.empty(); }
  size_t size() const { return means.size(); }
};

// Append-only store of final-round local prototype sets, keyed by
// (task, client). Entries never change once merged.
class PrototypePool {
 public:
  // Adds each non-empty upload for the given task. Throws on a second
  // merge for the same task.
  void merge(int task, const std::vector<LocalPrototypeSet>& final_uploads);

  const std::vector<LocalPrototypeSet>& entries() const { return entries_; }
  size_t set_count() const { return entries_.size(); }
  size_t class_entry_count() const;
  // Pool memory in doubles: embed_dim * stored class entries.
  size_t float_count(int embed_dim) const { return class_entry_count() * static_cast<size_t>(embed_dim); }
  bool merged(int task) const { return merged_tasks_.count(task) != 0; }

 private:
  std::vector<LocalPrototypeSet> entries_;
  std::set<int> merged_tasks_;
};

// Arithmetic per-class mean of the given features; classes with no samples
// are absent from the result.
LocalPrototypeSet local_prototypes(std::span<const std::pair<Vec, int>> features, int client_id,
                                   int task);

// Unweighted mean over the clients that uploaded each class (sample counts
// are deliberately ignored).
GlobalPrototypeSet global_prototypes(const std::vector<LocalPrototypeSet>& uploads);

}  // namespace fppl
