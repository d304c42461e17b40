#include "fppl/prototype.hpp"

#include <sstream>
#include <stdexcept>

namespace fppl {

LocalPrototypeSet local_prototypes(std::span<const std::pair<Vec, int>> features, int client_id,
                                   int task) {
  if (features.empty()) throw std::invalid_argument("local_prototypes: empty feature list");
  const Eigen::Index dim = features.front().first.size();
  LocalPrototypeSet out;
  out.client_id = client_id;
  out.task = task;
  for (const auto& [vec, cls] : features) {
    if (vec.size() != dim) throw std::invalid_argument("local_prototypes: feature dimension mismatch");
    auto [it, inserted] = out.means.try_emplace(cls, Vec::Zero(dim));
    it->second += vec;
    out.counts[cls] += 1;
  }
  for (auto& [cls, sum] : out.means) {
    sum /= static_cast<double>(out.counts.at(cls));
  }
  return out;
}

GlobalPrototypeSet global_prototypes(const std::vector<LocalPrototypeSet>& uploads) {
  GlobalPrototypeSet out;
  std::map<int, int> holders;
  for (const LocalPrototypeSet& up : uploads) {
    for (const auto& [cls, mean] : up.means) {
      auto [it, inserted] = out.means.try_emplace(cls, Vec::Zero(mean.size()));
      it->second += mean;
      holders[cls] += 1;
    }
  }
  for (auto& [cls, sum] : out.means) {
    sum /= static_cast<double>(holders.at(cls));
  }
  return out;
}

void PrototypePool::merge(int task, const std::vector<LocalPrototypeSet>& final_uploads) {
  if (merged_tasks_.count(task) != 0) {
    std::ostringstream os;
    os << "prototype pool: task " << task << " already merged";
    throw std::logic_error(os.str());
  }
  for (const LocalPrototypeSet& up : final_uploads) {
    if (!up.empty()) entries_.push_back(up);
  }
  merged_tasks_.insert(task);
}

size_t PrototypePool::class_entry_count() const {
  size_t n = 0;
  for (const LocalPrototypeSet& e : entries_) n += e.class_count();
  return n;
}

}  // namespace fppl
