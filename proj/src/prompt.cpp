#include "fppl/prompt.hpp"

#include <cmath>
#include <random>
#include <sstream>
#include <stdexcept>

namespace fppl {

PromptBank::PromptBank(PromptSet initial, int task_index)
    : current_(std::move(initial)), task_index_(task_index) {}

PromptBank::PromptBank(std::vector<PromptSet> frozen, PromptSet current)
    : frozen_(std::move(frozen)),
      current_(std::move(current)),
      task_index_(static_cast<int>(frozen_.size()) + 1) {}

const PromptSet& PromptBank::task_prompt(int i) const {
  if (i < 1 || i > task_index_) throw std::out_of_range("prompt bank: task index out of range");
  if (i == task_index_) return current_;
  return frozen_[static_cast<size_t>(i - 1)];
}

void PromptBank::advance(int new_task) {
  if (new_task != task_index_ + 1) {
    std::ostringstream os;
    os << "prompt bank: transition to task " << new_task << " requested at task " << task_index_
       << " (already advanced or out of order)";
    throw std::logic_error(os.str());
  }
  frozen_.push_back(current_);
  // current_ keeps its values: the new task's prompt starts from the
  // previous one.
  task_index_ = new_task;
}

uint64_t PromptBank::frozen_checksum() const { return frozen_list_checksum(frozen_); }

uint64_t frozen_list_checksum(const std::vector<PromptSet>& frozen) {
  Checksum c;
  for (const PromptSet& p : frozen) {
    for (const Mat& m : p.layers) c.add(m);
  }
  return c.value();
}

Vec coslinear_logits(const CoslinearWeights& psi, const Vec& query) {
  const double qn = query.norm();
  if (qn == 0.0) throw std::invalid_argument("coslinear: zero query vector");
  if (psi.w.rows() != query.size()) throw std::invalid_argument("coslinear: dimension mismatch");
  Vec out(psi.w.cols());
  for (Eigen::Index i = 0; i < psi.w.cols(); ++i) {
    const double cn = psi.w.col(i).norm();
    if (cn == 0.0) throw std::invalid_argument("coslinear: zero weight column");
    out(i) = query.dot(psi.w.col(i)) / (qn * cn);
  }
  return out;
}

Vec softmax(const Vec& logits) {
  Eigen::ArrayXd e = (logits.array() - logits.maxCoeff()).exp();
  return (e / e.sum()).matrix();
}

PromptSet fuse(const PromptBank& bank, const Vec& logits) {
  if (logits.size() != bank.task_index()) {
    throw std::invalid_argument("fuse: logit count does not match bank task count");
  }
  Vec weights = softmax(logits);
  PromptSet out = weights(0) * bank.task_prompt(1);
  for (int i = 2; i <= bank.task_index(); ++i) {
    PromptSet scaled = weights(i - 1) * bank.task_prompt(i);
    out += scaled;
  }
  return out;
}

void grow_coslinear(CoslinearWeights& psi, uint64_t noise_seed, double noise_scale) {
  const Eigen::Index d = psi.w.rows();
  const Eigen::Index t = psi.w.cols();
  std::mt19937_64 rng(noise_seed);
  std::uniform_real_distribution<double> dist(-noise_scale, noise_scale);
  Mat grown(d, t + 1);
  grown.leftCols(t) = psi.w;
  for (Eigen::Index i = 0; i < d; ++i) {
    grown(i, t) = psi.w(i, t - 1) + dist(rng);
  }
  psi.w = std::move(grown);
}

}  // namespace fppl
