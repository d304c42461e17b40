#pragma once

#include <cmath>
#include <vector>

#include "fppl/tensor.hpp"

namespace fppl {

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// Adam over a fixed set of registered tensors. Call begin_step() once per
// optimization step, then apply() for each tensor.
class Adam {
 public:
  explicit Adam(const AdamConfig& cfg) : cfg_(cfg) {}

  int register_size(Eigen::Index n) {
    slots_.push_back({Eigen::ArrayXd::Zero(n), Eigen::ArrayXd::Zero(n)});
    return static_cast<int>(slots_.size()) - 1;
  }

  void begin_step() { ++t_; }

  void apply(int slot, double* param, const double* grad, Eigen::Index n) {
    Slot& s = slots_[static_cast<size_t>(slot)];
    const double bc1 = 1.0 - std::pow(cfg_.beta1, t_);
    const double bc2 = 1.0 - std::pow(cfg_.beta2, t_);
    for (Eigen::Index i = 0; i < n; ++i) {
      s.m(i) = cfg_.beta1 * s.m(i) + (1.0 - cfg_.beta1) * grad[i];
      s.v(i) = cfg_.beta2 * s.v(i) + (1.0 - cfg_.beta2) * grad[i] * grad[i];
      const double mhat = s.m(i) / bc1;
      const double vhat = s.v(i) / bc2;
      param[i] -= cfg_.lr * mhat / (std::sqrt(vhat) + cfg_.eps);
    }
  }

  void apply(int slot, Mat& param, const Mat& grad) {
    apply(slot, param.data(), grad.data(), param.size());
  }

  void apply(int slot, Vec& param, const Vec& grad) {
    apply(slot, param.data(), grad.data(), param.size());
  }

 private:
  struct Slot {
    Eigen::ArrayXd m, v;
  };
  AdamConfig cfg_;
  int t_ = 0;
  std::vector<Slot> slots_;
};

}  // namespace fppl
