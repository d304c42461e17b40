#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <cstring>

namespace fppl {

using Mat = Eigen::MatrixXd;
using Vec = Eigen::VectorXd;

// FNV-1a over raw little-endian doubles, row-major traversal. Used for the
// frozen-weight and frozen-prompt equality invariants, not for security.
class Checksum {
 public:
  void add(double v) {
    uint64_t bits;
    std::memcpy(&bits, &v, sizeof(bits));
    for (int i = 0; i < 8; ++i) {
      h_ ^= (bits >> (8 * i)) & 0xffULL;
      h_ *= 0x100000001b3ULL;
    }
  }

  void add_u64(uint64_t bits) {
    for (int i = 0; i < 8; ++i) {
      h_ ^= (bits >> (8 * i)) & 0xffULL;
      h_ *= 0x100000001b3ULL;
    }
  }

  void add(const Mat& m) {
    for (Eigen::Index r = 0; r < m.rows(); ++r) {
      for (Eigen::Index c = 0; c < m.cols(); ++c) {
        add(m(r, c));
      }
    }
  }

  void add(const Vec& v) {
    for (Eigen::Index i = 0; i < v.size(); ++i) {
      add(v(i));
    }
  }

  uint64_t value() const { return h_; }

 private:
  uint64_t h_ = 0xcbf29ce484222325ULL;
};

inline uint64_t checksum(const Mat& m) {
  Checksum c;
  c.add(m);
  return c.value();
}

inline uint64_t checksum(const Vec& v) {
  Checksum c;
  c.add(v);
  return c.value();
}

}  // namespace fppl
