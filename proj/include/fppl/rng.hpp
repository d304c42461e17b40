#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>

namespace fppl {

inline uint64_t splitmix64(uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

// Derives an independent seed stream from a master seed and a tag path.
// Streams are a pure function of (master, path), so results cannot depend
// on scheduling order.
inline uint64_t derive_seed(uint64_t master, std::initializer_list<uint64_t> path) {
  uint64_t s = splitmix64(master ^ 0x5bf0f1e6a31c39d1ULL);
  for (uint64_t tag : path) {
    s = splitmix64(s ^ splitmix64(tag));
  }
  return s;
}

inline std::mt19937_64 make_rng(uint64_t master, std::initializer_list<uint64_t> path) {
  return std::mt19937_64(derive_seed(master, path));
}

// Stream tags for the named randomness consumers of a run.
namespace stream {
constexpr uint64_t backbone = 1;
constexpr uint64_t dataset = 2;
constexpr uint64_t task_split = 3;
constexpr uint64_t partition = 4;
constexpr uint64_t init_psi = 5;
constexpr uint64_t init_prompt = 6;
constexpr uint64_t init_classifier = 7;
constexpr uint64_t psi_growth = 8;
constexpr uint64_t shuffle = 9;
}  // namespace stream

}  // namespace fppl
