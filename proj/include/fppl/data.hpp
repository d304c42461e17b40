#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "fppl/tensor.hpp"

namespace fppl {

// One image with its class label. Membership in Dataset::train or
// Dataset::test encodes the split.
struct Sample {
  Vec pixels;  // flattened channels*side*side, values in [0, 1]
  int label = 0;
};

struct Dataset {
  int num_classes = 0;
  int channels = 1;
  int side = 8;
  int train_per_class = 0;
  int test_per_class = 0;
  double probe_accuracy = 0.0;  // generator self-check result
  std::vector<Sample> train;
  std::vector<Sample> test;

  int image_dim() const { return channels * side * side; }
  // Per-class ascending train-sample indices.
  std::vector<std::vector<int>> train_indices_by_class() const;
  std::uint64_t checksum() const;
};

// Seeded synthetic benchmark: each class is a template image drawn uniformly
// in [0,1]; samples add Gaussian noise (sigma = 0.1) and clip back to [0,1].
// Runs a nearest-centroid linear probe on raw pixels as a separability
// self-check and stores its accuracy (must reach `min_probe_accuracy`).
Dataset generate_synthetic_dataset(int num_classes, int train_per_class,
                                   int test_per_class, int channels, int side,
                                   std::uint64_t seed,
                                   double min_probe_accuracy = 0.95);

// Seeded permutation of class ids chunked into `tasks` equal, disjoint,
// covering sets (each sorted ascending). Throws if tasks does not divide
// num_classes.
std::vector<std::vector<int>> split_tasks(int num_classes, int tasks,
                                          std::uint64_t seed);

// Label-skew partition of one task's train samples across clients: for each
// class an independent Dirichlet(beta) proportion vector over clients, with
// largest-remainder rounding. The whole task assignment is redrawn (up to
// `max_retries`) until every client holds at least one sample; otherwise
// throws advising larger shards. `class_indices[c]` lists the task's train
// indices of its c-th class, ascending. Returned shards are ascending.
std::vector<std::vector<int>> dirichlet_partition(
    const std::vector<std::vector<int>>& class_indices, int clients,
    double beta, std::uint64_t seed, int max_retries = 100);

// Deterministic skew-free partition: each class's samples dealt round-robin
// over clients, so every client holds every task class. Used by the
// transmission-accounting check, which needs each client to upload a
// prototype for every task class.
std::vector<std::vector<int>> pinned_partition(
    const std::vector<std::vector<int>>& class_indices, int clients);

// Binary dataset cache: shape header + little-endian 64-bit floats + labels.
void save_dataset_cache(const std::string& path, const Dataset& ds);
Dataset load_dataset_cache(const std::string& path);

}  // namespace fppl
