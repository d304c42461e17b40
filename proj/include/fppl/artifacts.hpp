#pragma once

#include <string>
#include <utility>
#include <vector>

#include "fppl/config.hpp"
#include "fppl/federation.hpp"

namespace fppl {

// Named-tensor container: magic, count, then per tensor a name, shape and
// row-major little-endian 64-bit floats. Vectors are stored as n x 1.
struct NamedTensor {
  std::string name;
  Mat value;
};

void write_tensor_file(const std::string& path, const std::vector<NamedTensor>& tensors);
std::vector<NamedTensor> read_tensor_file(const std::string& path);

void write_metrics_csv(const std::string& path, const std::vector<RoundStats>& rounds);

void write_accuracy_matrix_csv(const std::string& path, const AccuracyMatrix& m);

// One row per (client, class) with the sample count of that client's shard.
void write_partition_csv(const std::string& path,
                         const std::vector<std::vector<int>>& shards,
                         const Dataset& ds);

// Deterministic run summary (no timing); identical reruns produce identical
// bytes.
std::string summary_json(const RunResult& res);
void write_text_file(const std::string& path, const std::string& content);
std::string read_text_file(const std::string& path);

// Task checkpoint: tunables, frozen prompts, global prototypes and the pool.
void write_checkpoint(const std::string& path, const FederationState& state);

void ensure_directory(const std::string& path);

}  // namespace fppl
