#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "fppl/backbone.hpp"
#include "fppl/federation.hpp"

namespace fppl {

// Benchmark shape and partition skew. Image geometry (channels, side) comes
// from the backbone config so the two can never disagree.
struct DataSpec {
  int num_classes = 20;
  int train_per_class = 30;
  int test_per_class = 10;
  double beta = 0.5;   // Dirichlet concentration; smaller = stronger skew
  bool pinned = false; // round-robin shards for transmission-formula checks
  std::string cache;   // optional dataset cache file ("" = regenerate)
};

struct RunSpec {
  std::string out_dir = "runs/desk";
  std::vector<std::uint64_t> seeds{2023, 2024, 2025};
  bool concurrent_clients = false;
  bool write_checkpoints = true;
};

struct ExperimentConfig {
  BackboneConfig backbone;
  Hyperparams fed;
  DataSpec data;
  AblationFlags flags;
  RunSpec run;

  void validate() const;

  // Flat dotted-key serialization; from_kv(to_kv(c)) reproduces c exactly
  // (doubles round-trip through %.17g).
  std::map<std::string, std::string> to_kv() const;
  static ExperimentConfig from_kv(const std::map<std::string, std::string>& kv);
};

// Reads a flat `key = value` file ('#' comments, quoted or bare strings,
// [a, b] lists for seeds). Throws with a line number on malformed input.
std::map<std::string, std::string> parse_config_file(const std::string& path);

// Applies `key=value` strings on top of a parsed map.
void apply_overrides(std::map<std::string, std::string>& kv,
                     const std::vector<std::string>& overrides);

ExperimentConfig load_config(const std::string& path,
                             const std::vector<std::string>& overrides = {});

}  // namespace fppl
