#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <set>
#include <stdexcept>
#include <vector>

#include "fppl/data.hpp"

using namespace fppl;

namespace {

std::vector<std::vector<int>> numbered_classes(int classes, int per_class) {
  std::vector<std::vector<int>> out(static_cast<size_t>(classes));
  int next = 0;
  for (auto& c : out) {
    for (int i = 0; i < per_class; ++i) c.push_back(next++);
  }
  return out;
}

// Every sample index appears in exactly one shard.
void check_partition_contract(const std::vector<std::vector<int>>& shards,
                              const std::vector<std::vector<int>>& class_indices) {
  std::set<int> all;
  size_t total = 0;
  for (const auto& c : class_indices) {
    all.insert(c.begin(), c.end());
    total += c.size();
  }
  std::set<int> seen;
  size_t held = 0;
  for (const auto& s : shards) {
    CHECK(std::is_sorted(s.begin(), s.end()));
    for (int i : s) {
      CHECK(all.count(i) == 1);
      CHECK(seen.insert(i).second);  // disjoint
    }
    held += s.size();
  }
  CHECK(held == total);  // covering
}

}  // namespace

TEST_CASE("synthetic dataset counting and value range") {
  Dataset ds = generate_synthetic_dataset(20, 30, 10, 1, 8, 2023);
  CHECK(ds.train.size() == 600);
  CHECK(ds.test.size() == 200);
  CHECK(ds.image_dim() == 64);
  CHECK(ds.probe_accuracy >= 0.95);

  double lo = 1.0, hi = 0.0;
  for (const Sample& s : ds.train) {
    CHECK(s.pixels.size() == 64);
    lo = std::min(lo, s.pixels.minCoeff());
    hi = std::max(hi, s.pixels.maxCoeff());
  }
  CHECK(lo >= 0.0);
  CHECK(hi <= 1.0);

  auto by_class = ds.train_indices_by_class();
  REQUIRE(by_class.size() == 20);
  for (const auto& idxs : by_class) {
    CHECK(idxs.size() == 30);
    CHECK(std::is_sorted(idxs.begin(), idxs.end()));
  }
}

TEST_CASE("synthetic dataset determinism") {
  Dataset a = generate_synthetic_dataset(6, 5, 3, 1, 8, 77);
  Dataset b = generate_synthetic_dataset(6, 5, 3, 1, 8, 77);
  Dataset c = generate_synthetic_dataset(6, 5, 3, 1, 8, 78);
  CHECK(a.checksum() == b.checksum());
  CHECK(a.checksum() != c.checksum());
  CHECK(a.probe_accuracy == b.probe_accuracy);
}

TEST_CASE("synthetic dataset rejects bad sizes") {
  CHECK_THROWS_AS(generate_synthetic_dataset(0, 5, 3, 1, 8, 1), std::invalid_argument);
  CHECK_THROWS_AS(generate_synthetic_dataset(6, 0, 3, 1, 8, 1), std::invalid_argument);
}

TEST_CASE("task split: disjoint sorted cover") {
  auto tasks = split_tasks(20, 5, 2023);
  REQUIRE(tasks.size() == 5);
  std::set<int> seen;
  for (const auto& t : tasks) {
    CHECK(t.size() == 4);
    CHECK(std::is_sorted(t.begin(), t.end()));
    for (int c : t) CHECK(seen.insert(c).second);
  }
  CHECK(seen.size() == 20);
  CHECK(*seen.begin() == 0);
  CHECK(*seen.rbegin() == 19);

  auto again = split_tasks(20, 5, 2023);
  CHECK(again == tasks);
  CHECK(split_tasks(20, 5, 2024) != tasks);
}

TEST_CASE("task split: degenerate and invalid shapes") {
  auto one = split_tasks(7, 1, 9);
  REQUIRE(one.size() == 1);
  CHECK(one[0] == std::vector<int>{0, 1, 2, 3, 4, 5, 6});

  CHECK_THROWS_AS(split_tasks(10, 3, 9), std::invalid_argument);
}

TEST_CASE("dirichlet partition: contract and determinism") {
  auto classes = numbered_classes(4, 25);
  auto shards = dirichlet_partition(classes, 4, 0.5, 99);
  REQUIRE(shards.size() == 4);
  check_partition_contract(shards, classes);
  for (const auto& s : shards) CHECK_FALSE(s.empty());

  CHECK(dirichlet_partition(classes, 4, 0.5, 99) == shards);
  CHECK(dirichlet_partition(classes, 4, 0.5, 100) != shards);
}

TEST_CASE("dirichlet partition: near-IID limit at huge concentration") {
  // beta = 1e6 behaves like a uniform split: every client's share of every
  // class stays within 20% of n / K.
  auto classes = numbered_classes(4, 100);
  auto shards = dirichlet_partition(classes, 4, 1e6, 31);
  check_partition_contract(shards, classes);
  for (const auto& shard : shards) {
    for (int cls = 0; cls < 4; ++cls) {
      const int lo = cls * 100, hi = lo + 100;
      const auto n = std::count_if(shard.begin(), shard.end(),
                                   [&](int i) { return i >= lo && i < hi; });
      CHECK(n >= 20);
      CHECK(n <= 30);
    }
  }
}

TEST_CASE("dirichlet partition: lower concentration means stronger skew") {
  auto classes = numbered_classes(4, 100);
  auto max_share = [&](double beta) {
    double acc = 0.0;
    int n = 0;
    for (uint64_t seed : {1ULL, 2ULL, 3ULL, 4ULL, 5ULL}) {
      auto shards = dirichlet_partition(classes, 4, beta, seed);
      for (int cls = 0; cls < 4; ++cls) {
        const int lo = cls * 100, hi = lo + 100;
        long best = 0;
        for (const auto& shard : shards) {
          best = std::max<long>(best, std::count_if(shard.begin(), shard.end(),
                                                    [&](int i) { return i >= lo && i < hi; }));
        }
        acc += static_cast<double>(best) / 100.0;
        ++n;
      }
    }
    return acc / n;
  };
  const double skewed = max_share(0.05);
  const double mild = max_share(1.0);
  CHECK(skewed > mild + 0.1);
}

TEST_CASE("dirichlet partition: single client and retry exhaustion") {
  auto classes = numbered_classes(3, 4);
  auto shards = dirichlet_partition(classes, 1, 0.5, 5);
  REQUIRE(shards.size() == 1);
  CHECK(shards[0].size() == 12);

  // Two samples can never reach eight clients; the redraw loop must give up
  // with advice rather than spin forever.
  auto tiny = numbered_classes(1, 2);
  CHECK_THROWS_AS(dirichlet_partition(tiny, 8, 0.5, 5, 20), std::runtime_error);

  CHECK_THROWS_AS(dirichlet_partition(classes, 0, 0.5, 5), std::invalid_argument);
  CHECK_THROWS_AS(dirichlet_partition(classes, 2, 0.0, 5), std::invalid_argument);
}

TEST_CASE("pinned partition: every client holds every class") {
  auto classes = numbered_classes(4, 30);
  auto shards = pinned_partition(classes, 4);
  check_partition_contract(shards, classes);
  for (const auto& shard : shards) {
    for (int cls = 0; cls < 4; ++cls) {
      const int lo = cls * 30, hi = lo + 30;
      const auto n = std::count_if(shard.begin(), shard.end(),
                                   [&](int i) { return i >= lo && i < hi; });
      CHECK(n >= 7);  // 30 dealt round-robin over 4: 7 or 8 each
      CHECK(n <= 8);
    }
  }

  auto sparse = numbered_classes(1, 3);
  CHECK_THROWS_AS(pinned_partition(sparse, 4), std::invalid_argument);
}

TEST_CASE("dataset cache round trip") {
  namespace fs = std::filesystem;
  const fs::path path = fs::temp_directory_path() / "fppl_test_dataset_cache.bin";
  Dataset ds = generate_synthetic_dataset(6, 5, 3, 1, 8, 123);
  save_dataset_cache(path.string(), ds);

  Dataset back = load_dataset_cache(path.string());
  CHECK(back.num_classes == ds.num_classes);
  CHECK(back.channels == ds.channels);
  CHECK(back.side == ds.side);
  CHECK(back.train_per_class == ds.train_per_class);
  CHECK(back.test_per_class == ds.test_per_class);
  CHECK(back.probe_accuracy == ds.probe_accuracy);
  CHECK(back.checksum() == ds.checksum());
  fs::remove(path);

  CHECK_THROWS_AS(load_dataset_cache((fs::temp_directory_path() / "fppl_no_such.bin").string()),
                  std::runtime_error);

  // A file with the wrong magic is rejected.
  const fs::path bad = fs::temp_directory_path() / "fppl_test_bad_magic.bin";
  {
    std::ofstream out(bad, std::ios::binary);
    const char junk[16] = {0};
    out.write(junk, sizeof(junk));
  }
  CHECK_THROWS_AS(load_dataset_cache(bad.string()), std::runtime_error);
  fs::remove(bad);
}
