#include "fppl/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>
#include <random>
#include <stdexcept>

#include "fppl/rng.hpp"

namespace fppl {

namespace {

// Nearest-centroid classification on raw pixels induces a linear decision
// rule, so its test accuracy is the generator's linear-probe self-check.
double nearest_centroid_probe(const Dataset& ds) {
  std::vector<Vec> centroid(static_cast<size_t>(ds.num_classes),
                            Vec::Zero(ds.image_dim()));
  std::vector<int> count(static_cast<size_t>(ds.num_classes), 0);
  for (const Sample& s : ds.train) {
    centroid[static_cast<size_t>(s.label)] += s.pixels;
    ++count[static_cast<size_t>(s.label)];
  }
  for (int c = 0; c < ds.num_classes; ++c) {
    centroid[static_cast<size_t>(c)] /= static_cast<double>(count[static_cast<size_t>(c)]);
  }
  int correct = 0;
  for (const Sample& s : ds.test) {
    int best = 0;
    double best_d = (s.pixels - centroid[0]).squaredNorm();
    for (int c = 1; c < ds.num_classes; ++c) {
      const double d = (s.pixels - centroid[static_cast<size_t>(c)]).squaredNorm();
      if (d < best_d) {
        best_d = d;
        best = c;
      }
    }
    if (best == s.label) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(ds.test.size());
}

void put_u64(std::ostream& out, std::uint64_t v) {
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
  out.write(reinterpret_cast<const char*>(b), 8);
}

std::uint64_t get_u64(std::istream& in) {
  unsigned char b[8];
  in.read(reinterpret_cast<char*>(b), 8);
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  return v;
}

void put_f64(std::ostream& out, double d) {
  std::uint64_t v;
  static_assert(sizeof(v) == sizeof(d));
  std::memcpy(&v, &d, 8);
  put_u64(out, v);
}

double get_f64(std::istream& in) {
  const std::uint64_t v = get_u64(in);
  double d;
  std::memcpy(&d, &v, 8);
  return d;
}

constexpr std::uint64_t kDatasetMagic = 0x53444c5050460001ULL;  // "FPPLDS" tag

}  // namespace

std::vector<std::vector<int>> Dataset::train_indices_by_class() const {
  std::vector<std::vector<int>> by_class(static_cast<size_t>(num_classes));
  for (int i = 0; i < static_cast<int>(train.size()); ++i) {
    by_class[static_cast<size_t>(train[static_cast<size_t>(i)].label)].push_back(i);
  }
  return by_class;
}

std::uint64_t Dataset::checksum() const {
  Checksum sum;
  sum.add_u64(static_cast<std::uint64_t>(num_classes));
  sum.add_u64(static_cast<std::uint64_t>(channels));
  sum.add_u64(static_cast<std::uint64_t>(side));
  for (const Sample& s : train) {
    sum.add_u64(static_cast<std::uint64_t>(s.label));
    sum.add(s.pixels);
  }
  for (const Sample& s : test) {
    sum.add_u64(static_cast<std::uint64_t>(s.label));
    sum.add(s.pixels);
  }
  return sum.value();
}

Dataset generate_synthetic_dataset(int num_classes, int train_per_class,
                                   int test_per_class, int channels, int side,
                                   std::uint64_t seed,
                                   double min_probe_accuracy) {
  if (num_classes <= 0 || train_per_class <= 0 || test_per_class <= 0 ||
      channels <= 0 || side <= 0) {
    throw std::invalid_argument("generate_synthetic_dataset: counts must be positive");
  }
  Dataset ds;
  ds.num_classes = num_classes;
  ds.channels = channels;
  ds.side = side;
  ds.train_per_class = train_per_class;
  ds.test_per_class = test_per_class;
  ds.train.reserve(static_cast<size_t>(num_classes) * static_cast<size_t>(train_per_class));
  ds.test.reserve(static_cast<size_t>(num_classes) * static_cast<size_t>(test_per_class));

  const int dim = ds.image_dim();
  for (int c = 0; c < num_classes; ++c) {
    // One stream per class: template first, then train samples, then test.
    auto rng = make_rng(seed, {stream::dataset, static_cast<std::uint64_t>(c)});
    std::uniform_real_distribution<double> unif(0.0, 1.0);
    std::normal_distribution<double> noise(0.0, 0.1);
    Vec tpl(dim);
    for (int i = 0; i < dim; ++i) tpl(i) = unif(rng);
    const auto draw = [&](std::vector<Sample>& out) {
      Sample s;
      s.label = c;
      s.pixels = tpl;
      for (int i = 0; i < dim; ++i) {
        s.pixels(i) = std::clamp(s.pixels(i) + noise(rng), 0.0, 1.0);
      }
      out.push_back(std::move(s));
    };
    for (int n = 0; n < train_per_class; ++n) draw(ds.train);
    for (int n = 0; n < test_per_class; ++n) draw(ds.test);
  }

  ds.probe_accuracy = nearest_centroid_probe(ds);
  if (ds.probe_accuracy < min_probe_accuracy) {
    throw std::runtime_error(
        "generate_synthetic_dataset: linear-probe self-check failed (" +
        std::to_string(ds.probe_accuracy) + " < " +
        std::to_string(min_probe_accuracy) + ")");
  }
  return ds;
}

std::vector<std::vector<int>> split_tasks(int num_classes, int tasks,
                                          std::uint64_t seed) {
  if (tasks <= 0 || num_classes <= 0) {
    throw std::invalid_argument("split_tasks: counts must be positive");
  }
  if (num_classes % tasks != 0) {
    throw std::invalid_argument("split_tasks: task count " + std::to_string(tasks) +
                                " does not divide class count " +
                                std::to_string(num_classes));
  }
  std::vector<int> perm(static_cast<size_t>(num_classes));
  std::iota(perm.begin(), perm.end(), 0);
  auto rng = make_rng(seed, {stream::task_split});
  std::shuffle(perm.begin(), perm.end(), rng);
  const int per_task = num_classes / tasks;
  std::vector<std::vector<int>> out(static_cast<size_t>(tasks));
  for (int t = 0; t < tasks; ++t) {
    out[static_cast<size_t>(t)].assign(perm.begin() + t * per_task,
                                       perm.begin() + (t + 1) * per_task);
    std::sort(out[static_cast<size_t>(t)].begin(), out[static_cast<size_t>(t)].end());
  }
  return out;
}

std::vector<std::vector<int>> dirichlet_partition(
    const std::vector<std::vector<int>>& class_indices, int clients,
    double beta, std::uint64_t seed, int max_retries) {
  if (clients < 1) throw std::invalid_argument("dirichlet_partition: need >= 1 client");
  if (!(beta > 0.0)) throw std::invalid_argument("dirichlet_partition: beta must be > 0");
  std::mt19937_64 rng(seed);
  std::gamma_distribution<double> gamma(beta, 1.0);

  for (int attempt = 0; attempt < max_retries; ++attempt) {
    std::vector<std::vector<int>> shards(static_cast<size_t>(clients));
    for (const std::vector<int>& idxs : class_indices) {
      const int n = static_cast<int>(idxs.size());
      if (n == 0) continue;
      // Dirichlet(beta) over clients via normalized gamma draws; redraw a
      // degenerate all-zero vector (possible underflow at tiny beta).
      std::vector<double> p(static_cast<size_t>(clients));
      double total = 0.0;
      do {
        total = 0.0;
        for (double& v : p) {
          v = gamma(rng);
          total += v;
        }
      } while (total <= 0.0);
      // Largest-remainder rounding of n * p_k; remainder ties go to the
      // lower client id.
      std::vector<int> take(static_cast<size_t>(clients));
      std::vector<std::pair<double, int>> rem;
      rem.reserve(static_cast<size_t>(clients));
      int assigned = 0;
      for (int k = 0; k < clients; ++k) {
        const double exact = n * p[static_cast<size_t>(k)] / total;
        take[static_cast<size_t>(k)] = static_cast<int>(std::floor(exact));
        assigned += take[static_cast<size_t>(k)];
        rem.emplace_back(exact - std::floor(exact), k);
      }
      std::sort(rem.begin(), rem.end(), [](const auto& a, const auto& b) {
        if (a.first != b.first) return a.first > b.first;
        return a.second < b.second;
      });
      for (int i = 0; i < n - assigned; ++i) {
        ++take[static_cast<size_t>(rem[static_cast<size_t>(i)].second)];
      }
      int pos = 0;
      for (int k = 0; k < clients; ++k) {
        for (int j = 0; j < take[static_cast<size_t>(k)]; ++j) {
          shards[static_cast<size_t>(k)].push_back(idxs[static_cast<size_t>(pos++)]);
        }
      }
    }
    const bool all_nonempty = std::all_of(shards.begin(), shards.end(),
                                          [](const auto& s) { return !s.empty(); });
    if (all_nonempty) {
      for (auto& s : shards) std::sort(s.begin(), s.end());
      return shards;
    }
  }
  throw std::runtime_error(
      "dirichlet_partition: could not give every client a sample after " +
      std::to_string(max_retries) +
      " redraws; increase samples per class or beta");
}

std::vector<std::vector<int>> pinned_partition(
    const std::vector<std::vector<int>>& class_indices, int clients) {
  if (clients < 1) throw std::invalid_argument("pinned_partition: need >= 1 client");
  std::vector<std::vector<int>> shards(static_cast<size_t>(clients));
  for (const std::vector<int>& idxs : class_indices) {
    if (static_cast<int>(idxs.size()) < clients) {
      throw std::invalid_argument(
          "pinned_partition: class has fewer samples than clients");
    }
    for (int j = 0; j < static_cast<int>(idxs.size()); ++j) {
      shards[static_cast<size_t>(j % clients)].push_back(idxs[static_cast<size_t>(j)]);
    }
  }
  for (auto& s : shards) std::sort(s.begin(), s.end());
  return shards;
}

void save_dataset_cache(const std::string& path, const Dataset& ds) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("save_dataset_cache: cannot open " + path);
  put_u64(out, kDatasetMagic);
  put_u64(out, static_cast<std::uint64_t>(ds.num_classes));
  put_u64(out, static_cast<std::uint64_t>(ds.channels));
  put_u64(out, static_cast<std::uint64_t>(ds.side));
  put_u64(out, static_cast<std::uint64_t>(ds.train_per_class));
  put_u64(out, static_cast<std::uint64_t>(ds.test_per_class));
  put_f64(out, ds.probe_accuracy);
  const auto dump = [&](const std::vector<Sample>& part) {
    put_u64(out, static_cast<std::uint64_t>(part.size()));
    for (const Sample& s : part) {
      put_u64(out, static_cast<std::uint64_t>(s.label));
      for (int i = 0; i < s.pixels.size(); ++i) put_f64(out, s.pixels(i));
    }
  };
  dump(ds.train);
  dump(ds.test);
  if (!out) throw std::runtime_error("save_dataset_cache: write failed for " + path);
}

Dataset load_dataset_cache(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("load_dataset_cache: cannot open " + path);
  if (get_u64(in) != kDatasetMagic) {
    throw std::runtime_error("load_dataset_cache: bad magic in " + path);
  }
  Dataset ds;
  ds.num_classes = static_cast<int>(get_u64(in));
  ds.channels = static_cast<int>(get_u64(in));
  ds.side = static_cast<int>(get_u64(in));
  ds.train_per_class = static_cast<int>(get_u64(in));
  ds.test_per_class = static_cast<int>(get_u64(in));
  ds.probe_accuracy = get_f64(in);
  const int dim = ds.image_dim();
  const auto slurp = [&](std::vector<Sample>& part) {
    const auto n = get_u64(in);
    part.resize(n);
    for (auto& s : part) {
      s.label = static_cast<int>(get_u64(in));
      s.pixels.resize(dim);
      for (int i = 0; i < dim; ++i) s.pixels(i) = get_f64(in);
    }
  };
  slurp(ds.train);
  slurp(ds.test);
  if (!in) throw std::runtime_error("load_dataset_cache: truncated file " + path);
  return ds;
}

}  // namespace fppl
