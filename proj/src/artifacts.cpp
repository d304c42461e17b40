#include "fppl/artifacts.hpp"

#include <algorithm>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>

#include <nlohmann/json.hpp>

namespace fppl {

namespace {

constexpr std::uint64_t kTensorMagic = 0x534e545050460001ULL;

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
  std::memcpy(&v, &d, 8);
  put_u64(out, v);
}

double get_f64(std::istream& in) {
  const std::uint64_t v = get_u64(in);
  double d;
  std::memcpy(&d, &v, 8);
  return d;
}

// Shortest-round-trip style formatting for CSV/JSON doubles.
std::string fmt_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

}  // namespace

void ensure_directory(const std::string& path) {
  std::error_code ec;
  std::filesystem::create_directories(path, ec);
  if (ec) throw std::runtime_error("cannot create directory " + path + ": " + ec.message());
}

void write_tensor_file(const std::string& path, const std::vector<NamedTensor>& tensors) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open " + path + " for writing");
  put_u64(out, kTensorMagic);
  put_u64(out, tensors.size());
  for (const NamedTensor& t : tensors) {
    put_u64(out, t.name.size());
    out.write(t.name.data(), static_cast<std::streamsize>(t.name.size()));
    put_u64(out, static_cast<std::uint64_t>(t.value.rows()));
    put_u64(out, static_cast<std::uint64_t>(t.value.cols()));
    for (Eigen::Index r = 0; r < t.value.rows(); ++r) {
      for (Eigen::Index c = 0; c < t.value.cols(); ++c) put_f64(out, t.value(r, c));
    }
  }
  if (!out) throw std::runtime_error("write failed for " + path);
}

std::vector<NamedTensor> read_tensor_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path);
  if (get_u64(in) != kTensorMagic) throw std::runtime_error("bad tensor-file magic in " + path);
  const std::uint64_t count = get_u64(in);
  std::vector<NamedTensor> out(count);
  for (NamedTensor& t : out) {
    const std::uint64_t len = get_u64(in);
    t.name.resize(len);
    in.read(t.name.data(), static_cast<std::streamsize>(len));
    const auto rows = static_cast<Eigen::Index>(get_u64(in));
    const auto cols = static_cast<Eigen::Index>(get_u64(in));
    t.value.resize(rows, cols);
    for (Eigen::Index r = 0; r < rows; ++r) {
      for (Eigen::Index c = 0; c < cols; ++c) t.value(r, c) = get_f64(in);
    }
  }
  if (!in) throw std::runtime_error("truncated tensor file " + path);
  return out;
}

void write_metrics_csv(const std::string& path, const std::vector<RoundStats>& rounds) {
  std::ostringstream out;
  out << "round,task,round_in_task,train_loss,ce_loss,ur_loss,debias_loss,"
         "upload_floats_total,upload_floats_client_min,upload_floats_client_max,"
         "broadcast_floats_per_client\n";
  for (const RoundStats& r : rounds) {
    long long up_min = 0, up_max = 0;
    if (!r.upload_floats.empty()) {
      up_min = *std::min_element(r.upload_floats.begin(), r.upload_floats.end());
      up_max = *std::max_element(r.upload_floats.begin(), r.upload_floats.end());
    }
    out << r.round_global << ',' << r.task << ',' << r.round_in_task << ','
        << fmt_double(r.train_loss) << ',' << fmt_double(r.train_ce) << ','
        << fmt_double(r.train_ur) << ',' << fmt_double(r.debias_loss) << ','
        << r.upload_floats_total << ',' << up_min << ',' << up_max << ','
        << r.broadcast_floats << '\n';
  }
  write_text_file(path, out.str());
}

void write_accuracy_matrix_csv(const std::string& path, const AccuracyMatrix& m) {
  std::ostringstream out;
  out << "task,stage,accuracy\n";
  for (int t = 1; t <= m.tasks(); ++t) {
    for (int i = 1; i <= t; ++i) {
      out << i << ',' << t << ',' << fmt_double(m.at(i, t)) << '\n';
    }
  }
  write_text_file(path, out.str());
}

void write_partition_csv(const std::string& path, const std::vector<std::vector<int>>& shards,
                         const Dataset& ds) {
  std::ostringstream out;
  out << "client,class,count\n";
  for (size_t k = 0; k < shards.size(); ++k) {
    std::map<int, int> counts;
    for (int idx : shards[k]) ++counts[ds.train[static_cast<size_t>(idx)].label];
    for (const auto& [cls, n] : counts) {
      out << k << ',' << cls << ',' << n << '\n';
    }
  }
  write_text_file(path, out.str());
}

std::string summary_json(const RunResult& res) {
  nlohmann::json j;
  j["seed"] = res.seed;
  j["avg_accuracy"] = res.accuracy.average;
  j["final_accuracy"] = res.accuracy.per_stage.back();
  j["per_stage_accuracy"] = res.accuracy.per_stage;
  j["avg_forgetting"] = res.forgetting.value;
  j["forgetting_degenerate"] = res.forgetting.degenerate;
  j["comm_floats"] = res.comm_formula;
  j["extra_storage_floats"] = res.extra_storage_formula;
  j["tunable_params"] = res.tunable_params_formula;
  j["tunable_params_runtime"] = res.tunable_params_runtime;
  j["total_upload_floats"] = res.total_upload_floats;
  j["total_broadcast_floats"] = res.total_broadcast_floats;
  j["dataset_probe_accuracy"] = res.dataset_probe_accuracy;
  j["backbone_checksum"] = res.backbone_checksum;
  j["dataset_checksum"] = res.dataset_checksum;
  j["frozen_prompt_checksum"] = res.frozen_checksum_final;
  return j.dump(2) + "\n";
}

void write_text_file(const std::string& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open " + path + " for writing");
  out.write(content.data(), static_cast<std::streamsize>(content.size()));
  if (!out) throw std::runtime_error("write failed for " + path);
}

std::string read_text_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_checkpoint(const std::string& path, const FederationState& state) {
  std::vector<NamedTensor> tensors;
  tensors.push_back({"psi", state.w.psi.w});
  for (size_t l = 0; l < state.w.prompt.layers.size(); ++l) {
    tensors.push_back({"prompt/layer_" + std::to_string(state.w.prompt.first_layer +
                                                        static_cast<int>(l)),
                       state.w.prompt.layers[l]});
  }
  for (size_t f = 0; f < state.frozen.size(); ++f) {
    const PromptSet& p = state.frozen[f];
    for (size_t l = 0; l < p.layers.size(); ++l) {
      tensors.push_back({"frozen/task_" + std::to_string(f + 1) + "/layer_" +
                             std::to_string(p.first_layer + static_cast<int>(l)),
                         p.layers[l]});
    }
  }
  tensors.push_back({"theta/weight", state.w.theta.weight});
  tensors.push_back({"theta/bias", state.w.theta.bias});
  for (const auto& [cls, mean] : state.g.means) {
    tensors.push_back({"global_prototype/class_" + std::to_string(cls), mean});
  }
  for (const LocalPrototypeSet& set : state.pool.entries()) {
    for (const auto& [cls, mean] : set.means) {
      tensors.push_back({"pool/task_" + std::to_string(set.task) + "/client_" +
                             std::to_string(set.client_id) + "/class_" + std::to_string(cls),
                         mean});
    }
  }
  write_tensor_file(path, tensors);
}

}  // namespace fppl
