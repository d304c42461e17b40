#include "fppl/config.hpp"

#include <cstdio>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace fppl {

namespace {

std::string trim(const std::string& s) {
  const auto a = s.find_first_not_of(" \t\r\n");
  if (a == std::string::npos) return "";
  const auto b = s.find_last_not_of(" \t\r\n");
  return s.substr(a, b - a + 1);
}

std::string fmt_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

std::string fmt_bool(bool v) { return v ? "true" : "false"; }

long long parse_int(const std::string& key, const std::string& v) {
  size_t pos = 0;
  long long out = 0;
  try {
    out = std::stoll(v, &pos);
  } catch (const std::exception&) {
    pos = 0;
  }
  if (pos != v.size() || v.empty()) {
    throw std::invalid_argument("config: key '" + key + "' needs an integer, got '" + v + "'");
  }
  return out;
}

std::uint64_t parse_u64(const std::string& key, const std::string& v) {
  size_t pos = 0;
  unsigned long long out = 0;
  try {
    out = std::stoull(v, &pos);
  } catch (const std::exception&) {
    pos = 0;
  }
  if (pos != v.size() || v.empty()) {
    throw std::invalid_argument("config: key '" + key + "' needs an unsigned integer, got '" + v +
                                "'");
  }
  return out;
}

double parse_double(const std::string& key, const std::string& v) {
  size_t pos = 0;
  double out = 0;
  try {
    out = std::stod(v, &pos);
  } catch (const std::exception&) {
    pos = 0;
  }
  if (pos != v.size() || v.empty()) {
    throw std::invalid_argument("config: key '" + key + "' needs a number, got '" + v + "'");
  }
  return out;
}

bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true") return true;
  if (v == "false") return false;
  throw std::invalid_argument("config: key '" + key + "' needs true or false, got '" + v + "'");
}

std::string parse_string(const std::string& v) {
  if (v.size() >= 2 && v.front() == '"' && v.back() == '"') return v.substr(1, v.size() - 2);
  return v;
}

std::vector<std::uint64_t> parse_seed_list(const std::string& key, const std::string& raw) {
  std::string v = trim(raw);
  if (v.size() >= 2 && v.front() == '[' && v.back() == ']') v = v.substr(1, v.size() - 2);
  std::vector<std::uint64_t> out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (item.empty()) continue;
    out.push_back(parse_u64(key, item));
  }
  if (out.empty()) {
    throw std::invalid_argument("config: key '" + key + "' needs at least one seed");
  }
  return out;
}

std::string seeds_to_string(const std::vector<std::uint64_t>& seeds) {
  std::string out = "[";
  for (size_t i = 0; i < seeds.size(); ++i) {
    if (i) out += ", ";
    out += std::to_string(seeds[i]);
  }
  return out + "]";
}

}  // namespace

void ExperimentConfig::validate() const {
  backbone.validate();
  fed.validate();
  if (data.num_classes < 1) throw std::invalid_argument("config: data.classes must be >= 1");
  if (data.train_per_class < 1 || data.test_per_class < 1) {
    throw std::invalid_argument("config: per-class sample counts must be >= 1");
  }
  if (!(data.beta > 0.0)) throw std::invalid_argument("config: data.beta must be > 0");
  if (data.num_classes % fed.tasks != 0) {
    throw std::invalid_argument("config: fed.tasks must divide data.classes");
  }
  if (run.seeds.empty()) throw std::invalid_argument("config: run.seeds must not be empty");
}

std::map<std::string, std::string> ExperimentConfig::to_kv() const {
  std::map<std::string, std::string> kv;
  kv["backbone.embed_dim"] = std::to_string(backbone.embed_dim);
  kv["backbone.layers"] = std::to_string(backbone.num_layers);
  kv["backbone.heads"] = std::to_string(backbone.num_heads);
  kv["backbone.patch_size"] = std::to_string(backbone.patch_size);
  kv["backbone.image_side"] = std::to_string(backbone.image_side);
  kv["backbone.channels"] = std::to_string(backbone.channels);
  kv["backbone.insert_start"] = std::to_string(backbone.insert_start);
  kv["backbone.insert_end"] = std::to_string(backbone.insert_end);
  kv["backbone.seed"] = std::to_string(backbone.seed);
  kv["fed.clients"] = std::to_string(fed.clients);
  kv["fed.tasks"] = std::to_string(fed.tasks);
  kv["fed.total_rounds"] = std::to_string(fed.total_rounds);
  kv["fed.local_epochs"] = std::to_string(fed.local_epochs);
  kv["fed.server_epochs"] = std::to_string(fed.server_epochs);
  kv["fed.batch_size"] = std::to_string(fed.batch_size);
  kv["fed.prompt_len"] = std::to_string(fed.prompt_len);
  kv["fed.lr"] = fmt_double(fed.lr);
  kv["fed.tau"] = fmt_double(fed.tau);
  kv["data.classes"] = std::to_string(data.num_classes);
  kv["data.train_per_class"] = std::to_string(data.train_per_class);
  kv["data.test_per_class"] = std::to_string(data.test_per_class);
  kv["data.beta"] = fmt_double(data.beta);
  kv["data.pinned"] = fmt_bool(data.pinned);
  kv["data.cache"] = "\"" + data.cache + "\"";
  kv["flags.use_ur"] = fmt_bool(flags.use_ur);
  kv["flags.use_fusion"] = fmt_bool(flags.use_fusion);
  kv["flags.use_debias"] = fmt_bool(flags.use_debias);
  kv["flags.use_pool"] = fmt_bool(flags.use_pool);
  kv["run.out"] = "\"" + run.out_dir + "\"";
  kv["run.seeds"] = seeds_to_string(run.seeds);
  kv["run.concurrent_clients"] = fmt_bool(run.concurrent_clients);
  kv["run.write_checkpoints"] = fmt_bool(run.write_checkpoints);
  return kv;
}

ExperimentConfig ExperimentConfig::from_kv(const std::map<std::string, std::string>& kv) {
  ExperimentConfig c;
  for (const auto& [key, raw] : kv) {
    const std::string v = trim(raw);
    if (key == "backbone.embed_dim") c.backbone.embed_dim = static_cast<int>(parse_int(key, v));
    else if (key == "backbone.layers") c.backbone.num_layers = static_cast<int>(parse_int(key, v));
    else if (key == "backbone.heads") c.backbone.num_heads = static_cast<int>(parse_int(key, v));
    else if (key == "backbone.patch_size") c.backbone.patch_size = static_cast<int>(parse_int(key, v));
    else if (key == "backbone.image_side") c.backbone.image_side = static_cast<int>(parse_int(key, v));
    else if (key == "backbone.channels") c.backbone.channels = static_cast<int>(parse_int(key, v));
    else if (key == "backbone.insert_start") c.backbone.insert_start = static_cast<int>(parse_int(key, v));
    else if (key == "backbone.insert_end") c.backbone.insert_end = static_cast<int>(parse_int(key, v));
    else if (key == "backbone.seed") c.backbone.seed = parse_u64(key, v);
    else if (key == "fed.clients") c.fed.clients = static_cast<int>(parse_int(key, v));
    else if (key == "fed.tasks") c.fed.tasks = static_cast<int>(parse_int(key, v));
    else if (key == "fed.total_rounds") c.fed.total_rounds = static_cast<int>(parse_int(key, v));
    else if (key == "fed.local_epochs") c.fed.local_epochs = static_cast<int>(parse_int(key, v));
    else if (key == "fed.server_epochs") c.fed.server_epochs = static_cast<int>(parse_int(key, v));
    else if (key == "fed.batch_size") c.fed.batch_size = static_cast<int>(parse_int(key, v));
    else if (key == "fed.prompt_len") c.fed.prompt_len = static_cast<int>(parse_int(key, v));
    else if (key == "fed.lr") c.fed.lr = parse_double(key, v);
    else if (key == "fed.tau") c.fed.tau = parse_double(key, v);
    else if (key == "data.classes") c.data.num_classes = static_cast<int>(parse_int(key, v));
    else if (key == "data.train_per_class") c.data.train_per_class = static_cast<int>(parse_int(key, v));
    else if (key == "data.test_per_class") c.data.test_per_class = static_cast<int>(parse_int(key, v));
    else if (key == "data.beta") c.data.beta = parse_double(key, v);
    else if (key == "data.pinned") c.data.pinned = parse_bool(key, v);
    else if (key == "data.cache") c.data.cache = parse_string(v);
    else if (key == "flags.use_ur") c.flags.use_ur = parse_bool(key, v);
    else if (key == "flags.use_fusion") c.flags.use_fusion = parse_bool(key, v);
    else if (key == "flags.use_debias") c.flags.use_debias = parse_bool(key, v);
    else if (key == "flags.use_pool") c.flags.use_pool = parse_bool(key, v);
    else if (key == "run.out") c.run.out_dir = parse_string(v);
    else if (key == "run.seeds") c.run.seeds = parse_seed_list(key, v);
    else if (key == "run.concurrent_clients") c.run.concurrent_clients = parse_bool(key, v);
    else if (key == "run.write_checkpoints") c.run.write_checkpoints = parse_bool(key, v);
    else throw std::invalid_argument("config: unknown key '" + key + "'");
  }
  return c;
}

std::map<std::string, std::string> parse_config_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("config: cannot open " + path);
  std::map<std::string, std::string> kv;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    std::string s = trim(line);
    if (s.empty() || s.front() == '#') continue;
    const auto eq = s.find('=');
    if (eq == std::string::npos) {
      throw std::invalid_argument("config: " + path + ":" + std::to_string(lineno) +
                                  ": expected key = value");
    }
    const std::string key = trim(s.substr(0, eq));
    std::string value = trim(s.substr(eq + 1));
    // Inline comments are recognized for unquoted, non-list values only.
    if (!value.empty() && value.front() != '"' && value.front() != '[') {
      const auto hash = value.find('#');
      if (hash != std::string::npos) value = trim(value.substr(0, hash));
    }
    if (key.empty() || value.empty()) {
      throw std::invalid_argument("config: " + path + ":" + std::to_string(lineno) +
                                  ": empty key or value");
    }
    kv[key] = value;
  }
  return kv;
}

void apply_overrides(std::map<std::string, std::string>& kv,
                     const std::vector<std::string>& overrides) {
  for (const std::string& ov : overrides) {
    const auto eq = ov.find('=');
    if (eq == std::string::npos || eq == 0) {
      throw std::invalid_argument("config: override '" + ov + "' is not key=value");
    }
    kv[trim(ov.substr(0, eq))] = trim(ov.substr(eq + 1));
  }
}

ExperimentConfig load_config(const std::string& path, const std::vector<std::string>& overrides) {
  std::map<std::string, std::string> kv;
  if (!path.empty()) kv = parse_config_file(path);
  apply_overrides(kv, overrides);
  ExperimentConfig cfg = ExperimentConfig::from_kv(kv);
  cfg.validate();
  return cfg;
}

}  // namespace fppl
