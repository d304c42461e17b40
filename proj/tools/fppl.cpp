// Command-line front end: `run` executes the federated continual-learning
// protocol per seed, `costs` prints the closed-form transmission/storage/
// parameter counts, `sweep` repeats `run` along the beta or client axis.

#include <cmath>
#include <cstdint>
#include <exception>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "fppl/artifacts.hpp"
#include "fppl/config.hpp"
#include "fppl/federation.hpp"
#include "fppl/metrics.hpp"

namespace {

using fppl::ExperimentConfig;
using fppl::RunResult;
using nlohmann::json;

std::vector<std::uint64_t> parse_seeds_arg(const std::string& arg) {
  std::vector<std::uint64_t> out;
  std::stringstream ss(arg);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item.empty()) continue;
    out.push_back(std::stoull(item));
  }
  if (out.empty()) throw std::invalid_argument("--seeds: need at least one seed");
  return out;
}

struct SeedStats {
  double mean = 0.0;
  double stddev = 0.0;  // sample standard deviation (n - 1)
};

SeedStats seed_stats(const std::vector<double>& xs) {
  SeedStats s;
  if (xs.empty()) return s;
  for (double x : xs) s.mean += x;
  s.mean /= static_cast<double>(xs.size());
  if (xs.size() > 1) {
    double acc = 0.0;
    for (double x : xs) acc += (x - s.mean) * (x - s.mean);
    s.stddev = std::sqrt(acc / static_cast<double>(xs.size() - 1));
  }
  return s;
}

// Runs every seed of the config into out_dir/seed_<seed>/ and writes
// manifest.json and aggregate.json at the top. The manifest is written
// before the first seed and rewritten after each, so a failed run leaves a
// partial manifest with the error recorded.
int run_all_seeds(const ExperimentConfig& cfg, const std::string& out_dir) {
  fppl::ensure_directory(out_dir);

  json manifest;
  manifest["config"] = json::object();
  for (const auto& [k, v] : cfg.to_kv()) manifest["config"][k] = v;
  manifest["seeds"] = cfg.run.seeds;
  manifest["status"] = "running";
  manifest["per_seed"] = json::array();
  const auto flush_manifest = [&] {
    fppl::write_text_file(out_dir + "/manifest.json", manifest.dump(2) + "\n");
  };
  flush_manifest();

  std::vector<double> accs, finals, forgets;
  for (std::uint64_t seed : cfg.run.seeds) {
    const std::string seed_dir = out_dir + "/seed_" + std::to_string(seed);
    json entry;
    entry["seed"] = seed;
    try {
      RunResult res = fppl::run_experiment(cfg, seed, seed_dir);
      accs.push_back(res.accuracy.average);
      finals.push_back(res.accuracy.per_stage.back());
      forgets.push_back(res.forgetting.value);
      entry["status"] = "complete";
      entry["avg_accuracy"] = res.accuracy.average;
      entry["final_accuracy"] = res.accuracy.per_stage.back();
      entry["avg_forgetting"] = res.forgetting.value;
      entry["wall_seconds"] = res.wall_seconds;
      entry["backbone_checksum"] = res.backbone_checksum;
      entry["dataset_checksum"] = res.dataset_checksum;
      entry["frozen_prompt_checksum"] = res.frozen_checksum_final;
      entry["dataset_probe_accuracy"] = res.dataset_probe_accuracy;
      entry["log"] = res.log;
      std::cout << "seed " << seed << ": avg_accuracy=" << res.accuracy.average
                << " final_accuracy=" << res.accuracy.per_stage.back()
                << " avg_forgetting=" << res.forgetting.value << " ("
                << res.wall_seconds << "s)\n";
    } catch (const std::exception& e) {
      entry["status"] = std::string("failed: ") + e.what();
      manifest["per_seed"].push_back(entry);
      manifest["status"] = std::string("failed at seed ") + std::to_string(seed);
      flush_manifest();
      std::cerr << "error: seed " << seed << ": " << e.what() << "\n";
      return 1;
    }
    manifest["per_seed"].push_back(entry);
    flush_manifest();
  }

  const SeedStats a = seed_stats(accs), f = seed_stats(finals), g = seed_stats(forgets);
  json agg;
  agg["seeds"] = cfg.run.seeds;
  agg["avg_accuracy_mean"] = a.mean;
  agg["avg_accuracy_stddev"] = a.stddev;
  agg["final_accuracy_mean"] = f.mean;
  agg["final_accuracy_stddev"] = f.stddev;
  agg["avg_forgetting_mean"] = g.mean;
  agg["avg_forgetting_stddev"] = g.stddev;
  fppl::write_text_file(out_dir + "/aggregate.json", agg.dump(2) + "\n");

  manifest["status"] = "complete";
  flush_manifest();
  std::cout << "aggregate: avg_accuracy " << a.mean << " +/- " << a.stddev
            << ", avg_forgetting " << g.mean << " +/- " << g.stddev << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Deterministic desk-scale simulator of federated continual prompt learning"};
  app.require_subcommand(1);

  // ---- run ----
  auto* run = app.add_subcommand("run", "Execute the protocol for every configured seed");
  std::string run_config;
  std::string run_seeds;
  std::string run_out;
  std::vector<std::string> run_sets;
  run->add_option("--config", run_config, "Config file (key = value lines)");
  run->add_option("--seeds", run_seeds, "Comma-separated seed list override");
  run->add_option("--out", run_out, "Output directory override");
  run->add_option("--set", run_sets, "Dotted-key override, e.g. flags.use_debias=false");

  // ---- costs ----
  auto* costs = app.add_subcommand("costs", "Print the closed-form cost counts");
  fppl::CostInputs ci{32, 20, 5, 4, 5};
  costs->add_option("--embed-dim", ci.embed_dim, "Feature dimension D");
  costs->add_option("--classes", ci.num_classes, "Total class count");
  costs->add_option("--tasks", ci.tasks, "Task count");
  costs->add_option("--prompt-len", ci.prompt_len, "Prompt rows per inserted layer");
  costs->add_option("--insert-layers", ci.insert_layers, "Layers receiving prompts");

  // ---- sweep ----
  auto* sweep = app.add_subcommand("sweep", "Repeat `run` along one axis");
  std::string sweep_config, sweep_axis, sweep_values, sweep_seeds, sweep_out;
  std::vector<std::string> sweep_sets;
  sweep->add_option("--config", sweep_config, "Config file");
  sweep->add_option("--axis", sweep_axis, "beta or clients")->required();
  sweep->add_option("--values", sweep_values, "Comma-separated axis values")->required();
  sweep->add_option("--seeds", sweep_seeds, "Comma-separated seed list override");
  sweep->add_option("--out", sweep_out, "Output directory override");
  sweep->add_option("--set", sweep_sets, "Dotted-key override applied to every point");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*run) {
      ExperimentConfig cfg = fppl::load_config(run_config, run_sets);
      if (!run_seeds.empty()) cfg.run.seeds = parse_seeds_arg(run_seeds);
      if (!run_out.empty()) cfg.run.out_dir = run_out;
      cfg.validate();
      return run_all_seeds(cfg, cfg.run.out_dir);
    }

    if (*costs) {
      std::cout << "COMM  (uploaded floats per client per round, final task): "
                << fppl::comm_cost(ci) << "\n"
                << "ESTG  (extra stored floats per client, frozen prompts):   "
                << fppl::extra_storage(ci) << "\n"
                << "PARAM (tunable floats excluding the classifier):          "
                << fppl::tunable_param_count(ci) << "\n";
      return 0;
    }

    if (*sweep) {
      if (sweep_axis != "beta" && sweep_axis != "clients") {
        throw std::invalid_argument("sweep: --axis must be beta or clients");
      }
      std::vector<std::string> values;
      std::stringstream ss(sweep_values);
      std::string item;
      while (std::getline(ss, item, ',')) {
        if (!item.empty()) values.push_back(item);
      }
      if (values.empty()) throw std::invalid_argument("sweep: empty value list");

      ExperimentConfig base = fppl::load_config(sweep_config, sweep_sets);
      if (!sweep_seeds.empty()) base.run.seeds = parse_seeds_arg(sweep_seeds);
      if (!sweep_out.empty()) base.run.out_dir = sweep_out;
      const std::string root = base.run.out_dir;
      fppl::ensure_directory(root);

      std::ostringstream csv;
      csv << "axis,value,seed,avg_accuracy,final_accuracy,avg_forgetting\n";
      for (const std::string& value : values) {
        ExperimentConfig cfg = base;
        if (sweep_axis == "beta") {
          cfg.data.beta = std::stod(value);
        } else {
          cfg.fed.clients = std::stoi(value);
        }
        cfg.run.out_dir = root + "/" + sweep_axis + "_" + value;
        cfg.validate();
        const int rc = run_all_seeds(cfg, cfg.run.out_dir);
        if (rc != 0) return rc;
        for (std::uint64_t seed : cfg.run.seeds) {
          const std::string summary_path =
              cfg.run.out_dir + "/seed_" + std::to_string(seed) + "/summary.json";
          const json summary = json::parse(fppl::read_text_file(summary_path));
          csv << sweep_axis << ',' << value << ',' << seed << ','
              << summary["avg_accuracy"].dump() << ',' << summary["final_accuracy"].dump()
              << ',' << summary["avg_forgetting"].dump() << '\n';
        }
      }
      fppl::write_text_file(root + "/sweep.csv", csv.str());
      std::cout << "sweep results in " << root << "/sweep.csv\n";
      return 0;
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
