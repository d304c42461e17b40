#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "fppl/backbone.hpp"
#include "fppl/data.hpp"
#include "fppl/metrics.hpp"
#include "fppl/objectives.hpp"
#include "fppl/prompt.hpp"
#include "fppl/prototype.hpp"

namespace fppl {

struct ExperimentConfig;  // defined in config.hpp

// Protocol-level knobs shared by every client and the server.
struct Hyperparams {
  int clients = 4;        // K
  int tasks = 5;          // T
  int total_rounds = 25;  // across all tasks; each task gets an equal share
  int local_epochs = 2;
  int server_epochs = 5;  // debias steps per round
  int batch_size = 32;
  int prompt_len = 4;     // rows inserted per layer of the insertion range
  double lr = 1e-3;       // clients and server debias share one rate
  double tau = 0.2;       // contrastive temperature
  std::uint64_t seed = 2023;  // master seed of the run; set per trial

  int rounds_per_task() const { return total_rounds / tasks; }
  void validate() const;
};

// Component switches for the ablation grid. With fusion off the pipeline
// uses only the current task prompt (no coslinear scoring, no mixing); with
// the pool off, debias sees only the current round's uploads.
struct AblationFlags {
  bool use_ur = true;
  bool use_fusion = true;
  bool use_debias = true;
  bool use_pool = true;
};

// Everything a client sends up or receives down besides prototypes:
// w = {psi, current prompt, classifier}. Frozen prompts are replicated
// client state, never retransmitted.
struct TunableParams {
  CoslinearWeights psi;
  PromptSet prompt;
  Classifier theta;

  long long float_count() const;
  std::uint64_t checksum() const;
};

struct ClientResult {
  TunableParams w;
  LocalPrototypeSet prototypes;
  int shard_size = 0;
  long long samples_processed = 0;  // summed over epochs and batches
  double loss_total = 0.0;          // per-sample (ce + ur) summed over processing
  double loss_ce = 0.0;
  double loss_ur = 0.0;
  std::vector<double> epoch_mean_loss;  // one entry per local epoch
};

// One federated client: owns its task shards, its replica of the frozen
// prompt history, and a cache of query features (valid across rounds because
// the query path depends only on the frozen backbone).
class SimClient {
 public:
  SimClient(int id, const FrozenBackbone* backbone, const Dataset* data,
            std::vector<std::vector<int>> task_shards);

  // One round of local work from the server broadcast (w, g): on the first
  // round of a later task, freezes the received prompt and grows psi by the
  // shared seeded column; then runs `local_epochs` of mini-batch Adam on the
  // client loss and extracts local prototypes with the trained model.
  // An empty shard returns the synced parameters untrained plus an empty
  // prototype set.
  ClientResult update(int task, int round, const TunableParams& w_in,
                      const GlobalPrototypeSet& g, const Hyperparams& hp,
                      const AblationFlags& flags);

  int id() const { return id_; }
  int shard_size(int task) const;
  std::uint64_t frozen_checksum() const { return bank_.frozen_checksum(); }
  const PromptBank& bank() const { return bank_; }

 private:
  const Vec& query(int train_index);

  int id_;
  const FrozenBackbone* backbone_;
  const Dataset* data_;
  std::vector<std::vector<int>> shards_;  // per task (1-based task -> index-1)
  PromptBank bank_;
  std::vector<Vec> query_cache_;
  std::vector<char> query_cached_;
};

// Shard-size weighted element-wise mean, summed in ascending client order.
// Throws on dimension mismatch or when every shard is empty.
TunableParams aggregate(const std::vector<TunableParams>& client_params,
                        const std::vector<int>& shard_sizes);

struct DebiasOutcome {
  Classifier theta;
  double final_loss = 0.0;  // mean prototype cross-entropy after the steps
  long long prototype_count = 0;
  bool skipped = false;  // no prototypes were available
};

// `server_epochs` full-batch Adam steps of the prototype cross-entropy over
// pool ∪ current uploads (uploads only when the pool flag is off). Only the
// classifier changes.
DebiasOutcome debias_classifier(const Classifier& theta, const PrototypePool& pool,
                                const std::vector<LocalPrototypeSet>& uploads,
                                const Hyperparams& hp, const AblationFlags& flags);

struct FederationState {
  TunableParams w;
  std::vector<PromptSet> frozen;  // server replica of the frozen history
  GlobalPrototypeSet g;
  PrototypePool pool;
  std::vector<LocalPrototypeSet> latest_uploads;  // ascending client order
};

struct RoundStats {
  int round_global = 0;
  int task = 0;
  int round_in_task = 0;
  double train_loss = 0.0;  // per-sample mean over all clients and epochs
  double train_ce = 0.0;
  double train_ur = 0.0;
  double debias_loss = 0.0;
  bool debias_skipped = false;
  std::vector<long long> upload_floats;  // per client
  long long broadcast_floats = 0;        // per client (identical for all)
  long long upload_floats_total = 0;
};

// One synchronous round: broadcast -> all clients update from the same
// (w, g) -> shard-weighted aggregate -> debias -> rebuild g from the fresh
// uploads. Client execution order cannot affect the result; `concurrent`
// runs them on one thread each.
RoundStats run_round(FederationState& state, std::vector<SimClient>& clients, int task,
                     int round, const Hyperparams& hp, const AblationFlags& flags,
                     bool concurrent);

struct RunResult {
  std::uint64_t seed = 0;
  AccuracyMatrix matrix{1};
  AccuracySummary accuracy;
  ForgettingResult forgetting;
  std::vector<RoundStats> rounds;
  long long comm_formula = 0;
  long long extra_storage_formula = 0;
  long long tunable_params_formula = 0;
  long long tunable_params_runtime = 0;  // live psi + prompt floats at the end
  long long total_upload_floats = 0;
  long long total_broadcast_floats = 0;
  double dataset_probe_accuracy = 0.0;
  std::uint64_t backbone_checksum = 0;
  std::uint64_t dataset_checksum = 0;
  std::uint64_t frozen_checksum_final = 0;
  double wall_seconds = 0.0;  // recorded in the manifest, never the summary
  std::vector<std::string> log;
};

// Full protocol for one master seed: dataset/split/partition, T tasks of
// rounds_per_task rounds each, pool merge + centralized evaluation at each
// task boundary, metrics at the end. Writes per-seed artifacts (metrics.csv,
// accuracy_matrix.csv, summary.json, partition CSVs, checkpoints/) under
// out_dir unless it is empty.
RunResult run_experiment(const ExperimentConfig& cfg, std::uint64_t master_seed,
                         const std::string& out_dir);

}  // namespace fppl
