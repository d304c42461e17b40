#include "fppl/federation.hpp"

#include <algorithm>
#include <chrono>
#include <numeric>
#include <set>
#include <sstream>
#include <stdexcept>
#include <thread>

#include "fppl/artifacts.hpp"
#include "fppl/config.hpp"
#include "fppl/optim.hpp"
#include "fppl/rng.hpp"

namespace fppl {

namespace {

constexpr double kPsiGrowthNoise = 1e-3;
constexpr double kPsiInitScale = 0.1;
// Large prompt init keeps prompt directions stable across tasks: optimizer
// steps move each coordinate by roughly the learning rate, so a larger base
// magnitude means a smaller relative directional drift, and attention layer
// normalization makes prompt scale irrelevant to the features themselves.
constexpr double kPromptInitScale = 1.0;

std::vector<int> sorted_classes(const GlobalPrototypeSet& g) {
  std::vector<int> out;
  out.reserve(g.size());
  for (const auto& [cls, mean] : g.means) out.push_back(cls);
  return out;  // map iteration is already ascending
}

void check_same_shape(const TunableParams& a, const TunableParams& b) {
  const bool ok = a.psi.w.rows() == b.psi.w.rows() && a.psi.w.cols() == b.psi.w.cols() &&
                  a.prompt.first_layer == b.prompt.first_layer &&
                  a.prompt.span() == b.prompt.span() &&
                  a.prompt.prompt_len() == b.prompt.prompt_len() &&
                  a.theta.weight.rows() == b.theta.weight.rows() &&
                  a.theta.weight.cols() == b.theta.weight.cols() &&
                  a.theta.bias.size() == b.theta.bias.size();
  if (!ok) throw std::invalid_argument("aggregate: client parameter shapes differ");
}

}  // namespace

void Hyperparams::validate() const {
  if (clients < 1) throw std::invalid_argument("hyperparams: need >= 1 client");
  if (tasks < 1) throw std::invalid_argument("hyperparams: need >= 1 task");
  if (total_rounds < 1) throw std::invalid_argument("hyperparams: need >= 1 round");
  if (total_rounds % tasks != 0) {
    std::ostringstream os;
    os << "hyperparams: tasks (" << tasks << ") must divide total rounds (" << total_rounds
       << ")";
    throw std::invalid_argument(os.str());
  }
  if (local_epochs < 0) throw std::invalid_argument("hyperparams: local epochs must be >= 0");
  if (server_epochs < 0) throw std::invalid_argument("hyperparams: server epochs must be >= 0");
  if (batch_size < 1) throw std::invalid_argument("hyperparams: batch size must be >= 1");
  if (prompt_len < 0) throw std::invalid_argument("hyperparams: prompt length must be >= 0");
  if (!(lr > 0.0)) throw std::invalid_argument("hyperparams: learning rate must be > 0");
  if (!(tau > 0.0)) throw std::invalid_argument("hyperparams: tau must be > 0");
}

long long TunableParams::float_count() const {
  long long n = static_cast<long long>(psi.w.size());
  for (const Mat& m : prompt.layers) n += static_cast<long long>(m.size());
  n += static_cast<long long>(theta.weight.size());
  n += static_cast<long long>(theta.bias.size());
  return n;
}

std::uint64_t TunableParams::checksum() const {
  Checksum c;
  c.add(psi.w);
  for (const Mat& m : prompt.layers) c.add(m);
  c.add(theta.weight);
  c.add(theta.bias);
  return c.value();
}

SimClient::SimClient(int id, const FrozenBackbone* backbone, const Dataset* data,
                     std::vector<std::vector<int>> task_shards)
    : id_(id), backbone_(backbone), data_(data), shards_(std::move(task_shards)) {
  query_cache_.resize(data_->train.size());
  query_cached_.assign(data_->train.size(), 0);
}

int SimClient::shard_size(int task) const {
  return static_cast<int>(shards_.at(static_cast<size_t>(task - 1)).size());
}

const Vec& SimClient::query(int train_index) {
  const auto i = static_cast<size_t>(train_index);
  if (!query_cached_[i]) {
    // The query path uses no tunables, so one computation stays valid for
    // the whole run.
    query_cache_[i] = backbone_->query_features(data_->train[i].pixels);
    query_cached_[i] = 1;
  }
  return query_cache_[i];
}

ClientResult SimClient::update(int task, int round, const TunableParams& w_in,
                               const GlobalPrototypeSet& g, const Hyperparams& hp,
                               const AblationFlags& flags) {
  // Sync the replicated state with the broadcast.
  CoslinearWeights psi = w_in.psi;
  Classifier theta = w_in.theta;
  bank_.set_current(w_in.prompt);
  if (round == 1 && task > 1) {
    // Task transition: the received prompt is the previous task's final
    // aggregate. Freeze it, start the new prompt from it, and grow psi by
    // one column. The growth noise stream ignores the client id, so every
    // client derives the identical column.
    bank_.advance(task);
    grow_coslinear(psi, derive_seed(hp.seed, {stream::psi_growth, static_cast<std::uint64_t>(task)}),
                   kPsiGrowthNoise);
  }
  if (bank_.task_index() != task) {
    std::ostringstream os;
    os << "client " << id_ << ": asked to train task " << task << " while at task "
       << bank_.task_index();
    throw std::logic_error(os.str());
  }

  ClientResult out;
  out.shard_size = shard_size(task);
  out.prototypes.client_id = id_;
  out.prototypes.task = task;
  if (out.shard_size == 0) {
    // Stays synced (so shapes keep matching the cohort) but trains nothing;
    // aggregation gives this client zero weight.
    out.w = TunableParams{std::move(psi), bank_.current(), std::move(theta)};
    return out;
  }

  const std::vector<int>& shard = shards_[static_cast<size_t>(task - 1)];
  std::vector<TrainItem> items(shard.size());
  for (size_t i = 0; i < shard.size(); ++i) {
    const Sample& s = data_->train[static_cast<size_t>(shard[i])];
    items[i] = TrainItem{&s.pixels, s.label, flags.use_fusion ? &query(shard[i]) : nullptr};
  }

  ObjectiveOptions opts;
  opts.tau = hp.tau;
  opts.use_ur = flags.use_ur;
  opts.use_fusion = flags.use_fusion;
  opts.reduction = Reduction::Mean;
  opts.candidate_classes = sorted_classes(g);

  Adam adam(AdamConfig{.lr = hp.lr});
  const int slot_psi = adam.register_size(psi.w.size());
  std::vector<int> slot_prompt;
  for (const Mat& m : bank_.current().layers) slot_prompt.push_back(adam.register_size(m.size()));
  const int slot_tw = adam.register_size(theta.weight.size());
  const int slot_tb = adam.register_size(theta.bias.size());

  std::vector<int> order(shard.size());
  std::iota(order.begin(), order.end(), 0);
  std::vector<TrainItem> batch;
  batch.reserve(static_cast<size_t>(hp.batch_size));

  for (int epoch = 1; epoch <= hp.local_epochs; ++epoch) {
    auto rng = make_rng(hp.seed, {stream::shuffle, static_cast<std::uint64_t>(id_),
                                  static_cast<std::uint64_t>(task), static_cast<std::uint64_t>(round),
                                  static_cast<std::uint64_t>(epoch)});
    std::shuffle(order.begin(), order.end(), rng);
    double epoch_loss = 0.0;
    for (size_t start = 0; start < order.size(); start += static_cast<size_t>(hp.batch_size)) {
      batch.clear();
      const size_t stop = std::min(order.size(), start + static_cast<size_t>(hp.batch_size));
      for (size_t i = start; i < stop; ++i) batch.push_back(items[static_cast<size_t>(order[i])]);

      BatchEval ev = client_eval(*backbone_, batch, bank_, psi, theta, g, opts);
      adam.begin_step();
      adam.apply(slot_psi, psi.w, ev.grads.d_psi);
      for (size_t l = 0; l < slot_prompt.size(); ++l) {
        adam.apply(slot_prompt[l], bank_.current().layers[l], ev.grads.d_prompt.layers[l]);
      }
      adam.apply(slot_tw, theta.weight, ev.grads.d_theta_weight);
      adam.apply(slot_tb, theta.bias, ev.grads.d_theta_bias);

      const double n = static_cast<double>(batch.size());
      out.loss_total += ev.loss.total * n;
      out.loss_ce += ev.loss.ce * n;
      out.loss_ur += ev.loss.ur * n;
      out.samples_processed += static_cast<long long>(batch.size());
      epoch_loss += ev.loss.total * n;
    }
    out.epoch_mean_loss.push_back(epoch_loss / static_cast<double>(shard.size()));
  }

  // Local prototypes from the trained model (per-class mean features).
  std::vector<std::pair<Vec, int>> feats;
  feats.reserve(shard.size());
  for (size_t i = 0; i < shard.size(); ++i) {
    const Sample& s = data_->train[static_cast<size_t>(shard[i])];
    PromptSet fused;
    if (flags.use_fusion) {
      fused = fuse(bank_, coslinear_logits(psi, query(shard[i])));
    } else {
      fused = bank_.current();
    }
    feats.emplace_back(backbone_->prompted_features(s.pixels, fused), s.label);
  }
  out.prototypes = local_prototypes(feats, id_, task);

  out.w = TunableParams{std::move(psi), bank_.current(), std::move(theta)};
  return out;
}

TunableParams aggregate(const std::vector<TunableParams>& client_params,
                        const std::vector<int>& shard_sizes) {
  if (client_params.empty() || client_params.size() != shard_sizes.size()) {
    throw std::invalid_argument("aggregate: need one shard size per parameter set");
  }
  long long total = 0;
  for (int s : shard_sizes) {
    if (s < 0) throw std::invalid_argument("aggregate: negative shard size");
    total += s;
  }
  if (total == 0) throw std::invalid_argument("aggregate: every shard is empty");

  const TunableParams& first = client_params.front();
  TunableParams out;
  out.psi.w = Mat::Zero(first.psi.w.rows(), first.psi.w.cols());
  const int p_dim =
      first.prompt.span() > 0 ? static_cast<int>(first.prompt.layers.front().cols()) : 0;
  out.prompt = PromptSet::zeros(first.prompt.first_layer, first.prompt.span(),
                                first.prompt.prompt_len(), p_dim);
  out.theta.weight = Mat::Zero(first.theta.weight.rows(), first.theta.weight.cols());
  out.theta.bias = Vec::Zero(first.theta.bias.size());

  for (size_t k = 0; k < client_params.size(); ++k) {
    check_same_shape(first, client_params[k]);
    if (shard_sizes[k] == 0) continue;
    const double wgt = static_cast<double>(shard_sizes[k]) / static_cast<double>(total);
    out.psi.w += wgt * client_params[k].psi.w;
    PromptSet scaled = wgt * client_params[k].prompt;
    out.prompt += scaled;
    out.theta.weight += wgt * client_params[k].theta.weight;
    out.theta.bias += wgt * client_params[k].theta.bias;
  }
  return out;
}

DebiasOutcome debias_classifier(const Classifier& theta, const PrototypePool& pool,
                                const std::vector<LocalPrototypeSet>& uploads,
                                const Hyperparams& hp, const AblationFlags& flags) {
  std::vector<std::pair<int, Vec>> batch;
  if (flags.use_pool) {
    for (const LocalPrototypeSet& set : pool.entries()) {
      for (const auto& [cls, mean] : set.means) batch.emplace_back(cls, mean);
    }
  }
  for (const LocalPrototypeSet& set : uploads) {
    for (const auto& [cls, mean] : set.means) batch.emplace_back(cls, mean);
  }

  DebiasOutcome out;
  out.theta = theta;
  out.prototype_count = static_cast<long long>(batch.size());
  if (batch.empty()) {
    out.skipped = true;
    return out;
  }

  Adam adam(AdamConfig{.lr = hp.lr});
  const int slot_w = adam.register_size(out.theta.weight.size());
  const int slot_b = adam.register_size(out.theta.bias.size());
  for (int step = 0; step < hp.server_epochs; ++step) {
    DebiasEval ev = debias_eval(out.theta, batch, Reduction::Mean);
    adam.begin_step();
    adam.apply(slot_w, out.theta.weight, ev.d_weight);
    adam.apply(slot_b, out.theta.bias, ev.d_bias);
  }
  out.final_loss = debias_eval(out.theta, batch, Reduction::Mean).loss;
  return out;
}

RoundStats run_round(FederationState& state, std::vector<SimClient>& clients, int task,
                     int round, const Hyperparams& hp, const AblationFlags& flags,
                     bool concurrent) {
  const TunableParams w_in = state.w;  // value snapshot: one broadcast for all
  const GlobalPrototypeSet g_in = state.g;
  const auto n_clients = clients.size();

  std::vector<ClientResult> results(n_clients);
  if (concurrent) {
    std::vector<std::thread> workers;
    workers.reserve(n_clients);
    for (size_t k = 0; k < n_clients; ++k) {
      workers.emplace_back([&, k] {
        results[k] = clients[k].update(task, round, w_in, g_in, hp, flags);
      });
    }
    for (std::thread& th : workers) th.join();
  } else {
    for (size_t k = 0; k < n_clients; ++k) {
      results[k] = clients[k].update(task, round, w_in, g_in, hp, flags);
    }
  }

  RoundStats rs;
  rs.task = task;
  rs.round_in_task = round;
  const long long d = static_cast<long long>(w_in.theta.weight.rows());
  rs.broadcast_floats = w_in.float_count() + static_cast<long long>(g_in.size()) * d;

  std::vector<TunableParams> params;
  std::vector<int> sizes;
  params.reserve(n_clients);
  sizes.reserve(n_clients);
  state.latest_uploads.clear();
  double loss_total = 0.0, loss_ce = 0.0, loss_ur = 0.0;
  long long samples = 0;
  for (size_t k = 0; k < n_clients; ++k) {
    ClientResult& r = results[k];
    rs.upload_floats.push_back(r.w.float_count() +
                               static_cast<long long>(r.prototypes.class_count()) * d);
    rs.upload_floats_total += rs.upload_floats.back();
    loss_total += r.loss_total;
    loss_ce += r.loss_ce;
    loss_ur += r.loss_ur;
    samples += r.samples_processed;
    sizes.push_back(r.shard_size);
    params.push_back(std::move(r.w));
    state.latest_uploads.push_back(std::move(r.prototypes));
  }
  if (samples > 0) {
    rs.train_loss = loss_total / static_cast<double>(samples);
    rs.train_ce = loss_ce / static_cast<double>(samples);
    rs.train_ur = loss_ur / static_cast<double>(samples);
  }

  state.w = aggregate(params, sizes);
  if (flags.use_debias) {
    DebiasOutcome db = debias_classifier(state.w.theta, state.pool, state.latest_uploads, hp, flags);
    state.w.theta = std::move(db.theta);
    rs.debias_loss = db.final_loss;
    rs.debias_skipped = db.skipped;
  }
  state.g = global_prototypes(state.latest_uploads);
  return rs;
}

RunResult run_experiment(const ExperimentConfig& cfg, std::uint64_t master_seed,
                         const std::string& out_dir) {
  const auto t_start = std::chrono::steady_clock::now();
  cfg.validate();
  Hyperparams hp = cfg.fed;
  hp.seed = master_seed;
  const BackboneConfig& bc = cfg.backbone;
  const int D = bc.embed_dim;
  const int T = hp.tasks;
  const int K = hp.clients;
  const int R = hp.rounds_per_task();

  RunResult res;
  res.seed = master_seed;
  res.matrix = AccuracyMatrix(T);

  FrozenBackbone backbone(bc);
  res.backbone_checksum = backbone.weight_checksum();

  Dataset ds;
  bool loaded_cache = false;
  if (!cfg.data.cache.empty()) {
    try {
      ds = load_dataset_cache(cfg.data.cache);
      if (ds.num_classes != cfg.data.num_classes || ds.channels != bc.channels ||
          ds.side != bc.image_side || ds.train_per_class != cfg.data.train_per_class ||
          ds.test_per_class != cfg.data.test_per_class) {
        throw std::runtime_error("cached dataset shape does not match the config");
      }
      loaded_cache = true;
      res.log.push_back("dataset loaded from cache " + cfg.data.cache);
    } catch (const std::exception& e) {
      res.log.push_back(std::string("dataset cache unusable (") + e.what() + "); regenerating");
    }
  }
  if (!loaded_cache) {
    ds = generate_synthetic_dataset(cfg.data.num_classes, cfg.data.train_per_class,
                                    cfg.data.test_per_class, bc.channels, bc.image_side,
                                    master_seed);
    if (!cfg.data.cache.empty()) save_dataset_cache(cfg.data.cache, ds);
  }
  res.dataset_checksum = ds.checksum();
  res.dataset_probe_accuracy = ds.probe_accuracy;

  const std::vector<std::vector<int>> task_classes =
      split_tasks(cfg.data.num_classes, T, master_seed);
  const std::vector<std::vector<int>> by_class = ds.train_indices_by_class();

  // Per-task shards, then regrouped per client for construction.
  std::vector<std::vector<std::vector<int>>> task_shards(static_cast<size_t>(T));
  for (int t = 1; t <= T; ++t) {
    std::vector<std::vector<int>> class_indices;
    class_indices.reserve(task_classes[static_cast<size_t>(t - 1)].size());
    for (int cls : task_classes[static_cast<size_t>(t - 1)]) {
      class_indices.push_back(by_class[static_cast<size_t>(cls)]);
    }
    task_shards[static_cast<size_t>(t - 1)] =
        cfg.data.pinned
            ? pinned_partition(class_indices, K)
            : dirichlet_partition(class_indices, K, cfg.data.beta,
                                  derive_seed(master_seed,
                                              {stream::partition, static_cast<std::uint64_t>(t)}));
  }

  std::vector<SimClient> clients;
  clients.reserve(static_cast<size_t>(K));
  for (int k = 0; k < K; ++k) {
    std::vector<std::vector<int>> shards_k(static_cast<size_t>(T));
    for (int t = 0; t < T; ++t) {
      shards_k[static_cast<size_t>(t)] = task_shards[static_cast<size_t>(t)][static_cast<size_t>(k)];
    }
    clients.emplace_back(k, &backbone, &ds, std::move(shards_k));
  }

  // Initial tunables: small uniform psi column and prompt, zero classifier.
  FederationState state;
  {
    auto rng_psi = make_rng(master_seed, {stream::init_psi});
    std::uniform_real_distribution<double> dist(-kPsiInitScale, kPsiInitScale);
    state.w.psi.w = Mat(D, 1);
    for (int i = 0; i < D; ++i) state.w.psi.w(i, 0) = dist(rng_psi);

    auto rng_p = make_rng(master_seed, {stream::init_prompt});
    std::uniform_real_distribution<double> pdist(-kPromptInitScale, kPromptInitScale);
    state.w.prompt.first_layer = bc.insert_start;
    state.w.prompt.layers.assign(static_cast<size_t>(bc.insert_layer_count()),
                                 Mat(hp.prompt_len, D));
    for (Mat& m : state.w.prompt.layers) {
      for (Eigen::Index r = 0; r < m.rows(); ++r) {
        for (Eigen::Index c = 0; c < m.cols(); ++c) m(r, c) = pdist(rng_p);
      }
    }
    state.w.theta.weight = Mat::Zero(D, cfg.data.num_classes);
    state.w.theta.bias = Vec::Zero(cfg.data.num_classes);
  }

  if (!out_dir.empty()) {
    ensure_directory(out_dir);
    if (cfg.run.write_checkpoints) ensure_directory(out_dir + "/checkpoints");
    for (int t = 1; t <= T; ++t) {
      write_partition_csv(out_dir + "/partition_task_" + std::to_string(t) + ".csv",
                          task_shards[static_cast<size_t>(t - 1)], ds);
    }
  }

  std::vector<int> seen_classes;
  int round_global = 0;
  for (int t = 1; t <= T; ++t) {
    if (t > 1) {
      // Server-side mirror of the client transition: the current prompt
      // becomes task t-1's frozen set. psi stays at t-1 columns here; the
      // first aggregation of the new task brings the grown copy back.
      state.frozen.push_back(state.w.prompt);
    }
    for (int r = 1; r <= R; ++r) {
      RoundStats rs = run_round(state, clients, t, r, hp, cfg.flags, cfg.run.concurrent_clients);
      rs.round_global = ++round_global;
      res.total_upload_floats += rs.upload_floats_total;
      res.total_broadcast_floats += rs.broadcast_floats * K;
      res.rounds.push_back(std::move(rs));
    }
    state.pool.merge(t, state.latest_uploads);

    // Frozen-history replicas must agree bit-for-bit after every transition.
    const std::uint64_t server_ck = frozen_list_checksum(state.frozen);
    for (const SimClient& c : clients) {
      if (c.frozen_checksum() != server_ck) {
        throw std::logic_error("frozen prompt replicas diverged at task " + std::to_string(t));
      }
    }

    for (int cls : task_classes[static_cast<size_t>(t - 1)]) seen_classes.push_back(cls);
    std::sort(seen_classes.begin(), seen_classes.end());

    // Centralized evaluation of the post-debias global model on every task
    // seen so far (column t of the accuracy matrix).
    const PromptBank eval_bank(state.frozen, state.w.prompt);
    const auto logits_fn = [&](const Vec& pixels) -> Vec {
      PromptSet fused;
      if (cfg.flags.use_fusion) {
        const Vec q = backbone.query_features(pixels);
        fused = fuse(eval_bank, coslinear_logits(state.w.psi, q));
      } else {
        fused = state.w.prompt;
      }
      return state.w.theta.logits(backbone.prompted_features(pixels, fused));
    };
    for (int i = 1; i <= t; ++i) {
      std::vector<Sample> task_test;
      const std::vector<int>& cls_list = task_classes[static_cast<size_t>(i - 1)];
      for (const Sample& s : ds.test) {
        if (std::find(cls_list.begin(), cls_list.end(), s.label) != cls_list.end()) {
          task_test.push_back(s);
        }
      }
      res.matrix.set(i, t, evaluate_task(logits_fn, task_test, seen_classes));
    }

    if (!out_dir.empty() && cfg.run.write_checkpoints) {
      write_checkpoint(out_dir + "/checkpoints/task_" + std::to_string(t) + ".bin", state);
    }
  }

  res.accuracy = avg_accuracy(res.matrix);
  res.forgetting = avg_forgetting(res.matrix);
  res.frozen_checksum_final = frozen_list_checksum(state.frozen);

  const CostInputs ci{D, cfg.data.num_classes, T, hp.prompt_len, bc.insert_layer_count()};
  res.comm_formula = comm_cost(ci);
  res.extra_storage_formula = extra_storage(ci);
  res.tunable_params_formula = tunable_param_count(ci);
  res.tunable_params_runtime = static_cast<long long>(state.w.psi.w.size());
  for (const Mat& m : state.w.prompt.layers) {
    res.tunable_params_runtime += static_cast<long long>(m.size());
  }
  if (res.tunable_params_runtime != res.tunable_params_formula) {
    throw std::logic_error("tunable parameter store disagrees with the closed form");
  }

  res.wall_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start).count();

  if (!out_dir.empty()) {
    write_metrics_csv(out_dir + "/metrics.csv", res.rounds);
    write_accuracy_matrix_csv(out_dir + "/accuracy_matrix.csv", res.matrix);
    write_text_file(out_dir + "/summary.json", summary_json(res));
  }
  return res;
}

}  // namespace fppl
