#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <stdexcept>
#include <vector>

#include "fppl/artifacts.hpp"
#include "fppl/config.hpp"
#include "fppl/federation.hpp"
#include "fppl/rng.hpp"

using namespace fppl;

namespace {

BackboneConfig tiny_backbone(uint64_t seed = 5) {
  BackboneConfig c;
  c.embed_dim = 16;
  c.num_layers = 2;
  c.num_heads = 4;
  c.patch_size = 4;
  c.image_side = 8;
  c.channels = 1;
  c.insert_start = 1;
  c.insert_end = 2;
  c.seed = seed;
  return c;
}

Hyperparams tiny_hp(int clients, int tasks, int rounds_per_task) {
  Hyperparams hp;
  hp.clients = clients;
  hp.tasks = tasks;
  hp.total_rounds = tasks * rounds_per_task;
  hp.local_epochs = 1;
  hp.server_epochs = 2;
  hp.batch_size = 8;
  hp.prompt_len = 2;
  hp.seed = 2023;
  return hp;
}

// A complete miniature federation built in place: the clients keep pointers
// into this object's backbone and dataset.
struct World {
  FrozenBackbone net;
  Dataset ds;
  Hyperparams hp;
  AblationFlags flags;
  FederationState state;
  std::vector<SimClient> clients;

  World(uint64_t seed, int n_clients, int tasks, int rounds_per_task)
      : net(tiny_backbone()),
        ds(generate_synthetic_dataset(4, 8, 4, 1, 8, seed)),
        hp(tiny_hp(n_clients, tasks, rounds_per_task)) {
    hp.seed = seed;
    const auto task_classes = split_tasks(4, tasks, seed);
    const auto by_class = ds.train_indices_by_class();
    std::vector<std::vector<std::vector<int>>> task_shards(static_cast<size_t>(tasks));
    for (int t = 0; t < tasks; ++t) {
      std::vector<std::vector<int>> ci;
      for (int cls : task_classes[static_cast<size_t>(t)]) {
        ci.push_back(by_class[static_cast<size_t>(cls)]);
      }
      task_shards[static_cast<size_t>(t)] = pinned_partition(ci, n_clients);
    }
    for (int k = 0; k < n_clients; ++k) {
      std::vector<std::vector<int>> mine(static_cast<size_t>(tasks));
      for (int t = 0; t < tasks; ++t) mine[static_cast<size_t>(t)] = task_shards[static_cast<size_t>(t)][static_cast<size_t>(k)];
      clients.emplace_back(k, &net, &ds, std::move(mine));
    }

    const int d = net.config().embed_dim;
    state.w.psi.w = Mat::Constant(d, 1, 0.5);
    state.w.prompt.first_layer = net.config().insert_start;
    for (int l = 0; l < net.config().insert_layer_count(); ++l) {
      state.w.prompt.layers.push_back(Mat::Constant(hp.prompt_len, d, 0.1 * (l + 1)));
    }
    state.w.theta.weight = Mat::Zero(d, 4);
    state.w.theta.bias = Vec::Zero(4);
  }
};

TunableParams scalar_params(double v) {
  TunableParams p;
  p.psi.w = Mat::Constant(1, 1, v);
  p.prompt.first_layer = 1;
  p.prompt.layers = {Mat::Constant(1, 1, v)};
  p.theta.weight = Mat::Constant(1, 1, v);
  p.theta.bias = Vec::Constant(1, v);
  return p;
}

}  // namespace

TEST_CASE("hyperparameter validation") {
  Hyperparams hp = tiny_hp(2, 2, 2);
  CHECK_NOTHROW(hp.validate());
  CHECK(hp.rounds_per_task() == 2);

  Hyperparams odd = hp;
  odd.total_rounds = 7;  // 2 tasks cannot share 7 rounds
  CHECK_THROWS_AS(odd.validate(), std::invalid_argument);

  Hyperparams none = hp;
  none.clients = 0;
  CHECK_THROWS_AS(none.validate(), std::invalid_argument);

  Hyperparams bad_lr = hp;
  bad_lr.lr = 0.0;
  CHECK_THROWS_AS(bad_lr.validate(), std::invalid_argument);
}

TEST_CASE("tunable parameter float count and checksum") {
  TunableParams p = scalar_params(2.0);
  CHECK(p.float_count() == 4);  // psi 1 + prompt 1 + weight 1 + bias 1
  TunableParams q = scalar_params(2.0);
  CHECK(p.checksum() == q.checksum());
  q.theta.bias(0) = 3.0;
  CHECK(p.checksum() != q.checksum());
}

TEST_CASE("aggregate: single client is the identity") {
  TunableParams p = scalar_params(1.25);
  TunableParams out = aggregate({p}, {17});
  CHECK(out.checksum() == p.checksum());
}

TEST_CASE("aggregate: equal shards average element-wise") {
  TunableParams a = scalar_params(1.0);
  TunableParams b = scalar_params(3.0);
  TunableParams out = aggregate({a, b}, {5, 5});
  CHECK(out.psi.w(0, 0) == doctest::Approx(2.0).epsilon(1e-15));
  CHECK(out.prompt.layers[0](0, 0) == doctest::Approx(2.0).epsilon(1e-15));
  CHECK(out.theta.weight(0, 0) == doctest::Approx(2.0).epsilon(1e-15));
  CHECK(out.theta.bias(0) == doctest::Approx(2.0).epsilon(1e-15));
}

TEST_CASE("aggregate: shard-weighted hand example") {
  // Sizes (1, 3) with values 0 and 4: 0.25 * 0 + 0.75 * 4 = 3.
  TunableParams out = aggregate({scalar_params(0.0), scalar_params(4.0)}, {1, 3});
  CHECK(out.psi.w(0, 0) == doctest::Approx(3.0).epsilon(1e-15));
  CHECK(out.theta.bias(0) == doctest::Approx(3.0).epsilon(1e-15));
}

TEST_CASE("aggregate: zero-size clients are excluded from the mean") {
  TunableParams out = aggregate({scalar_params(9.0), scalar_params(1.0)}, {0, 2});
  CHECK(out.theta.bias(0) == doctest::Approx(1.0).epsilon(1e-15));
}

TEST_CASE("aggregate: input validation") {
  TunableParams a = scalar_params(1.0);
  CHECK_THROWS_AS(aggregate({}, {}), std::invalid_argument);
  CHECK_THROWS_AS(aggregate({a}, {1, 2}), std::invalid_argument);
  CHECK_THROWS_AS(aggregate({a, a}, {0, 0}), std::invalid_argument);
  CHECK_THROWS_AS(aggregate({a, a}, {-1, 2}), std::invalid_argument);

  TunableParams wide = a;
  wide.psi.w = Mat::Constant(1, 2, 1.0);
  CHECK_THROWS_AS(aggregate({a, wide}, {1, 1}), std::invalid_argument);
}

TEST_CASE("client with an empty shard returns synced but untrained state") {
  World w(41, 1, 1, 1);
  SimClient idle(9, &w.net, &w.ds, {{}});  // one task, no samples
  ClientResult r = idle.update(1, 1, w.state.w, w.state.g, w.hp, w.flags);
  CHECK(r.shard_size == 0);
  CHECK(r.samples_processed == 0);
  CHECK(r.prototypes.empty());
  CHECK(r.prototypes.client_id == 9);
  CHECK(r.w.checksum() == w.state.w.checksum());
}

TEST_CASE("zero local epochs keep parameters but still extract prototypes") {
  World w(42, 1, 1, 1);
  w.hp.local_epochs = 0;
  ClientResult r = w.clients[0].update(1, 1, w.state.w, w.state.g, w.hp, w.flags);
  CHECK(r.samples_processed == 0);
  CHECK(r.epoch_mean_loss.empty());
  CHECK(r.w.checksum() == w.state.w.checksum());
  CHECK(r.prototypes.class_count() == 4);  // all four classes, untouched model
}

TEST_CASE("local training reduces the epoch loss") {
  World w(43, 1, 1, 1);
  w.hp.local_epochs = 3;
  ClientResult r = w.clients[0].update(1, 1, w.state.w, w.state.g, w.hp, w.flags);
  REQUIRE(r.epoch_mean_loss.size() == 3);
  CHECK(r.epoch_mean_loss.back() < r.epoch_mean_loss.front());
  CHECK(r.loss_total > 0.0);
  CHECK(r.w.checksum() != w.state.w.checksum());
}

TEST_CASE("first round of the first task has no contrastive signal") {
  World w(44, 2, 1, 1);
  ClientResult r = w.clients[0].update(1, 1, w.state.w, w.state.g, w.hp, w.flags);
  CHECK(r.loss_ur == 0.0);
  CHECK(r.loss_ce > 0.0);
}

TEST_CASE("task transitions must arrive on the first round") {
  World w(45, 1, 2, 2);
  ClientResult r1 = w.clients[0].update(1, 1, w.state.w, w.state.g, w.hp, w.flags);
  // Jumping to task 2 on round 2 skips the transition hook and must fail
  // loudly rather than train the wrong prompt.
  TunableParams w2 = r1.w;
  CHECK_THROWS_AS(w.clients[0].update(2, 2, w2, w.state.g, w.hp, w.flags), std::logic_error);
}

TEST_CASE("one round: sequential and concurrent execution agree bit for bit") {
  World w(46, 3, 1, 1);
  FederationState seq_state = w.state;
  FederationState con_state = w.state;
  std::vector<SimClient> seq_clients = w.clients;
  std::vector<SimClient> con_clients = w.clients;

  RoundStats a = run_round(seq_state, seq_clients, 1, 1, w.hp, w.flags, false);
  RoundStats b = run_round(con_state, con_clients, 1, 1, w.hp, w.flags, true);

  CHECK(seq_state.w.checksum() == con_state.w.checksum());
  CHECK(a.upload_floats == b.upload_floats);
  CHECK(a.train_loss == b.train_loss);
  REQUIRE(seq_state.g.size() == con_state.g.size());
  for (const auto& [cls, mean] : seq_state.g.means) {
    CHECK((mean - con_state.g.at(cls)).cwiseAbs().maxCoeff() == 0.0);
  }
}

TEST_CASE("one round: identical worlds give identical outcomes") {
  World w1(47, 2, 1, 1);
  World w2(47, 2, 1, 1);
  run_round(w1.state, w1.clients, 1, 1, w1.hp, w1.flags, false);
  run_round(w2.state, w2.clients, 1, 1, w2.hp, w2.flags, false);
  CHECK(w1.state.w.checksum() == w2.state.w.checksum());
}

TEST_CASE("round statistics account for every transmitted float") {
  World w(48, 2, 1, 1);
  const long long d = w.net.config().embed_dim;
  const long long w_floats = w.state.w.float_count();
  RoundStats rs = run_round(w.state, w.clients, 1, 1, w.hp, w.flags, false);

  // Round 1 broadcast carries no prototypes (G was empty).
  CHECK(rs.broadcast_floats == w_floats);
  REQUIRE(rs.upload_floats.size() == 2);
  long long total = 0;
  for (size_t k = 0; k < 2; ++k) {
    const long long protos =
        static_cast<long long>(w.state.latest_uploads[k].class_count()) * d;
    CHECK(rs.upload_floats[k] == w_floats + protos);
    total += rs.upload_floats[k];
  }
  CHECK(rs.upload_floats_total == total);

  // The next broadcast would carry the fresh global prototypes.
  RoundStats rs2 = run_round(w.state, w.clients, 1, 2, w.hp, w.flags, false);
  CHECK(rs2.broadcast_floats ==
        w_floats + static_cast<long long>(w.state.g.size()) * d);
}

TEST_CASE("debias: zero steps change nothing, many steps fit one prototype") {
  Hyperparams hp = tiny_hp(1, 1, 1);
  Classifier theta;
  theta.weight = Mat::Zero(4, 6);
  theta.bias = Vec::Zero(6);
  LocalPrototypeSet up;
  up.client_id = 0;
  up.task = 1;
  Vec proto(4);
  proto << 1.0, -0.5, 0.25, 2.0;
  up.means[3] = proto;
  std::vector<LocalPrototypeSet> uploads{up};
  PrototypePool pool;
  AblationFlags flags;

  hp.server_epochs = 0;
  DebiasOutcome none = debias_classifier(theta, pool, uploads, hp, flags);
  CHECK_FALSE(none.skipped);
  Checksum c0, c1;
  c0.add(theta.weight);
  c0.add(theta.bias);
  c1.add(none.theta.weight);
  c1.add(none.theta.bias);
  CHECK(c0.value() == c1.value());

  hp.server_epochs = 500;
  DebiasOutcome fit = debias_classifier(theta, pool, uploads, hp, flags);
  Vec logits = fit.theta.logits(proto);
  int best = 0;
  for (int i = 1; i < 6; ++i) {
    if (logits(i) > logits(best)) best = i;
  }
  CHECK(best == 3);
  CHECK(fit.final_loss < 0.5 * std::log(6.0));  // well below the zero-init loss ln 6
  CHECK(fit.final_loss < none.final_loss);
  CHECK(fit.prototype_count == 1);
}

TEST_CASE("debias: pool flag is irrelevant while the pool is empty") {
  Hyperparams hp = tiny_hp(1, 1, 1);
  hp.server_epochs = 3;
  Classifier theta;
  theta.weight = Mat::Zero(4, 6);
  theta.bias = Vec::Zero(6);
  LocalPrototypeSet up;
  up.means[2] = Vec::Ones(4);
  std::vector<LocalPrototypeSet> uploads{up};
  PrototypePool pool;

  AblationFlags with_pool;
  AblationFlags no_pool;
  no_pool.use_pool = false;
  DebiasOutcome a = debias_classifier(theta, pool, uploads, hp, with_pool);
  DebiasOutcome b = debias_classifier(theta, pool, uploads, hp, no_pool);
  Checksum ca, cb;
  ca.add(a.theta.weight);
  ca.add(a.theta.bias);
  cb.add(b.theta.weight);
  cb.add(b.theta.bias);
  CHECK(ca.value() == cb.value());
}

TEST_CASE("debias: skips cleanly when no prototypes exist") {
  Hyperparams hp = tiny_hp(1, 1, 1);
  Classifier theta;
  theta.weight = Mat::Zero(4, 6);
  theta.bias = Vec::Zero(6);
  DebiasOutcome out = debias_classifier(theta, PrototypePool{}, {}, hp, AblationFlags{});
  CHECK(out.skipped);
  CHECK(out.prototype_count == 0);
}

TEST_CASE("single-client federation equals the centralized trace") {
  // With K = 1 the shard-weighted mean has weight 1, debias sees the same
  // prototypes, and the round loop must reproduce plain centralized training
  // bit for bit, including across a task transition.
  World fed(49, 1, 2, 2);
  World cen(49, 1, 2, 2);

  TunableParams w = cen.state.w;
  std::vector<PromptSet> frozen;
  GlobalPrototypeSet g;
  PrototypePool pool;

  for (int task = 1; task <= 2; ++task) {
    if (task > 1) {
      fed.state.frozen.push_back(fed.state.w.prompt);
      frozen.push_back(w.prompt);
    }
    for (int round = 1; round <= 2; ++round) {
      run_round(fed.state, fed.clients, task, round, fed.hp, fed.flags, false);

      ClientResult r = cen.clients[0].update(task, round, w, g, cen.hp, cen.flags);
      w = r.w;  // no aggregation: the single result is the new state
      DebiasOutcome db = debias_classifier(w.theta, pool, {r.prototypes}, cen.hp, cen.flags);
      w.theta = db.theta;
      g = global_prototypes({r.prototypes});

      CHECK(fed.state.w.checksum() == w.checksum());
    }
    fed.state.pool.merge(task, fed.state.latest_uploads);
    pool.merge(task, {fed.state.latest_uploads[0]});
    CHECK(fed.clients[0].frozen_checksum() == frozen_list_checksum(frozen));
    CHECK(frozen_list_checksum(fed.state.frozen) == frozen_list_checksum(frozen));
  }
}

TEST_CASE("full run: completes, deterministic, formulas consistent") {
  ExperimentConfig cfg;
  cfg.backbone = tiny_backbone();
  cfg.fed = tiny_hp(2, 2, 2);
  cfg.data.num_classes = 4;
  cfg.data.train_per_class = 8;
  cfg.data.test_per_class = 4;
  cfg.data.beta = 0.5;
  cfg.run.out_dir = "";

  RunResult a = run_experiment(cfg, 31, "");
  RunResult b = run_experiment(cfg, 31, "");

  CHECK(a.matrix.complete());
  CHECK(a.accuracy.per_stage.size() == 2);
  CHECK_FALSE(a.forgetting.degenerate);
  CHECK(a.dataset_probe_accuracy >= 0.95);
  CHECK(a.rounds.size() == 4);

  // Bit-identical reruns, including the serialized summary.
  CHECK(summary_json(a) == summary_json(b));
  CHECK(a.backbone_checksum == b.backbone_checksum);
  CHECK(a.dataset_checksum == b.dataset_checksum);
  CHECK(a.frozen_checksum_final == b.frozen_checksum_final);

  // Closed forms agree with the metrics module and the live store.
  const CostInputs ci{16, 4, 2, 2, 2};
  CHECK(a.comm_formula == comm_cost(ci));
  CHECK(a.extra_storage_formula == extra_storage(ci));
  CHECK(a.tunable_params_formula == tunable_param_count(ci));
  CHECK(a.tunable_params_runtime == a.tunable_params_formula);

  RunResult c = run_experiment(cfg, 32, "");
  CHECK(summary_json(a) != summary_json(c));
}

TEST_CASE("full run: single-task forgetting is flagged degenerate") {
  ExperimentConfig cfg;
  cfg.backbone = tiny_backbone();
  cfg.fed = tiny_hp(2, 1, 2);
  cfg.data.num_classes = 4;
  cfg.data.train_per_class = 8;
  cfg.data.test_per_class = 4;
  cfg.run.out_dir = "";

  RunResult r = run_experiment(cfg, 33, "");
  CHECK(r.forgetting.degenerate);
  CHECK(r.forgetting.value == 0.0);
  CHECK(r.accuracy.average == r.accuracy.per_stage[0]);
}

TEST_CASE("full run: writes the advertised artifacts") {
  namespace fs = std::filesystem;
  const fs::path dir = fs::temp_directory_path() / "fppl_test_run_artifacts";
  fs::remove_all(dir);

  ExperimentConfig cfg;
  cfg.backbone = tiny_backbone();
  cfg.fed = tiny_hp(2, 2, 2);
  cfg.data.num_classes = 4;
  cfg.data.train_per_class = 8;
  cfg.data.test_per_class = 4;

  RunResult r = run_experiment(cfg, 34, dir.string());
  CHECK(fs::exists(dir / "summary.json"));
  CHECK(fs::exists(dir / "metrics.csv"));
  CHECK(fs::exists(dir / "accuracy_matrix.csv"));
  CHECK(fs::exists(dir / "partition_task_1.csv"));
  CHECK(fs::exists(dir / "partition_task_2.csv"));
  CHECK(fs::exists(dir / "checkpoints/task_1.bin"));
  CHECK(fs::exists(dir / "checkpoints/task_2.bin"));
  CHECK(read_text_file((dir / "summary.json").string()) == summary_json(r));

  // Checkpoints persist named tensors, readable and self-describing.
  auto tensors = read_tensor_file((dir / "checkpoints/task_2.bin").string());
  CHECK_FALSE(tensors.empty());
  bool has_psi = false;
  for (const auto& t : tensors) has_psi = has_psi || t.name == "psi";
  CHECK(has_psi);
  fs::remove_all(dir);
}

TEST_CASE("experiment config validation") {
  ExperimentConfig cfg;
  cfg.backbone = tiny_backbone();
  cfg.fed = tiny_hp(2, 3, 2);
  cfg.data.num_classes = 4;  // 3 tasks cannot split 4 classes
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
  CHECK_THROWS_AS(run_experiment(cfg, 35, ""), std::invalid_argument);
}
