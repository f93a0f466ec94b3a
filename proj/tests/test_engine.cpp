#include <gtest/gtest.h>

#include <set>

#include "support.hpp"
#include "tkknn/engine.hpp"
#include "tkknn/synth.hpp"

using namespace tkknn;
using tkknn::testing::TempDir;

namespace {

Dataset tiny_benchmark(std::uint64_t seed = 0) {
  SynthSpec spec;
  spec.num_classes = 3;
  spec.dim = 4;
  spec.per_class = 30;
  spec.radius = 3.0;
  spec.easy_sigma = 0.5;
  spec.hard_sigma = 1.0;
  spec.seed = seed;
  return generate(spec);
}

RunConfig quick_config(Strategy s) {
  RunConfig cfg;
  cfg.strategy = s;
  cfg.labels_per_class = 1;
  cfg.k = 2;
  cfg.cycles = 4;
  cfg.seeds = 2;
  cfg.max_epochs = 15;
  cfg.patience = 3;
  cfg.min_steps_per_epoch = 2;
  cfg.hidden = {16};
  cfg.proj_dim = 8;
  return cfg;
}

std::set<ExampleId> labeled_ids(const SelfTrainState& s) {
  std::set<ExampleId> out;
  for (const auto& e : s.labeled) out.insert(e.example.id);
  return out;
}

}  // namespace

TEST(TrainToConvergence, SeparableToyReachesPerfectTrainAccuracy) {
  TrainData train, val;
  Rng rng(1);
  train.x.resize(40, 2);
  for (Eigen::Index i = 0; i < 40; ++i) {
    const int y = static_cast<int>(i % 2);
    train.x(i, 0) = (y ? 2.0 : -2.0) + 0.3 * rng.normal();
    train.x(i, 1) = rng.normal();
    train.y.push_back(y);
  }
  val = train;
  RunConfig cfg;
  cfg.max_epochs = 300;
  cfg.patience = 300;
  cfg.batch_size = 8;
  cfg.lr = 1e-2;
  TrainingState st;
  ModelConfig mc;
  mc.input_dim = 2;
  mc.num_classes = 2;
  mc.hidden = {8};
  mc.proj_dim = 4;
  st.params = init_params(mc, rng);
  st.optim = make_optim_state(st.params, adamw_for(cfg));
  st.rng = Rng(2);
  train_to_convergence(st, train, val, cfg);
  EXPECT_EQ(evaluate(st.params, train), 1.0);
}

TEST(TrainToConvergence, PatienceZeroTrainsOneEpoch) {
  auto cfg = quick_config(Strategy::supervised);
  cfg.patience = 0;
  const auto r = run_seed(tiny_benchmark(), cfg, 0);
  ASSERT_EQ(r.traces.size(), 1u);
  EXPECT_EQ(r.traces[0].epochs, 1);
}

TEST(TrainToConvergence, EmptyPoolIsError) {
  TrainingState st;
  EXPECT_THROW(train_to_convergence(st, TrainData{}, TrainData{}, RunConfig{}), InputError);
}

TEST(TrainToConvergence, SameSeedSameWeights) {
  const auto ds = tiny_benchmark();
  const auto cfg = quick_config(Strategy::supervised);
  auto a = start_run(ds, cfg, 3);
  auto b = start_run(ds, cfg, 3);
  EXPECT_EQ(a.traces[0].epochs, b.traces[0].epochs);
  const auto ta = a.training.params.tensors();
  const auto tb = b.training.params.tensors();
  for (std::size_t i = 0; i < ta.size(); ++i) EXPECT_TRUE(*ta[i] == *tb[i]);
}

TEST(RunCycle, BalancedGrowthAndPoolInvariants) {
  const auto ds = tiny_benchmark();
  const auto cfg = quick_config(Strategy::tk_knn);
  auto s = start_run(ds, cfg, 0);
  const std::size_t total = s.labeled.size() + s.unlabeled.size();
  std::set<ExampleId> removed;
  while (can_continue(s)) {
    std::map<ClassId, std::size_t> available;
    for (const auto& p : predict(s.training.params, std::span<const Example>(s.unlabeled))) ++available[p.cls];
    std::size_t expected = 0;
    for (const auto& [c, n] : available) expected += std::min<std::size_t>(n, static_cast<std::size_t>(cfg.k));
    const auto before = labeled_ids(s);
    const auto& t = run_cycle(s);
    const auto after = labeled_ids(s);
    EXPECT_EQ(after.size() - before.size(), expected);
    EXPECT_TRUE(std::includes(after.begin(), after.end(), before.begin(), before.end()));
    EXPECT_EQ(s.labeled.size() + s.unlabeled.size(), total);
    for (auto n : t.new_per_class) EXPECT_LE(n, static_cast<std::size_t>(cfg.k));
    EXPECT_LE(t.new_total(), static_cast<std::size_t>(cfg.k * s.num_classes));
    for (const auto& e : s.unlabeled) EXPECT_EQ(removed.count(e.id), 0u);
    for (ExampleId id : after) {
      if (!before.count(id)) removed.insert(id);
    }
  }
  EXPECT_EQ(s.traces.size(), static_cast<std::size_t>(cfg.cycles) + 1);
  for (std::size_t i = 1; i < s.traces.size(); ++i) EXPECT_GE(s.traces[i].labeled_size, s.traces[i - 1].labeled_size);
}

TEST(RunCycle, StopsWhenUnlabeledPoolEmpties) {
  auto cfg = quick_config(Strategy::tk_knn);
  cfg.k = 40;
  cfg.cycles = 10;
  const auto r = run_seed(tiny_benchmark(), cfg, 0);
  EXPECT_LT(r.traces.size(), 11u);
  EXPECT_EQ(r.traces.back().unlabeled_size, 0u);
}

TEST(RunCycle, SupervisedStopsAfterInitialTraining) {
  const auto r = run_seed(tiny_benchmark(), quick_config(Strategy::supervised), 0);
  EXPECT_EQ(r.traces.size(), 1u);
}

TEST(RunCycle, OracleSelectionsAreAllCorrect) {
  auto cfg = quick_config(Strategy::upper_bound);
  const auto r = run_seed(tiny_benchmark(), cfg, 1);
  for (std::size_t i = 1; i < r.traces.size(); ++i) {
    if (r.traces[i].pseudo_label_accuracy) EXPECT_EQ(*r.traces[i].pseudo_label_accuracy, 1.0);
  }
}

TEST(Experiment, FilesAndDeterminism) {
  const auto ds = tiny_benchmark();
  auto cfg = quick_config(Strategy::tk_knn);
  TempDir a("exp_a"), b("exp_b");
  write_experiment(run_experiment(ds, cfg, 1), ds, a.path());
  write_experiment(run_experiment(ds, cfg, 2), ds, b.path());
  for (const char* f : {"trace_seed0.jsonl", "trace_seed1.jsonl", "summary.json", "config.json", "convergence.csv",
                        "selections_seed0.jsonl"}) {
    ASSERT_TRUE(std::filesystem::exists(a / f)) << f;
    EXPECT_EQ(tkknn::testing::slurp(a / f), tkknn::testing::slurp(b / f)) << f;
  }
}

TEST(Experiment, FiveSeedsFiveTraces) {
  auto cfg = quick_config(Strategy::supervised);
  cfg.seeds = 5;
  const auto ds = tiny_benchmark();
  TempDir dir("exp5");
  const auto r = run_experiment(ds, cfg);
  write_experiment(r, ds, dir.path());
  int traces = 0;
  for (const auto& e : std::filesystem::directory_iterator(dir.path())) {
    traces += e.path().filename().string().starts_with("trace_seed") ? 1 : 0;
  }
  EXPECT_EQ(traces, 5);
  EXPECT_TRUE(r.summary.final_accuracy.half_width.has_value());
}

TEST(Experiment, SingleSeedHasNullInterval) {
  auto cfg = quick_config(Strategy::supervised);
  cfg.seeds = 1;
  const auto ds = tiny_benchmark();
  const auto r = run_experiment(ds, cfg);
  EXPECT_FALSE(r.summary.final_accuracy.half_width.has_value());
  const auto j = summary_to_json({{"supervised", r.summary}});
  EXPECT_TRUE(j["supervised"]["ci95"].is_null());
}

TEST(Config, JsonRoundTripAndUnknownKeys) {
  auto cfg = quick_config(Strategy::pl_flex);
  cfg.knn_anchors = AnchorPool::gold;
  cfg.hidden = {32, 16};
  const auto back = config_from_json(config_to_json(cfg));
  EXPECT_EQ(config_to_json(back).dump(), config_to_json(cfg).dump());
  EXPECT_THROW(config_from_json({{"bogus", 1}}), ConfigError);
  EXPECT_THROW(config_from_json({{"strategy", "nope"}}), ConfigError);
  EXPECT_THROW(config_from_json({{"k", "six"}}), ConfigError);
}

TEST(Config, Defaults) {
  const RunConfig cfg;
  EXPECT_EQ(cfg.k, 6);
  EXPECT_EQ(cfg.beta, 0.75);
  EXPECT_EQ(cfg.gamma, 0.1);
  EXPECT_EQ(cfg.tau, 0.95);
  EXPECT_EQ(cfg.cycles, 30);
  EXPECT_EQ(cfg.seeds, 5);
  EXPECT_EQ(cfg.batch_size, 256);
  EXPECT_FALSE(cfg.reinit_per_cycle);
  RunConfig bad;
  bad.beta = 1.5;
  EXPECT_THROW(bad.validate(), ConfigError);
}

TEST(Trace, JsonlRoundTrip) {
  CycleTrace t;
  t.cycle = 2;
  t.labeled_size = 10;
  t.new_per_class = {1, 2};
  t.cumulative_per_class = {3, 4};
  t.pseudo_label_accuracy = 0.5;
  t.val_accuracy = 0.25;
  t.test_accuracy = 0.125;
  t.epochs = 7;
  const auto back = traces_from_jsonl(traces_to_jsonl({t, t}));
  ASSERT_EQ(back.size(), 2u);
  EXPECT_EQ(trace_to_json(back[1]).dump(), trace_to_json(t).dump());
}
