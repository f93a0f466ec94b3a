#include <gtest/gtest.h>

#include <numeric>
#include <set>

#include "support.hpp"
#include "tkknn/synth.hpp"

using namespace tkknn;
using tkknn::testing::TempDir;

namespace {

RunConfig report_config() {
  RunConfig cfg;
  cfg.max_epochs = 60;
  cfg.patience = 8;
  cfg.use_scl = false;
  cfg.use_koleo = false;
  cfg.lr = 1e-2;
  return cfg;
}

double mean(const std::vector<double>& v) { return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size()); }

}  // namespace

TEST(Synth, SplitSizesAndDisjointness) {
  SynthSpec spec;
  spec.per_class = 20;
  const auto ds = generate(spec);
  EXPECT_EQ(ds.labeled.size(), 8u * 14);
  EXPECT_EQ(ds.validation.size(), 8u * 3);
  EXPECT_EQ(ds.test.size(), 8u * 3);
  std::set<ExampleId> ids;
  for (const auto* s : {&ds.labeled, &ds.validation, &ds.test}) {
    for (const auto& e : *s) {
      EXPECT_TRUE(ids.insert(e.id).second);
      EXPECT_EQ(e.features.size(), spec.dim);
    }
  }
  const auto stats = dataset_stats(ds);
  for (auto n : stats.labeled.per_class) EXPECT_EQ(n, 14u);
}

TEST(Synth, SameSeedSameBytes) {
  SynthSpec spec;
  spec.seed = 5;
  TempDir a("syn_a"), b("syn_b");
  save_dataset_dir(generate(spec), a.path());
  save_dataset_dir(generate(spec), b.path());
  for (const char* f : {"train.jsonl", "train.tknn", "val.tknn", "test.tknn", "manifest.json"}) {
    EXPECT_EQ(tkknn::testing::slurp(a / f), tkknn::testing::slurp(b / f)) << f;
  }
  spec.seed = 6;
  TempDir c("syn_c");
  save_dataset_dir(generate(spec), c.path());
  EXPECT_NE(tkknn::testing::slurp(a / "train.tknn"), tkknn::testing::slurp(c / "train.tknn"));
}

TEST(Synth, InvalidSpec) {
  SynthSpec spec;
  spec.num_classes = 1;
  EXPECT_THROW(generate(spec), InputError);
  spec = {};
  spec.per_class = 3;
  EXPECT_THROW(generate(spec), InputError);
}

TEST(Synth, NoiseFreeLimitIsSeparable) {
  SynthSpec spec;
  spec.easy_sigma = 1e-3;
  spec.hard_sigma = 1e-3;
  spec.overlap_pairs = 0;
  const auto r = difficulty_report(generate(spec), report_config());
  EXPECT_EQ(r.overall, 1.0);
}

// Two classes sharing a center: the Bayes rate on that pair is 1/2, so a
// classifier restricted to the pair can do no better than chance.
TEST(Synth, IdenticalCentersPairIsChance) {
  std::size_t hits = 0, total = 0;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    SynthSpec spec;
    spec.per_class = 400;
    spec.overlap = 1.0;
    spec.seed = seed;
    const auto centers = synth_centers(spec);
    ASSERT_TRUE(centers[0] == centers[1]);
    const auto ds = generate(spec);
    auto cfg = report_config();
    auto full = ds;
    cfg.labels_per_class = 0;
    auto state = start_run(full, cfg, seed);
    for (const auto& e : ds.test) {
      if (*e.truth > 1) continue;
      const auto p = predict(state.training.params, std::span<const Example>(&e, 1))[0];
      const ClassId pick = p.probs(1) > p.probs(0) ? 1 : 0;
      hits += pick == *e.truth ? 1 : 0;
      ++total;
    }
  }
  const double acc = static_cast<double>(hits) / static_cast<double>(total);
  EXPECT_NEAR(acc, 0.5, 0.05);
}

TEST(Synth, SkewedSpecHasHarderHardClasses) {
  std::vector<double> gaps;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    SynthSpec spec;
    spec.seed = seed;
    const auto r = difficulty_report(generate(spec), report_config(), seed);
    double hard = 0.0, easy = 0.0;
    const int nh = spec.hard_classes();
    for (int c = 0; c < spec.num_classes; ++c) (c < nh ? hard : easy) += r.per_class_accuracy[static_cast<std::size_t>(c)];
    gaps.push_back(easy / (spec.num_classes - nh) - hard / nh);
  }
  EXPECT_GT(mean(gaps), 0.05);
}

TEST(Synth, SymmetricSpecHasEvenAccuracies) {
  std::vector<std::vector<double>> per_class(8);
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    SynthSpec spec;
    spec.seed = seed;
    spec.per_class = 400;
    spec.hard_sigma = spec.easy_sigma;
    spec.overlap_pairs = 0;
    const auto r = difficulty_report(generate(spec), report_config(), seed);
    for (std::size_t c = 0; c < 8; ++c) per_class[c].push_back(r.per_class_accuracy[c]);
  }
  std::vector<double> means;
  for (const auto& v : per_class) means.push_back(mean(v));
  EXPECT_LT(*std::max_element(means.begin(), means.end()) - *std::min_element(means.begin(), means.end()), 0.05);
}

TEST(Synth, NoSkewReportIsWellFormed) {
  SynthSpec spec;
  spec.hard_fraction = 0.0;
  spec.per_class = 20;
  const auto r = difficulty_report(generate(spec), report_config());
  EXPECT_EQ(r.per_class_accuracy.size(), 8u);
  EXPECT_EQ(r.per_class_support.size(), 8u);
  for (double a : r.per_class_accuracy) {
    EXPECT_GE(a, 0.0);
    EXPECT_LE(a, 1.0);
  }
}
