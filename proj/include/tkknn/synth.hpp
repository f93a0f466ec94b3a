#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include <json.hpp>

#include "tkknn/data.hpp"
#include "tkknn/engine.hpp"
#include "tkknn/error.hpp"
#include "tkknn/rng.hpp"

namespace tkknn {

// Gaussian blobs around seeded unit-sphere directions. The first
// round(hard_fraction * C) classes use hard_sigma, the rest easy_sigma;
// `overlap_pairs` pairs of hard classes have the second center pulled toward
// the first by `overlap` (1 = identical centers).
struct SynthSpec {
  int num_classes = 8;
  int dim = 16;
  int per_class = 120;
  double radius = 3.0;
  double easy_sigma = 0.45;
  double hard_sigma = 1.05;
  double hard_fraction = 0.5;
  int overlap_pairs = 1;
  double overlap = 0.5;
  std::uint64_t seed = 0;

  void validate() const {
    if (num_classes < 2) throw InputError("synth: num_classes must be >= 2");
    if (dim < 2) throw InputError("synth: dim must be >= 2");
    if (per_class < 4) throw InputError("synth: per_class must be >= 4");
    if (!(easy_sigma > 0.0) || !(hard_sigma > 0.0)) throw InputError("synth: sigmas must be > 0");
    if (!(hard_fraction >= 0.0 && hard_fraction <= 1.0)) throw InputError("synth: hard_fraction must be in [0, 1]");
    if (!(overlap >= 0.0 && overlap <= 1.0)) throw InputError("synth: overlap must be in [0, 1]");
    if (overlap_pairs < 0) throw InputError("synth: overlap_pairs must be >= 0");
    if (!(radius > 0.0)) throw InputError("synth: radius must be > 0");
  }

  int hard_classes() const {
    return static_cast<int>(std::lround(hard_fraction * num_classes));
  }

  double sigma_of(int c) const { return c < hard_classes() ? hard_sigma : easy_sigma; }
};

inline nlohmann::json synth_spec_to_json(const SynthSpec& s) {
  return {{"num_classes", s.num_classes}, {"dim", s.dim},
          {"per_class", s.per_class},     {"radius", s.radius},
          {"easy_sigma", s.easy_sigma},   {"hard_sigma", s.hard_sigma},
          {"hard_fraction", s.hard_fraction}, {"overlap_pairs", s.overlap_pairs},
          {"overlap", s.overlap},         {"seed", s.seed}};
}

inline std::vector<Vector> synth_centers(const SynthSpec& spec) {
  Rng rng(mix_seed(spec.seed ^ 0xce17e5ULL));
  std::vector<Vector> centers;
  for (int c = 0; c < spec.num_classes; ++c) {
    Vector v(spec.dim);
    do {
      for (int i = 0; i < spec.dim; ++i) v(i) = rng.normal();
    } while (v.norm() < 1e-9);
    centers.push_back(v.normalized());
  }
  const int hard = spec.hard_classes();
  for (int pair = 0; pair < spec.overlap_pairs && 2 * pair + 1 < std::max(hard, 2); ++pair) {
    const auto a = static_cast<std::size_t>(2 * pair);
    const auto b = a + 1;
    if (b >= centers.size()) break;
    const Vector mixed = (1.0 - spec.overlap) * centers[b] + spec.overlap * centers[a];
    centers[b] = mixed.norm() > 1e-12 ? mixed.normalized() : centers[a];
    if (spec.overlap >= 1.0) centers[b] = centers[a];
  }
  for (auto& c : centers) c *= spec.radius;
  return centers;
}

// 70/15/15 train/val/test split per class; train labels are visible.
inline Dataset generate(const SynthSpec& spec) {
  spec.validate();
  const auto centers = synth_centers(spec);
  Rng rng(mix_seed(spec.seed ^ 0xb10bULL));
  Dataset ds;
  ds.num_classes = spec.num_classes;
  for (int c = 0; c < spec.num_classes; ++c) {
    ds.class_names.push_back((c < spec.hard_classes() ? "hard_" : "easy_") + std::to_string(c));
  }
  const int n_train = static_cast<int>(std::lround(0.70 * spec.per_class));
  const int n_val = static_cast<int>(std::lround(0.15 * spec.per_class));
  ExampleId next_id = 0;
  for (int c = 0; c < spec.num_classes; ++c) {
    const double sigma = spec.sigma_of(c);
    for (int i = 0; i < spec.per_class; ++i) {
      Example e;
      e.id = next_id++;
      e.features.resize(spec.dim);
      for (int j = 0; j < spec.dim; ++j) e.features(j) = centers[static_cast<std::size_t>(c)](j) + sigma * rng.normal();
      // Store at f32 precision so the features survive the embedding file exactly.
      e.features = e.features.cast<float>().cast<double>();
      e.text = "synthetic " + ds.class_names[static_cast<std::size_t>(c)] + " #" + std::to_string(i);
      e.label = c;
      e.truth = c;
      if (i < n_train) {
        ds.labeled.push_back(std::move(e));
      } else if (i < n_train + n_val) {
        ds.validation.push_back(std::move(e));
      } else {
        ds.test.push_back(std::move(e));
      }
    }
  }
  return ds;
}

struct DifficultyReport {
  std::vector<double> per_class_accuracy;  // on the test split
  std::vector<std::size_t> per_class_support;
  double overall = 0.0;
};

// Trains with every training label visible and reports per-class test
// accuracy.
inline DifficultyReport difficulty_report(const Dataset& dataset, RunConfig cfg = {}, std::uint64_t seed = 0) {
  cfg.strategy = Strategy::supervised;
  cfg.label_fraction = 1.0;
  cfg.labels_per_class = 0;
  Dataset full = dataset;
  for (auto& e : full.unlabeled) {
    if (e.truth) {
      e.label = e.truth;
      full.labeled.push_back(e);
    }
  }
  full.unlabeled.clear();

  DifficultyReport r;
  r.per_class_accuracy.assign(static_cast<std::size_t>(dataset.num_classes), 0.0);
  r.per_class_support.assign(static_cast<std::size_t>(dataset.num_classes), 0);
  if (full.labeled.empty() || full.test.empty()) return r;

  auto state = start_run(full, cfg, seed);
  const auto preds = predict(state.training.params, std::span<const Example>(full.test));
  std::vector<std::size_t> hits(r.per_class_support.size(), 0);
  std::size_t total_hits = 0;
  for (std::size_t i = 0; i < full.test.size(); ++i) {
    const auto t = full.test[i].label ? full.test[i].label : full.test[i].truth;
    if (!t) continue;
    ++r.per_class_support[static_cast<std::size_t>(*t)];
    if (preds[i].cls == *t) {
      ++hits[static_cast<std::size_t>(*t)];
      ++total_hits;
    }
  }
  for (std::size_t c = 0; c < hits.size(); ++c) {
    if (r.per_class_support[c] > 0) {
      r.per_class_accuracy[c] = static_cast<double>(hits[c]) / static_cast<double>(r.per_class_support[c]);
    }
  }
  r.overall = static_cast<double>(total_hits) / static_cast<double>(full.test.size());
  return r;
}

}  // namespace tkknn
