#pragma once

#include <algorithm>
#include <atomic>
#include <exception>
#include <sstream>
#include <filesystem>
#include <map>
#include <numeric>
#include <optional>
#include <set>
#include <string>
#include <thread>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "tkknn/data.hpp"
#include "tkknn/error.hpp"
#include "tkknn/log.hpp"
#include "tkknn/losses.hpp"
#include "tkknn/model.hpp"
#include "tkknn/optim.hpp"
#include "tkknn/report.hpp"
#include "tkknn/rng.hpp"
#include "tkknn/strategies.hpp"

namespace tkknn {

enum class AnchorPool { all, gold };

struct RunConfig {
  Strategy strategy = Strategy::tk_knn;
  int k = 6;
  double beta = 0.75;
  double gamma = 0.1;
  double tau = 0.95;
  double tau_scl = 0.07;
  int cycles = 30;
  int seeds = 5;
  std::uint64_t seed = 0;  // seed of the first run; run i uses seed + i
  int patience = 5;
  int batch_size = 256;
  int max_epochs = 200;
  int min_steps_per_epoch = 20;  // passes over a small pool repeat until reached
  bool reinit_per_cycle = false;
  bool relabel = false;
  bool use_ce = true;
  bool use_scl = true;
  bool use_koleo = true;
  bool literal_supcon = false;
  double label_fraction = 1.0;
  int labels_per_class = 0;
  bool stratified = true;
  double lr = 1e-3;
  double weight_decay = 0.01;
  std::vector<int> hidden = {64};
  int proj_dim = 32;
  double head_dropout = 0.1;
  double aug_dropout = 0.2;
  AnchorPool knn_anchors = AnchorPool::all;

  LossSpec loss_spec() const { return {use_ce, use_scl, use_koleo, gamma, tau_scl, literal_supcon}; }

  void validate() const {
    auto fail = [](const std::string& m) { throw ConfigError(m); };
    if (cycles < 1) fail("cycles must be >= 1");
    if (seeds < 1) fail("seeds must be >= 1");
    if (k < 1) fail("k must be >= 1");
    if (!(beta >= 0.0 && beta <= 1.0)) fail("beta must be in [0, 1]");
    if (!(tau > 0.0 && tau <= 1.0)) fail("tau must be in (0, 1]");
    if (!(tau_scl > 0.0)) fail("tau_scl must be > 0");
    if (!std::isfinite(gamma) || gamma < 0.0) fail("gamma must be finite and >= 0");
    if (patience < 0) fail("patience must be >= 0");
    if (batch_size < 1) fail("batch_size must be >= 1");
    if (max_epochs < 1) fail("max_epochs must be >= 1");
    if (min_steps_per_epoch < 1) fail("min_steps_per_epoch must be >= 1");
    if (labels_per_class < 0) fail("labels_per_class must be >= 0");
    if (labels_per_class == 0 && !(label_fraction > 0.0 && label_fraction <= 1.0)) {
      fail("label_fraction must be in (0, 1]");
    }
    if (!(lr > 0.0)) fail("lr must be > 0");
    if (weight_decay < 0.0) fail("weight_decay must be >= 0");
    if (!use_ce && !use_scl && !use_koleo) fail("at least one loss term must be enabled");
    for (int h : hidden) {
      if (h < 1) fail("hidden sizes must be >= 1");
    }
    if (proj_dim < 1) fail("proj_dim must be >= 1");
    if (!(head_dropout >= 0.0 && head_dropout < 1.0)) fail("head_dropout must be in [0, 1)");
    if (!(aug_dropout >= 0.0 && aug_dropout < 1.0)) fail("aug_dropout must be in [0, 1)");
  }
};

inline nlohmann::json config_to_json(const RunConfig& c) {
  return {{"strategy", std::string(strategy_name(c.strategy))},
          {"k", c.k},
          {"beta", c.beta},
          {"gamma", c.gamma},
          {"tau", c.tau},
          {"tau_scl", c.tau_scl},
          {"cycles", c.cycles},
          {"seeds", c.seeds},
          {"seed", c.seed},
          {"patience", c.patience},
          {"batch_size", c.batch_size},
          {"max_epochs", c.max_epochs},
          {"min_steps_per_epoch", c.min_steps_per_epoch},
          {"reinit_per_cycle", c.reinit_per_cycle},
          {"relabel", c.relabel},
          {"use_ce", c.use_ce},
          {"use_scl", c.use_scl},
          {"use_koleo", c.use_koleo},
          {"literal_supcon", c.literal_supcon},
          {"label_fraction", c.label_fraction},
          {"labels_per_class", c.labels_per_class},
          {"stratified", c.stratified},
          {"lr", c.lr},
          {"weight_decay", c.weight_decay},
          {"hidden", c.hidden},
          {"proj_dim", c.proj_dim},
          {"head_dropout", c.head_dropout},
          {"aug_dropout", c.aug_dropout},
          {"knn_anchors", c.knn_anchors == AnchorPool::all ? "all" : "gold"}};
}

// Overlays the keys present in `j` onto `base`. Unknown keys are rejected.
inline RunConfig config_from_json(const nlohmann::json& j, RunConfig base = {}) {
  if (!j.is_object()) throw ConfigError("config must be a JSON object");
  const auto known = config_to_json(base);
  for (const auto& [key, value] : j.items()) {
    if (!known.contains(key)) throw ConfigError("unknown config key \"" + key + "\"");
  }
  try {
    auto get = [&](const char* key, auto& field) {
      if (j.contains(key)) field = j.at(key).get<std::decay_t<decltype(field)>>();
    };
    if (j.contains("strategy")) {
      const auto name = j.at("strategy").get<std::string>();
      const auto s = parse_strategy(name);
      if (!s) throw ConfigError("unknown strategy \"" + name + "\"");
      base.strategy = *s;
    }
    if (j.contains("knn_anchors")) {
      const auto v = j.at("knn_anchors").get<std::string>();
      if (v != "all" && v != "gold") throw ConfigError("knn_anchors must be \"all\" or \"gold\"");
      base.knn_anchors = v == "all" ? AnchorPool::all : AnchorPool::gold;
    }
    get("k", base.k);
    get("beta", base.beta);
    get("gamma", base.gamma);
    get("tau", base.tau);
    get("tau_scl", base.tau_scl);
    get("cycles", base.cycles);
    get("seeds", base.seeds);
    get("seed", base.seed);
    get("patience", base.patience);
    get("batch_size", base.batch_size);
    get("max_epochs", base.max_epochs);
    get("min_steps_per_epoch", base.min_steps_per_epoch);
    get("reinit_per_cycle", base.reinit_per_cycle);
    get("relabel", base.relabel);
    get("use_ce", base.use_ce);
    get("use_scl", base.use_scl);
    get("use_koleo", base.use_koleo);
    get("literal_supcon", base.literal_supcon);
    get("label_fraction", base.label_fraction);
    get("labels_per_class", base.labels_per_class);
    get("stratified", base.stratified);
    get("lr", base.lr);
    get("weight_decay", base.weight_decay);
    get("hidden", base.hidden);
    get("proj_dim", base.proj_dim);
    get("head_dropout", base.head_dropout);
    get("aug_dropout", base.aug_dropout);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("bad config value: ") + e.what());
  }
  return base;
}

struct CycleTrace {
  int cycle = 0;
  std::size_t labeled_size = 0;
  std::size_t unlabeled_size = 0;
  std::vector<std::size_t> new_per_class;
  std::vector<std::size_t> cumulative_per_class;  // pseudo-labels accepted so far, by pseudo-label
  std::optional<double> pseudo_label_accuracy;    // of this cycle's selections
  double val_accuracy = 0.0;
  double test_accuracy = 0.0;
  int epochs = 0;

  std::size_t new_total() const { return std::accumulate(new_per_class.begin(), new_per_class.end(), std::size_t{0}); }
};

inline nlohmann::json trace_to_json(const CycleTrace& t) {
  return {{"cycle", t.cycle},
          {"labeled_size", t.labeled_size},
          {"unlabeled_size", t.unlabeled_size},
          {"new_total", t.new_total()},
          {"new_per_class", t.new_per_class},
          {"cumulative_per_class", t.cumulative_per_class},
          {"pseudo_label_accuracy",
           t.pseudo_label_accuracy ? nlohmann::json(*t.pseudo_label_accuracy) : nlohmann::json(nullptr)},
          {"val_accuracy", t.val_accuracy},
          {"test_accuracy", t.test_accuracy},
          {"epochs", t.epochs}};
}

inline CycleTrace trace_from_json(const nlohmann::json& j) {
  CycleTrace t;
  t.cycle = j.at("cycle").get<int>();
  t.labeled_size = j.at("labeled_size").get<std::size_t>();
  t.unlabeled_size = j.at("unlabeled_size").get<std::size_t>();
  t.new_per_class = j.at("new_per_class").get<std::vector<std::size_t>>();
  t.cumulative_per_class = j.at("cumulative_per_class").get<std::vector<std::size_t>>();
  if (!j.at("pseudo_label_accuracy").is_null()) t.pseudo_label_accuracy = j.at("pseudo_label_accuracy").get<double>();
  t.val_accuracy = j.at("val_accuracy").get<double>();
  t.test_accuracy = j.at("test_accuracy").get<double>();
  t.epochs = j.at("epochs").get<int>();
  return t;
}

inline std::string traces_to_jsonl(const std::vector<CycleTrace>& traces) {
  std::string out;
  for (const auto& t : traces) out += trace_to_json(t).dump() + "\n";
  return out;
}

inline std::vector<CycleTrace> traces_from_jsonl(const std::string& text) {
  std::vector<CycleTrace> out;
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      out.push_back(trace_from_json(nlohmann::json::parse(line)));
    } catch (const nlohmann::json::exception& e) {
      throw ParseError(lineno, e.what());
    }
  }
  return out;
}

// A labeled-pool entry: gold or accepted pseudo-label.
struct PoolEntry {
  Example example;
  ClassId label = 0;
  bool gold = true;
};

struct TrainData {
  Matrix x;
  std::vector<ClassId> y;
};

inline TrainData pool_data(const std::vector<PoolEntry>& pool, int dim) {
  TrainData d;
  d.x.resize(static_cast<Eigen::Index>(pool.size()), dim);
  for (std::size_t i = 0; i < pool.size(); ++i) {
    d.x.row(static_cast<Eigen::Index>(i)) = pool[i].example.features.transpose();
    d.y.push_back(pool[i].label);
  }
  return d;
}

inline TrainData split_data(const std::vector<Example>& split, int dim) {
  TrainData d;
  d.x = stack_features(split, dim);
  for (const auto& e : split) {
    const auto l = e.label ? e.label : e.truth;
    if (!l) throw InputError("evaluation example " + std::to_string(e.id) + " has no label");
    d.y.push_back(*l);
  }
  return d;
}

inline double evaluate(const ModelParams& params, const TrainData& data) {
  if (data.y.empty()) return 0.0;
  const auto preds = predict(params, data.x);
  std::vector<ClassId> cls;
  for (const auto& p : preds) cls.push_back(p.cls);
  return accuracy(cls, data.y);
}

struct TrainingState {
  ModelParams params;
  OptimState optim;
  Rng rng;
};

struct TrainOutcome {
  int epochs = 0;
  double best_val = 0.0;
  double last_loss = 0.0;
};

// Minibatch training with early stopping on validation accuracy, evaluated
// once per epoch. Stops once `patience` consecutive evaluations fail to
// improve on the best, or at max_epochs; the best-validation weights and
// optimizer state are restored.
inline TrainOutcome train_to_convergence(TrainingState& st, const TrainData& train, const TrainData& val,
                                         const RunConfig& cfg) {
  if (train.y.empty()) throw InputError("train_to_convergence: empty labeled pool");
  const auto spec = cfg.loss_spec();
  const auto n = static_cast<std::size_t>(train.x.rows());
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});

  TrainOutcome out;
  // The incoming weights are the epoch-0 candidate, so a warm-started cycle
  // never ends below the model it started from on validation.
  out.best_val = val.y.empty() ? -1.0 : evaluate(st.params, val);
  ModelParams best_params = st.params;
  OptimState best_optim = st.optim;
  int since_best = 0;
  for (int epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    int steps = 0;
    while (steps < cfg.min_steps_per_epoch) {
    st.rng.shuffle(std::span(order));
    for (std::size_t start = 0; start < n; start += static_cast<std::size_t>(cfg.batch_size), ++steps) {
      const std::size_t end = std::min(n, start + static_cast<std::size_t>(cfg.batch_size));
      Matrix xb(static_cast<Eigen::Index>(end - start), train.x.cols());
      std::vector<ClassId> yb;
      for (std::size_t i = start; i < end; ++i) {
        xb.row(static_cast<Eigen::Index>(i - start)) = train.x.row(static_cast<Eigen::Index>(order[i]));
        yb.push_back(train.y[order[i]]);
      }
      const auto masks = sample_masks(st.params.config, xb.rows(), st.rng);
      auto res = backward(st.params, xb, yb, spec, masks);
      out.last_loss = res.loss.total;
      optimizer_step(st.params, res.grads, st.optim);
    }
    }
    out.epochs = epoch;
    const double acc = val.y.empty() ? 0.0 : evaluate(st.params, val);
    if (acc > out.best_val) {
      out.best_val = acc;
      best_params = st.params;
      best_optim = st.optim;
      since_best = 0;
    } else {
      ++since_best;
    }
    if (since_best >= cfg.patience) break;
  }
  st.params = std::move(best_params);
  st.optim = std::move(best_optim);
  return out;
}

inline ModelConfig model_config_for(const RunConfig& cfg, int input_dim, int num_classes) {
  ModelConfig m;
  m.input_dim = input_dim;
  m.hidden = cfg.hidden;
  m.num_classes = num_classes;
  m.proj_dim = cfg.proj_dim;
  m.head_dropout = cfg.head_dropout;
  m.aug_dropout = cfg.aug_dropout;
  return m;
}

inline AdamWConfig adamw_for(const RunConfig& cfg) {
  AdamWConfig a;
  a.lr = cfg.lr;
  a.weight_decay = cfg.weight_decay;
  return a;
}

inline bool is_topk(Strategy s) {
  return s == Strategy::tk_knn || s == Strategy::tk_knn_unbalanced || s == Strategy::upper_bound;
}

// Everything one seed's self-training run carries between cycles.
struct SelfTrainState {
  RunConfig cfg;
  int num_classes = 0;
  int dim = 0;
  std::uint64_t seed = 0;
  TrainingState training;
  std::vector<PoolEntry> labeled;
  std::vector<Example> unlabeled;
  TrainData val, test;
  FlexState flex;
  std::vector<std::size_t> cumulative;
  int cycle = 0;  // index of the last completed cycle
  std::vector<CycleTrace> traces;
  std::vector<SelectionResult> selections;
};

inline void train_and_record(SelfTrainState& s, CycleTrace trace) {
  if (s.cfg.reinit_per_cycle && s.cycle > 0) {
    Rng init = Rng(mix_seed(s.seed ^ 0x1417ULL)).fork(static_cast<std::uint64_t>(s.cycle));
    s.training.params = init_params(s.training.params.config, init);
    s.training.optim = make_optim_state(s.training.params, adamw_for(s.cfg));
  }
  const auto outcome = train_to_convergence(s.training, pool_data(s.labeled, s.dim), s.val, s.cfg);
  trace.epochs = outcome.epochs;
  trace.labeled_size = s.labeled.size();
  trace.unlabeled_size = s.unlabeled.size();
  trace.cumulative_per_class = s.cumulative;
  trace.val_accuracy = evaluate(s.training.params, s.val);
  trace.test_accuracy = evaluate(s.training.params, s.test);
  s.traces.push_back(std::move(trace));
}

// Splits labels for this seed, initializes the model, and trains cycle 0 on
// the gold labels only.
inline SelfTrainState start_run(const Dataset& dataset, const RunConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  SelfTrainState s;
  s.cfg = cfg;
  s.seed = seed;
  s.num_classes = dataset.num_classes;
  s.dim = static_cast<int>(dataset.dim());
  if (s.dim == 0) throw InputError("dataset has no features");

  Dataset split = dataset;
  if (cfg.labels_per_class > 0 || cfg.label_fraction < 1.0) {
    split = subsample_labels(dataset, {cfg.label_fraction, seed, cfg.stratified, cfg.labels_per_class});
  }
  for (auto& e : split.labeled) {
    resolve_features(e);
    s.labeled.push_back({e, *e.label, true});
  }
  for (auto& e : split.unlabeled) {
    resolve_features(e);
    s.unlabeled.push_back(e);
  }
  if (s.labeled.empty()) throw InputError("no labeled examples after split");
  s.val = split_data(split.validation, s.dim);
  s.test = split_data(split.test, s.dim);
  s.flex.tau = cfg.tau;
  s.cumulative.assign(static_cast<std::size_t>(s.num_classes), 0);

  Rng init(mix_seed(seed ^ 0x1417ULL));
  s.training.params = init_params(model_config_for(cfg, s.dim, s.num_classes), init);
  s.training.optim = make_optim_state(s.training.params, adamw_for(cfg));
  s.training.rng = Rng(mix_seed(seed ^ 0x7a1bULL));

  CycleTrace t;
  t.cycle = 0;
  t.new_per_class.assign(static_cast<std::size_t>(s.num_classes), 0);
  train_and_record(s, std::move(t));
  return s;
}

inline bool can_continue(const SelfTrainState& s) {
  if (s.cfg.strategy == Strategy::supervised) return false;
  if (s.cycle >= s.cfg.cycles) return false;
  const bool any_pseudo = std::any_of(s.labeled.begin(), s.labeled.end(), [](const PoolEntry& e) { return !e.gold; });
  return !s.unlabeled.empty() || (s.cfg.relabel && any_pseudo);
}

// Ranks the current unlabeled pool and picks this cycle's pseudo-labels.
inline SelectionResult select_for_cycle(SelfTrainState& s) {
  const auto& cfg = s.cfg;
  const auto preds = predict(s.training.params, std::span<const Example>(s.unlabeled));
  std::vector<CandidateInput> inputs(s.unlabeled.size());
  for (std::size_t i = 0; i < s.unlabeled.size(); ++i) {
    inputs[i] = {s.unlabeled[i].id, preds[i].cls, preds[i].confidence, preds[i].z};
  }

  const bool knn = is_topk(cfg.strategy) && cfg.beta > 0.0;
  std::vector<Matrix> anchors(static_cast<std::size_t>(s.num_classes));
  if (knn) {
    std::vector<Example> pool;
    std::vector<ClassId> labels;
    for (const auto& e : s.labeled) {
      if (cfg.knn_anchors == AnchorPool::gold && !e.gold) continue;
      pool.push_back(e.example);
      labels.push_back(e.label);
    }
    const auto pool_preds = predict(s.training.params, std::span<const Example>(pool));
    std::vector<std::vector<std::size_t>> members(static_cast<std::size_t>(s.num_classes));
    for (std::size_t i = 0; i < labels.size(); ++i) members[static_cast<std::size_t>(labels[i])].push_back(i);
    for (std::size_t c = 0; c < members.size(); ++c) {
      anchors[c].resize(static_cast<Eigen::Index>(members[c].size()), s.training.params.config.latent_dim());
      for (std::size_t r = 0; r < members[c].size(); ++r) {
        anchors[c].row(static_cast<Eigen::Index>(r)) = pool_preds[members[c][r]].z.transpose();
      }
    }
  }
  std::vector<ClassId> empty_classes;
  const auto cands = score_candidates(inputs, anchors, knn ? cfg.beta : 0.0, knn, &empty_classes);
  if (!empty_classes.empty()) {
    log::warn("cycle ", s.cycle + 1, ": ", empty_classes.size(), " predicted classes have no KNN anchors");
  }

  SelectionResult sel;
  switch (cfg.strategy) {
    case Strategy::supervised: break;
    case Strategy::pl: sel = select_all_pl(cands); break;
    case Strategy::pl_t: sel = select_threshold(cands, cfg.tau); break;
    case Strategy::pl_flex: sel = select_flex(cands, s.flex, s.num_classes); break;
    case Strategy::tk_knn:
    case Strategy::upper_bound: sel = select_topk_balanced(cands, cfg.k); break;
    case Strategy::tk_knn_unbalanced: sel = select_topk_unbalanced(cands, cfg.k, s.num_classes); break;
  }
  if (cfg.strategy == Strategy::upper_bound) {
    std::unordered_map<ExampleId, ClassId> truth;
    for (const auto& e : s.unlabeled) {
      if (e.truth) truth[e.id] = *e.truth;
    }
    sel = oracle_upper_bound(sel, [&](ExampleId id) -> std::optional<ClassId> {
      auto it = truth.find(id);
      return it == truth.end() ? std::nullopt : std::optional(it->second);
    });
  }
  sel.strategy = std::string(strategy_name(cfg.strategy));
  sel.cycle = s.cycle + 1;
  return sel;
}

// One self-training cycle: predict on U, score, select, move the selection
// into the labeled pool, retrain, evaluate. With an empty U the cycle only
// retrains.
inline const CycleTrace& run_cycle(SelfTrainState& s) {
  if (s.cycle >= s.cfg.cycles) throw InputError("run_cycle: all cycles completed");
  if (s.cfg.relabel) {
    // Return pseudo-labeled examples to U so they are re-predicted.
    std::vector<PoolEntry> kept;
    for (auto& e : s.labeled) {
      if (e.gold) {
        kept.push_back(std::move(e));
      } else {
        s.unlabeled.push_back(std::move(e.example));
      }
    }
    s.labeled = std::move(kept);
    std::sort(s.unlabeled.begin(), s.unlabeled.end(), [](const Example& a, const Example& b) { return a.id < b.id; });
    s.cumulative.assign(s.cumulative.size(), 0);
  }

  CycleTrace trace;
  trace.cycle = s.cycle + 1;
  trace.new_per_class.assign(static_cast<std::size_t>(s.num_classes), 0);
  if (!s.unlabeled.empty() && s.cfg.strategy != Strategy::supervised) {
    auto sel = select_for_cycle(s);
    std::unordered_map<ExampleId, ClassId> chosen;
    for (const auto& x : sel.selected) chosen[x.id] = x.pseudo_label;
    std::vector<Example> remaining;
    std::size_t correct = 0;
    for (auto& e : s.unlabeled) {
      auto it = chosen.find(e.id);
      if (it == chosen.end()) {
        remaining.push_back(std::move(e));
        continue;
      }
      const ClassId label = it->second;
      if (e.truth && *e.truth == label) ++correct;
      ++trace.new_per_class[static_cast<std::size_t>(label)];
      ++s.cumulative[static_cast<std::size_t>(label)];
      s.labeled.push_back({std::move(e), label, false});
    }
    s.unlabeled = std::move(remaining);
    if (!chosen.empty()) trace.pseudo_label_accuracy = static_cast<double>(correct) / static_cast<double>(chosen.size());
    s.selections.push_back(std::move(sel));
  }
  ++s.cycle;
  train_and_record(s, std::move(trace));
  return s.traces.back();
}

struct SeedResult {
  std::uint64_t seed = 0;
  std::vector<CycleTrace> traces;
  std::vector<SelectionResult> selections;
};

inline SeedResult run_seed(const Dataset& dataset, const RunConfig& cfg, std::uint64_t seed) {
  auto s = start_run(dataset, cfg, seed);
  while (can_continue(s)) run_cycle(s);
  return {seed, std::move(s.traces), std::move(s.selections)};
}

struct ExperimentResult {
  RunConfig config;
  std::vector<SeedResult> runs;
  StrategySummary summary;
};

inline ConvergenceSeries series_of(const std::string& name, const std::vector<SeedResult>& runs) {
  ConvergenceSeries s;
  s.strategy = name;
  for (const auto& r : runs) {
    std::vector<double> acc;
    for (const auto& t : r.traces) acc.push_back(t.test_accuracy);
    s.per_seed.push_back(std::move(acc));
  }
  return s;
}

// Runs `jobs` seeds at a time; each seed has its own split, init and rng so
// results do not depend on scheduling.
template <typename Fn>
void parallel_for(std::size_t n, int jobs, Fn&& fn) {
  if (jobs <= 1 || n <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::vector<std::exception_ptr> errors(n);
  std::vector<std::thread> workers;
  const auto count = std::min<std::size_t>(static_cast<std::size_t>(jobs), n);
  for (std::size_t w = 0; w < count; ++w) {
    workers.emplace_back([&] {
      for (std::size_t i = next++; i < n; i = next++) {
        try {
          fn(i);
        } catch (...) {
          errors[i] = std::current_exception();
        }
      }
    });
  }
  for (auto& t : workers) t.join();
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

inline ExperimentResult run_experiment(const Dataset& dataset, const RunConfig& cfg, int jobs = 1) {
  cfg.validate();
  ExperimentResult out;
  out.config = cfg;
  out.runs.resize(static_cast<std::size_t>(cfg.seeds));
  parallel_for(out.runs.size(), jobs, [&](std::size_t i) {
    out.runs[i] = run_seed(dataset, cfg, cfg.seed + i);
  });
  out.summary = summarize(series_of(std::string(strategy_name(cfg.strategy)), out.runs));
  return out;
}

// Writes config.json, trace_seed<N>.jsonl, selections_seed<N>.jsonl,
// summary.json and convergence.csv under `dir`.
inline void write_experiment(const ExperimentResult& r, const Dataset& dataset, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  detail::write_file(dir / "config.json", config_to_json(r.config).dump(2) + "\n");
  std::unordered_map<ExampleId, ClassId> truth;
  for (const auto* split : {&dataset.labeled, &dataset.unlabeled}) {
    for (const auto& e : *split) {
      if (const auto t = e.truth ? e.truth : e.label) truth[e.id] = *t;
    }
  }
  const TruthLookup lookup = [&](ExampleId id) -> std::optional<ClassId> {
    auto it = truth.find(id);
    return it == truth.end() ? std::nullopt : std::optional(it->second);
  };
  for (const auto& run : r.runs) {
    const auto tag = std::to_string(run.seed);
    detail::write_file(dir / ("trace_seed" + tag + ".jsonl"), traces_to_jsonl(run.traces));
    std::string sel;
    for (const auto& s : run.selections) sel += selection_to_jsonl(s, lookup);
    detail::write_file(dir / ("selections_seed" + tag + ".jsonl"), sel);
  }
  const auto name = std::string(strategy_name(r.config.strategy));
  Summary summary{{name, r.summary}};
  detail::write_file(dir / "summary.json", summary_to_json(summary).dump(2) + "\n");
  const ConvergenceSeries series[] = {series_of(name, r.runs)};
  detail::write_file(dir / "convergence.csv", emit_convergence(series));
}

}  // namespace tkknn
