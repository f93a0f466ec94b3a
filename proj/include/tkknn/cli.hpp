#pragma once

#include <algorithm>
#include <filesystem>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "tkknn/data.hpp"
#include "tkknn/engine.hpp"
#include "tkknn/error.hpp"
#include "tkknn/log.hpp"
#include "tkknn/report.hpp"
#include "tkknn/synth.hpp"

namespace tkknn::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitRuntime = 1;
inline constexpr int kExitUsage = 2;

struct UsageError : Error { using Error::Error; };

// Flags shared by selftrain, sweep and train. Unset flags leave the config
// file (or built-in defaults) untouched.
struct RunFlags {
  std::string data;
  std::string config;
  std::string out;
  int jobs = 1;
  std::optional<std::string> strategy;
  std::optional<int> k;
  std::optional<double> beta;
  std::optional<double> gamma;
  std::optional<double> tau;
  std::optional<double> tau_scl;
  std::optional<int> cycles;
  std::optional<int> seeds;
  std::optional<std::uint64_t> seed;
  std::optional<double> label_fraction;
  std::optional<int> labels_per_class;
  std::optional<int> patience;
  std::optional<int> batch_size;
  std::optional<int> max_epochs;
  std::optional<int> min_steps;
  std::optional<double> lr;
  std::optional<double> weight_decay;
  std::optional<std::string> losses;
  std::optional<std::string> knn_anchors;
  bool reinit = false;
  bool relabel = false;
  bool no_stratify = false;
  bool literal_supcon = false;
};

inline void add_run_flags(CLI::App* app, RunFlags& f, bool with_strategy = true) {
  app->add_option("--data", f.data, "Dataset directory ({train,val,test}.jsonl + .tknn)")->required();
  app->add_option("--config", f.config, "JSON config file; flags override its values");
  app->add_option("--out", f.out, "Output directory")->required();
  app->add_option("--jobs", f.jobs, "Parallel seeds")->check(CLI::PositiveNumber);
  if (with_strategy) {
    app->add_option("--strategy", f.strategy, "Pseudo-labeling strategy")
        ->check(CLI::IsMember({"supervised", "pl", "pl-t", "pl-flex", "tk-knn", "tk-knn-unbalanced", "upper-bound"}));
  }
  app->add_option("--k", f.k, "Top-k per class")->check(CLI::PositiveNumber);
  app->add_option("--beta", f.beta, "Weight of KNN similarity in the score")->check(CLI::Range(0.0, 1.0));
  app->add_option("--gamma", f.gamma, "KoLeo weight")->check(CLI::NonNegativeNumber);
  app->add_option("--tau", f.tau, "Confidence threshold for pl-t / pl-flex")->check(CLI::Range(0.0, 1.0));
  app->add_option("--tau-scl", f.tau_scl, "Contrastive temperature")->check(CLI::PositiveNumber);
  app->add_option("--cycles", f.cycles, "Self-training cycles")->check(CLI::PositiveNumber);
  app->add_option("--seeds", f.seeds, "Number of seeds")->check(CLI::PositiveNumber);
  app->add_option("--seed", f.seed, "First seed");
  app->add_option("--label-fraction", f.label_fraction, "Fraction of training labels kept")
      ->check(CLI::Range(0.0, 1.0));
  app->add_option("--labels-per-class", f.labels_per_class, "Exact labels kept per class (overrides fraction)")
      ->check(CLI::NonNegativeNumber);
  app->add_option("--patience", f.patience, "Early-stopping patience")->check(CLI::NonNegativeNumber);
  app->add_option("--batch-size", f.batch_size)->check(CLI::PositiveNumber);
  app->add_option("--max-epochs", f.max_epochs)->check(CLI::PositiveNumber);
  app->add_option("--min-steps-per-epoch", f.min_steps)->check(CLI::PositiveNumber);
  app->add_option("--lr", f.lr)->check(CLI::PositiveNumber);
  app->add_option("--weight-decay", f.weight_decay)->check(CLI::NonNegativeNumber);
  app->add_option("--losses", f.losses, "Loss terms joined by '+': ce, scl, koleo");
  app->add_option("--knn-anchors", f.knn_anchors, "KNN anchor pool")->check(CLI::IsMember({"all", "gold"}));
  app->add_flag("--reinit-per-cycle", f.reinit, "Re-initialize weights every cycle");
  app->add_flag("--relabel", f.relabel, "Re-predict accepted pseudo-labels every cycle");
  app->add_flag("--no-stratify", f.no_stratify, "Plain random label subsampling");
  app->add_flag("--literal-supcon", f.literal_supcon, "Contrastive ratio without exponentials");
}

inline RunConfig resolve_config(const RunFlags& f, RunConfig base = {}) {
  RunConfig cfg = base;
  if (!f.config.empty()) {
    std::ifstream in(f.config);
    if (!in) throw UsageError("cannot open config " + f.config);
    nlohmann::json j;
    try {
      in >> j;
    } catch (const nlohmann::json::exception& e) {
      throw UsageError(std::string("config is not valid JSON: ") + e.what());
    }
    try {
      cfg = config_from_json(j, cfg);
    } catch (const ConfigError& e) {
      throw UsageError(e.what());
    }
  }
  if (f.strategy) cfg.strategy = *parse_strategy(*f.strategy);
  if (f.k) cfg.k = *f.k;
  if (f.beta) cfg.beta = *f.beta;
  if (f.gamma) cfg.gamma = *f.gamma;
  if (f.tau) cfg.tau = *f.tau;
  if (f.tau_scl) cfg.tau_scl = *f.tau_scl;
  if (f.cycles) cfg.cycles = *f.cycles;
  if (f.seeds) cfg.seeds = *f.seeds;
  if (f.seed) cfg.seed = *f.seed;
  if (f.label_fraction) cfg.label_fraction = *f.label_fraction;
  if (f.labels_per_class) cfg.labels_per_class = *f.labels_per_class;
  if (f.patience) cfg.patience = *f.patience;
  if (f.batch_size) cfg.batch_size = *f.batch_size;
  if (f.max_epochs) cfg.max_epochs = *f.max_epochs;
  if (f.min_steps) cfg.min_steps_per_epoch = *f.min_steps;
  if (f.lr) cfg.lr = *f.lr;
  if (f.weight_decay) cfg.weight_decay = *f.weight_decay;
  if (f.knn_anchors) cfg.knn_anchors = *f.knn_anchors == "gold" ? AnchorPool::gold : AnchorPool::all;
  if (f.reinit) cfg.reinit_per_cycle = true;
  if (f.relabel) cfg.relabel = true;
  if (f.no_stratify) cfg.stratified = false;
  if (f.literal_supcon) cfg.literal_supcon = true;
  if (f.losses) {
    cfg.use_ce = cfg.use_scl = cfg.use_koleo = false;
    std::stringstream ss(*f.losses);
    std::string term;
    while (std::getline(ss, term, '+')) {
      if (term == "ce") cfg.use_ce = true;
      else if (term == "scl" || term == "con") cfg.use_scl = true;
      else if (term == "koleo" || term == "der") cfg.use_koleo = true;
      else throw UsageError("unknown loss term \"" + term + "\"");
    }
  }
  try {
    cfg.validate();
  } catch (const ConfigError& e) {
    throw UsageError(e.what());
  }
  return cfg;
}

inline Dataset load_data(const std::string& dir) {
  if (!std::filesystem::is_directory(dir)) throw InputError("dataset directory not found: " + dir);
  return load_dataset_dir(dir);
}

inline std::string losses_label(const RunConfig& c) {
  std::string s;
  auto add = [&](bool on, const char* name) {
    if (!on) return;
    if (!s.empty()) s += "+";
    s += name;
  };
  add(c.use_ce, "CE");
  add(c.use_scl, "CON");
  add(c.use_koleo, "DER");
  return s;
}

inline std::string regime_label(const RunConfig& c) {
  if (c.labels_per_class > 0) return std::to_string(c.labels_per_class) + " label/class";
  std::ostringstream os;
  os << c.label_fraction * 100.0 << "%";
  return os.str();
}

inline std::string variant_label(const RunConfig& c) {
  switch (c.strategy) {
    case Strategy::tk_knn: return c.beta > 0.0 ? "B+KNN" : "B";
    case Strategy::tk_knn_unbalanced: return c.beta > 0.0 ? "U+KNN" : "U";
    default: return std::string(strategy_name(c.strategy));
  }
}

// A directory holding one experiment's outputs.
struct RunDir {
  std::string label;
  RunConfig config;
  std::vector<std::vector<CycleTrace>> traces;
};

inline std::optional<RunDir> read_run_dir(const std::filesystem::path& dir, const std::string& label) {
  if (!std::filesystem::exists(dir / "config.json")) return std::nullopt;
  RunDir r;
  r.label = label;
  r.config = config_from_json(nlohmann::json::parse(detail::read_file(dir / "config.json")));
  std::vector<std::filesystem::path> files;
  for (const auto& entry : std::filesystem::directory_iterator(dir)) {
    const auto name = entry.path().filename().string();
    if (name.rfind("trace_seed", 0) == 0 && entry.path().extension() == ".jsonl") files.push_back(entry.path());
  }
  std::sort(files.begin(), files.end());
  for (const auto& f : files) r.traces.push_back(traces_from_jsonl(detail::read_file(f)));
  if (r.traces.empty()) return std::nullopt;
  return r;
}

inline std::vector<RunDir> scan_runs(const std::filesystem::path& root) {
  std::vector<RunDir> runs;
  if (auto r = read_run_dir(root, "")) {
    r->label = std::string(strategy_name(r->config.strategy));
    runs.push_back(std::move(*r));
  }
  std::vector<std::filesystem::path> subdirs;
  for (const auto& entry : std::filesystem::directory_iterator(root)) {
    if (entry.is_directory()) subdirs.push_back(entry.path());
  }
  std::sort(subdirs.begin(), subdirs.end());
  for (const auto& d : subdirs) {
    if (auto r = read_run_dir(d, d.filename().string())) runs.push_back(std::move(*r));
  }
  return runs;
}

// Writes summary.json, convergence.csv and ablation.md for every run found
// in `root` and its immediate subdirectories.
inline void write_report(const std::filesystem::path& root, const std::filesystem::path& out, std::ostream& log_out) {
  const auto runs = scan_runs(root);
  if (runs.empty()) throw Error("no runs (config.json + trace_seed*.jsonl) under " + root.string());
  Summary summary;
  std::vector<ConvergenceSeries> series;
  std::vector<AblationCell> cells;
  for (const auto& r : runs) {
    ConvergenceSeries s;
    s.strategy = r.label;
    for (const auto& t : r.traces) {
      std::vector<double> acc;
      for (const auto& c : t) acc.push_back(c.test_accuracy);
      s.per_seed.push_back(std::move(acc));
    }
    auto st = summarize(s);
    cells.push_back({variant_label(r.config), regime_label(r.config), losses_label(r.config), st.final_accuracy});
    summary[r.label] = std::move(st);
    series.push_back(std::move(s));
  }
  std::filesystem::create_directories(out);
  detail::write_file(out / "summary.json", summary_to_json(summary).dump(2) + "\n");
  detail::write_file(out / "convergence.csv", emit_convergence(series));
  detail::write_file(out / "ablation.md", ablation_table(cells));
  log_out << ablation_table(cells);
}

inline std::vector<double> parse_values(const std::string& list) {
  std::vector<double> out;
  std::stringstream ss(list);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item.empty()) continue;
    try {
      std::size_t used = 0;
      out.push_back(std::stod(item, &used));
      if (used != item.size()) throw std::invalid_argument(item);
    } catch (const std::exception&) {
      throw UsageError("bad value \"" + item + "\" in --values");
    }
  }
  if (out.empty()) throw UsageError("--values is empty");
  return out;
}

inline std::string value_tag(double v) {
  std::ostringstream os;
  os << v;
  return os.str();
}

inline int run(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"Self-training with balanced top-k and KNN-weighted pseudo-label selection", "tkknn"};
  app.require_subcommand(1);

  SynthSpec synth_spec;
  std::string synth_out;
  auto* synth = app.add_subcommand("synth", "Generate a synthetic benchmark dataset directory");
  synth->add_option("--classes", synth_spec.num_classes)->check(CLI::Range(2, 1 << 20));
  synth->add_option("--dim", synth_spec.dim)->check(CLI::Range(2, 1 << 20));
  synth->add_option("--per-class", synth_spec.per_class)->check(CLI::Range(4, 1 << 24));
  synth->add_option("--radius", synth_spec.radius)->check(CLI::PositiveNumber);
  synth->add_option("--easy-sigma", synth_spec.easy_sigma)->check(CLI::PositiveNumber);
  synth->add_option("--hard-sigma", synth_spec.hard_sigma)->check(CLI::PositiveNumber);
  synth->add_option("--hard-fraction", synth_spec.hard_fraction)->check(CLI::Range(0.0, 1.0));
  synth->add_option("--overlap-pairs", synth_spec.overlap_pairs)->check(CLI::NonNegativeNumber);
  synth->add_option("--overlap", synth_spec.overlap)->check(CLI::Range(0.0, 1.0));
  synth->add_option("--seed", synth_spec.seed);
  synth->add_option("--out", synth_out, "Output dataset directory")->required();

  std::string split_data, split_out;
  SplitSpec split_spec;
  bool split_no_stratify = false;
  auto* split = app.add_subcommand("split", "Subsample training labels and write a split manifest");
  split->add_option("--data", split_data)->required();
  split->add_option("--label-fraction", split_spec.label_fraction)->check(CLI::Range(0.0, 1.0));
  split->add_option("--labels-per-class", split_spec.labels_per_class)->check(CLI::NonNegativeNumber);
  split->add_option("--seed", split_spec.seed);
  split->add_flag("--no-stratify", split_no_stratify);
  split->add_option("--out", split_out, "Manifest path")->required();

  RunFlags train_flags;
  std::string train_manifest;
  auto* train = app.add_subcommand("train", "Supervised training on the labeled split; writes a checkpoint");
  add_run_flags(train, train_flags, false);
  train->add_option("--split", train_manifest, "Split manifest to apply instead of subsampling");

  RunFlags st_flags;
  auto* selftrain = app.add_subcommand("selftrain", "Run a self-training experiment over several seeds");
  add_run_flags(selftrain, st_flags);

  RunFlags sw_flags;
  std::string sweep_param, sweep_values;
  auto* sweep = app.add_subcommand("sweep", "Sweep beta (k held at 6) or k (beta held at 0.75)");
  add_run_flags(sweep, sw_flags);
  sweep->add_option("--param", sweep_param)->required()->check(CLI::IsMember({"beta", "k"}));
  sweep->add_option("--values", sweep_values, "Comma-separated values")->required();

  std::string report_traces, report_out;
  auto* report = app.add_subcommand("report", "Summaries, convergence CSV and ablation table from run outputs");
  report->add_option("--traces", report_traces, "Run directory (or parent of run directories)")->required();
  report->add_option("--out", report_out, "Output directory (default: the traces directory)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (*synth) {
      const auto ds = generate(synth_spec);
      save_dataset_dir(ds, synth_out, {{"dataset", "synthetic"}, {"synth", synth_spec_to_json(synth_spec)}});
      out << format_stats(dataset_stats(ds));
    } else if (*split) {
      split_spec.stratified = !split_no_stratify;
      if (split_spec.labels_per_class == 0 && !(split_spec.label_fraction > 0.0)) {
        throw UsageError("--label-fraction must be in (0, 1]");
      }
      const auto ds = load_data(split_data);
      const auto result = subsample_labels(ds, split_spec);
      detail::write_file(split_out, manifest_to_json(make_manifest(result, split_spec)).dump() + "\n");
      out << format_stats(dataset_stats(result));
    } else if (*train) {
      auto cfg = resolve_config(train_flags);
      cfg.strategy = Strategy::supervised;
      auto ds = load_data(train_flags.data);
      if (!train_manifest.empty()) {
        ds = apply_manifest(ds, manifest_from_json(nlohmann::json::parse(detail::read_file(train_manifest))));
        cfg.label_fraction = 1.0;
        cfg.labels_per_class = 0;
      }
      auto state = start_run(ds, cfg, cfg.seed);
      const auto& t = state.traces.front();
      const std::filesystem::path dir = train_flags.out;
      std::filesystem::create_directories(dir);
      save_checkpoint({state.training.params, state.training.optim, state.training.rng}, dir / "model.tkck");
      detail::write_file(dir / "config.json", config_to_json(cfg).dump(2) + "\n");
      const nlohmann::json metrics = {{"epochs", t.epochs},
                                      {"labeled", t.labeled_size},
                                      {"val_accuracy", t.val_accuracy},
                                      {"test_accuracy", t.test_accuracy}};
      detail::write_file(dir / "metrics.json", metrics.dump(2) + "\n");
      out << metrics.dump() << "\n";
    } else if (*selftrain) {
      const auto cfg = resolve_config(st_flags);
      const auto ds = load_data(st_flags.data);
      const auto result = run_experiment(ds, cfg, st_flags.jobs);
      write_experiment(result, ds, st_flags.out);
      out << strategy_name(cfg.strategy) << ": " << format_interval(result.summary.final_accuracy) << "\n";
    } else if (*sweep) {
      const auto values = parse_values(sweep_values);
      auto base = resolve_config(sw_flags);
      if (!sw_flags.strategy) base.strategy = Strategy::tk_knn;
      if (sweep_param == "beta") {
        base.k = 6;
        for (double v : values) {
          if (!(v >= 0.0 && v <= 1.0)) throw UsageError("beta values must be in [0, 1]");
        }
      } else {
        base.beta = 0.75;
        for (double v : values) {
          if (v < 1.0 || v != static_cast<int>(v)) throw UsageError("k values must be positive integers");
        }
      }
      const auto ds = load_data(sw_flags.data);
      const std::filesystem::path root = sw_flags.out;
      std::vector<ConvergenceSeries> series;
      for (double v : values) {
        RunConfig cfg = base;
        if (sweep_param == "beta") cfg.beta = v;
        else cfg.k = static_cast<int>(v);
        const auto tag = sweep_param + "_" + value_tag(v);
        const auto result = run_experiment(ds, cfg, sw_flags.jobs);
        write_experiment(result, ds, root / tag);
        series.push_back(series_of(tag, result.runs));
        out << tag << ": " << format_interval(result.summary.final_accuracy) << "\n";
      }
      detail::write_file(root / ("sweep_" + sweep_param + ".csv"), emit_convergence(series));
    } else if (*report) {
      write_report(report_traces, report_out.empty() ? report_traces : report_out, out);
    }
  } catch (const UsageError& e) {
    err << "usage error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
  return kExitOk;
}

}  // namespace tkknn::cli
