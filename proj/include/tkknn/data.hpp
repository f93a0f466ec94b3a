#pragma once

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "tkknn/error.hpp"
#include "tkknn/log.hpp"
#include "tkknn/rng.hpp"

namespace tkknn {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using EmbeddingMatrix = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

using ExampleId = std::int64_t;
using ClassId = int;

struct Example {
  ExampleId id = 0;
  std::string text;
  Vector features;                     // d, empty until resolved
  std::optional<Matrix> tokens;        // T x d; mean-pooled into features
  std::optional<ClassId> label;        // visible label
  std::optional<ClassId> truth;        // hidden label; only the oracle and diagnostics read it
};

struct Dataset {
  std::vector<Example> labeled;
  std::vector<Example> unlabeled;
  std::vector<Example> validation;
  std::vector<Example> test;
  int num_classes = 0;
  std::vector<std::string> class_names;
  std::vector<std::string> warnings;

  std::size_t dim() const {
    for (const auto* split : {&labeled, &unlabeled, &validation, &test}) {
      for (const auto& e : *split) {
        if (e.features.size() > 0) return static_cast<std::size_t>(e.features.size());
        if (e.tokens) return static_cast<std::size_t>(e.tokens->cols());
      }
    }
    return 0;
  }
};

struct SplitSpec {
  double label_fraction = 1.0;
  std::uint64_t seed = 0;
  bool stratified = true;
  // When > 0, overrides label_fraction with an exact per-class count.
  int labels_per_class = 0;
};

struct SplitManifest {
  std::uint64_t seed = 0;
  double label_fraction = 1.0;
  std::vector<ExampleId> labeled_ids;
  std::vector<ExampleId> unlabeled_ids;
};

namespace detail {

inline void put_bytes(std::string& out, std::uint64_t v, int n) {
  for (int i = 0; i < n; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline std::uint64_t get_bytes(const unsigned char* p, int n) {
  std::uint64_t v = 0;
  for (int i = 0; i < n; ++i) v |= static_cast<std::uint64_t>(p[i]) << (8 * i);
  return v;
}

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void write_file(const std::filesystem::path& path, const std::string& bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error("short write to " + path.string());
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Embedding file: "TKNN" | u32 version=1 | u64 rows | u32 dim | u8 dtype=1 |
// rows*dim little-endian f32, row-major.

inline constexpr char kEmbeddingMagic[4] = {'T', 'K', 'N', 'N'};
inline constexpr std::uint32_t kEmbeddingVersion = 1;
inline constexpr std::uint8_t kDtypeF32 = 1;
inline constexpr std::size_t kEmbeddingHeaderSize = 4 + 4 + 8 + 4 + 1;

inline std::string encode_embeddings(const EmbeddingMatrix& m) {
  std::string out;
  out.reserve(kEmbeddingHeaderSize + 4 * static_cast<std::size_t>(m.size()));
  out.append(kEmbeddingMagic, 4);
  detail::put_bytes(out, kEmbeddingVersion, 4);
  detail::put_bytes(out, static_cast<std::uint64_t>(m.rows()), 8);
  detail::put_bytes(out, static_cast<std::uint64_t>(m.cols()), 4);
  detail::put_bytes(out, kDtypeF32, 1);
  for (Eigen::Index i = 0; i < m.size(); ++i) {
    detail::put_bytes(out, std::bit_cast<std::uint32_t>(m.data()[i]), 4);
  }
  return out;
}

inline EmbeddingMatrix decode_embeddings(const std::string& bytes) {
  if (bytes.size() < kEmbeddingHeaderSize) throw LengthError("embedding header truncated");
  if (std::memcmp(bytes.data(), kEmbeddingMagic, 4) != 0) throw FormatError("bad embedding magic");
  const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
  const auto version = detail::get_bytes(p + 4, 4);
  if (version != kEmbeddingVersion) {
    throw FormatError("unsupported embedding version " + std::to_string(version));
  }
  const auto rows = detail::get_bytes(p + 8, 8);
  const auto dim = detail::get_bytes(p + 16, 4);
  if (p[20] != kDtypeF32) throw FormatError("unsupported embedding dtype " + std::to_string(p[20]));
  const std::uint64_t count = rows * dim;
  if (dim != 0 && count / dim != rows) throw LengthError("embedding shape overflows");
  if (bytes.size() - kEmbeddingHeaderSize != 4 * count) {
    throw LengthError("embedding payload has " + std::to_string(bytes.size() - kEmbeddingHeaderSize) +
                      " bytes, expected " + std::to_string(4 * count));
  }
  EmbeddingMatrix m(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(dim));
  const unsigned char* payload = p + kEmbeddingHeaderSize;
  for (std::uint64_t i = 0; i < count; ++i) {
    m.data()[i] = std::bit_cast<float>(static_cast<std::uint32_t>(detail::get_bytes(payload + 4 * i, 4)));
  }
  return m;
}

inline void write_embeddings(const EmbeddingMatrix& m, const std::filesystem::path& path) {
  detail::write_file(path, encode_embeddings(m));
}

inline EmbeddingMatrix read_embeddings(const std::filesystem::path& path) {
  return decode_embeddings(detail::read_file(path));
}

// ---------------------------------------------------------------------------
// JSON-lines examples: {"id": int, "text": string, "label": int|null}

inline std::vector<Example> parse_jsonl(std::istream& in) {
  std::vector<Example> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    nlohmann::json obj;
    try {
      obj = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      throw ParseError(lineno, std::string("malformed JSON: ") + e.what());
    }
    if (!obj.is_object()) throw ParseError(lineno, "expected a JSON object");
    for (const char* key : {"id", "text", "label"}) {
      if (!obj.contains(key)) throw ParseError(lineno, std::string("missing key \"") + key + "\"");
    }
    Example ex;
    if (!obj["id"].is_number_integer()) throw ParseError(lineno, "\"id\" must be an integer");
    ex.id = obj["id"].get<ExampleId>();
    if (!obj["text"].is_string()) throw ParseError(lineno, "\"text\" must be a string");
    ex.text = obj["text"].get<std::string>();
    const auto& label = obj["label"];
    if (!label.is_null()) {
      if (!label.is_number_integer() || label.get<long long>() < 0) {
        throw ParseError(lineno, "\"label\" must be a non-negative integer or null");
      }
      ex.label = label.get<ClassId>();
      ex.truth = ex.label;
    }
    out.push_back(std::move(ex));
  }
  return out;
}

inline void attach_embeddings(std::vector<Example>& examples, const EmbeddingMatrix& emb) {
  if (static_cast<std::size_t>(emb.rows()) != examples.size()) {
    throw DimensionError("embedding file has " + std::to_string(emb.rows()) + " rows but dataset has " +
                         std::to_string(examples.size()) + " examples");
  }
  for (std::size_t i = 0; i < examples.size(); ++i) {
    examples[i].features = emb.row(static_cast<Eigen::Index>(i)).transpose().cast<double>();
  }
}

inline std::vector<Example> load_jsonl(const std::filesystem::path& path,
                                       const std::optional<std::filesystem::path>& embeddings = std::nullopt) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open " + path.string());
  auto examples = parse_jsonl(in);
  if (embeddings) attach_embeddings(examples, read_embeddings(*embeddings));
  return examples;
}

inline std::string to_jsonl(const std::vector<Example>& examples, bool include_labels = true) {
  std::string out;
  for (const auto& e : examples) {
    nlohmann::json obj;
    obj["id"] = e.id;
    obj["text"] = e.text;
    obj["label"] = (include_labels && e.label) ? nlohmann::json(*e.label) : nlohmann::json(nullptr);
    out += obj.dump();
    out += '\n';
  }
  return out;
}

inline EmbeddingMatrix features_matrix(const std::vector<Example>& examples) {
  const Eigen::Index d = examples.empty() ? 0 : examples.front().features.size();
  EmbeddingMatrix m(static_cast<Eigen::Index>(examples.size()), d);
  for (std::size_t i = 0; i < examples.size(); ++i) {
    if (examples[i].features.size() != d) throw DimensionError("inconsistent feature dimension");
    m.row(static_cast<Eigen::Index>(i)) = examples[i].features.transpose().cast<float>();
  }
  return m;
}

// ---------------------------------------------------------------------------
// Dataset directory: {train,val,test}.jsonl + {train,val,test}.tknn + manifest.json

inline void save_dataset_dir(const Dataset& ds, const std::filesystem::path& dir,
                             const nlohmann::json& extra_manifest = nlohmann::json::object()) {
  std::filesystem::create_directories(dir);
  std::vector<Example> train = ds.labeled;
  train.insert(train.end(), ds.unlabeled.begin(), ds.unlabeled.end());
  std::sort(train.begin(), train.end(), [](const Example& a, const Example& b) { return a.id < b.id; });
  // Unlabeled examples that still carry truth are written with it so the
  // directory holds the full training split.
  for (auto& e : train) {
    if (!e.label && e.truth) e.label = e.truth;
  }
  const std::pair<const char*, const std::vector<Example>*> splits[] = {
      {"train", &train}, {"val", &ds.validation}, {"test", &ds.test}};
  nlohmann::json counts = nlohmann::json::object();
  for (const auto& [name, examples] : splits) {
    detail::write_file(dir / (std::string(name) + ".jsonl"), to_jsonl(*examples));
    write_embeddings(features_matrix(*examples), dir / (std::string(name) + ".tknn"));
    counts[name] = examples->size();
  }
  nlohmann::json manifest = extra_manifest;
  manifest["num_classes"] = ds.num_classes;
  manifest["class_names"] = ds.class_names;
  manifest["dim"] = ds.dim();
  manifest["counts"] = counts;
  detail::write_file(dir / "manifest.json", manifest.dump(2) + "\n");
}

inline Dataset load_dataset_dir(const std::filesystem::path& dir) {
  Dataset ds;
  auto load = [&](const char* name) {
    const auto jsonl = dir / (std::string(name) + ".jsonl");
    const auto emb = dir / (std::string(name) + ".tknn");
    if (!std::filesystem::exists(jsonl)) return std::vector<Example>{};
    return load_jsonl(jsonl, std::filesystem::exists(emb) ? std::optional(emb) : std::nullopt);
  };
  for (auto& e : load("train")) {
    (e.label ? ds.labeled : ds.unlabeled).push_back(std::move(e));
  }
  ds.validation = load("val");
  ds.test = load("test");

  int max_label = -1;
  for (const auto* split : {&ds.labeled, &ds.unlabeled, &ds.validation, &ds.test}) {
    for (const auto& e : *split) {
      if (e.label) max_label = std::max(max_label, *e.label);
    }
  }
  const auto manifest_path = dir / "manifest.json";
  if (std::filesystem::exists(manifest_path)) {
    const auto manifest = nlohmann::json::parse(detail::read_file(manifest_path));
    if (manifest.contains("class_names")) ds.class_names = manifest["class_names"].get<std::vector<std::string>>();
    if (manifest.contains("num_classes")) ds.num_classes = manifest["num_classes"].get<int>();
  }
  ds.num_classes = std::max({ds.num_classes, max_label + 1, static_cast<int>(ds.class_names.size())});
  for (int c = static_cast<int>(ds.class_names.size()); c < ds.num_classes; ++c) {
    ds.class_names.push_back("class_" + std::to_string(c));
  }

  std::set<ExampleId> seen;
  for (const auto* split : {&ds.labeled, &ds.unlabeled, &ds.validation, &ds.test}) {
    for (const auto& e : *split) {
      if (!seen.insert(e.id).second) throw InputError("duplicate example id " + std::to_string(e.id));
      if (e.label && *e.label >= ds.num_classes) throw IndexError("label out of range");
    }
  }
  return ds;
}

// ---------------------------------------------------------------------------

namespace detail {

// ceil with tolerance so that fraction*N landing a rounding error above an
// integer does not add an extra label.
inline std::size_t labeled_budget(double fraction, std::size_t n) {
  const double raw = fraction * static_cast<double>(n);
  const double rounded = std::round(raw);
  const double value = std::abs(raw - rounded) < 1e-9 ? rounded : std::ceil(raw);
  return std::min(n, static_cast<std::size_t>(value));
}

}  // namespace detail

// Keeps labels on a seeded subset of the labeled pool and moves the rest to
// the unlabeled pool, retaining their truth for diagnostics.
inline Dataset subsample_labels(const Dataset& dataset, const SplitSpec& spec) {
  if (spec.labels_per_class <= 0 && !(spec.label_fraction > 0.0 && spec.label_fraction <= 1.0)) {
    throw InputError("label_fraction must be in (0, 1]");
  }
  Dataset out = dataset;
  const auto& pool = dataset.labeled;
  const std::size_t n = pool.size();
  Rng rng(mix_seed(spec.seed ^ 0x5eedULL));

  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  rng.shuffle(std::span(order));

  std::vector<bool> keep(n, false);
  if (spec.labels_per_class > 0 || spec.stratified) {
    const int classes = dataset.num_classes;
    std::vector<std::vector<std::size_t>> by_class(static_cast<std::size_t>(classes));
    for (std::size_t i : order) {
      const ClassId c = *pool[i].label;
      if (c < 0 || c >= classes) throw IndexError("label out of range in subsample_labels");
      by_class[static_cast<std::size_t>(c)].push_back(i);
    }
    std::vector<std::size_t> quota(by_class.size(), 0);
    if (spec.labels_per_class > 0) {
      for (std::size_t c = 0; c < by_class.size(); ++c) {
        quota[c] = std::min(by_class[c].size(), static_cast<std::size_t>(spec.labels_per_class));
      }
    } else {
      const std::size_t budget = detail::labeled_budget(spec.label_fraction, n);
      std::size_t nonempty = 0;
      for (const auto& b : by_class) nonempty += b.empty() ? 0 : 1;
      if (budget < nonempty) {
        out.warnings.push_back("label budget " + std::to_string(budget) + " is below the class count " +
                               std::to_string(nonempty) + "; some classes have no labeled example");
        log::warn(out.warnings.back());
      }
      std::size_t assigned = 0;
      for (std::size_t c = 0; c < by_class.size(); ++c) {
        const double share = spec.label_fraction * static_cast<double>(by_class[c].size());
        quota[c] = std::min(by_class[c].size(), static_cast<std::size_t>(std::floor(share + 1e-9)));
        if (budget >= nonempty && quota[c] == 0 && !by_class[c].empty()) quota[c] = 1;
        assigned += quota[c];
      }
      std::vector<std::size_t> class_order(by_class.size());
      for (std::size_t c = 0; c < class_order.size(); ++c) class_order[c] = c;
      rng.shuffle(std::span(class_order));
      // Trim overshoot from the largest quotas, then hand out the remainder
      // one at a time in shuffled class order.
      while (assigned > budget) {
        std::size_t best = class_order.front();
        for (std::size_t c : class_order) {
          if (quota[c] > quota[best]) best = c;
        }
        if (quota[best] == 0) break;
        --quota[best];
        --assigned;
      }
      bool progressed = true;
      while (assigned < budget && progressed) {
        progressed = false;
        for (std::size_t c : class_order) {
          if (assigned == budget) break;
          if (quota[c] < by_class[c].size()) {
            ++quota[c];
            ++assigned;
            progressed = true;
          }
        }
      }
    }
    for (std::size_t c = 0; c < by_class.size(); ++c) {
      for (std::size_t j = 0; j < quota[c]; ++j) keep[by_class[c][j]] = true;
    }
  } else {
    const std::size_t budget = detail::labeled_budget(spec.label_fraction, n);
    for (std::size_t j = 0; j < budget; ++j) keep[order[j]] = true;
  }

  out.labeled.clear();
  for (std::size_t i = 0; i < n; ++i) {
    Example e = pool[i];
    if (keep[i]) {
      out.labeled.push_back(std::move(e));
    } else {
      e.truth = e.label;
      e.label.reset();
      out.unlabeled.push_back(std::move(e));
    }
  }
  return out;
}

inline SplitManifest make_manifest(const Dataset& ds, const SplitSpec& spec) {
  SplitManifest m;
  m.seed = spec.seed;
  m.label_fraction = spec.label_fraction;
  for (const auto& e : ds.labeled) m.labeled_ids.push_back(e.id);
  for (const auto& e : ds.unlabeled) m.unlabeled_ids.push_back(e.id);
  return m;
}

inline nlohmann::json manifest_to_json(const SplitManifest& m) {
  return {{"seed", m.seed},
          {"label_fraction", m.label_fraction},
          {"labeled_ids", m.labeled_ids},
          {"unlabeled_ids", m.unlabeled_ids}};
}

inline SplitManifest manifest_from_json(const nlohmann::json& j) {
  SplitManifest m;
  m.seed = j.at("seed").get<std::uint64_t>();
  m.label_fraction = j.at("label_fraction").get<double>();
  m.labeled_ids = j.at("labeled_ids").get<std::vector<ExampleId>>();
  m.unlabeled_ids = j.at("unlabeled_ids").get<std::vector<ExampleId>>();
  return m;
}

// Re-partitions the training pool of `ds` according to a manifest.
inline Dataset apply_manifest(const Dataset& ds, const SplitManifest& m) {
  std::map<ExampleId, Example> pool;
  for (const auto* split : {&ds.labeled, &ds.unlabeled}) {
    for (const auto& e : *split) pool[e.id] = e;
  }
  Dataset out = ds;
  out.labeled.clear();
  out.unlabeled.clear();
  for (ExampleId id : m.labeled_ids) {
    auto it = pool.find(id);
    if (it == pool.end()) throw InputError("manifest id " + std::to_string(id) + " not in training pool");
    Example e = it->second;
    if (!e.label) e.label = e.truth;
    if (!e.label) throw InputError("manifest marks unlabeled example " + std::to_string(id) + " as labeled");
    out.labeled.push_back(std::move(e));
  }
  for (ExampleId id : m.unlabeled_ids) {
    auto it = pool.find(id);
    if (it == pool.end()) throw InputError("manifest id " + std::to_string(id) + " not in training pool");
    Example e = it->second;
    if (e.label) e.truth = e.label;
    e.label.reset();
    out.unlabeled.push_back(std::move(e));
  }
  return out;
}

// ---------------------------------------------------------------------------

struct SplitCounts {
  std::size_t size = 0;
  std::vector<std::size_t> per_class;  // by visible label, or truth when hidden
};

struct DatasetStats {
  int num_classes = 0;
  SplitCounts labeled, unlabeled, validation, test;
  std::size_t train() const { return labeled.size + unlabeled.size; }
};

inline DatasetStats dataset_stats(const Dataset& ds) {
  DatasetStats s;
  s.num_classes = ds.num_classes;
  auto count = [&](const std::vector<Example>& split) {
    SplitCounts c;
    c.size = split.size();
    c.per_class.assign(static_cast<std::size_t>(std::max(ds.num_classes, 0)), 0);
    for (const auto& e : split) {
      const auto l = e.label ? e.label : e.truth;
      if (l && *l >= 0 && *l < ds.num_classes) ++c.per_class[static_cast<std::size_t>(*l)];
    }
    return c;
  };
  s.labeled = count(ds.labeled);
  s.unlabeled = count(ds.unlabeled);
  s.validation = count(ds.validation);
  s.test = count(ds.test);
  return s;
}

inline std::string format_stats(const DatasetStats& s) {
  std::ostringstream os;
  os << "intents\ttrain\tlabeled\tunlabeled\tval\ttest\n"
     << s.num_classes << '\t' << s.train() << '\t' << s.labeled.size << '\t' << s.unlabeled.size << '\t'
     << s.validation.size << '\t' << s.test.size << '\n';
  return os.str();
}

}  // namespace tkknn
