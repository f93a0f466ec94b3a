#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "tkknn/data.hpp"
#include "tkknn/error.hpp"
#include "tkknn/log.hpp"

namespace tkknn {

enum class Strategy { supervised, pl, pl_t, pl_flex, tk_knn, tk_knn_unbalanced, upper_bound };

inline constexpr std::string_view strategy_name(Strategy s) {
  switch (s) {
    case Strategy::supervised: return "supervised";
    case Strategy::pl: return "pl";
    case Strategy::pl_t: return "pl-t";
    case Strategy::pl_flex: return "pl-flex";
    case Strategy::tk_knn: return "tk-knn";
    case Strategy::tk_knn_unbalanced: return "tk-knn-unbalanced";
    case Strategy::upper_bound: return "upper-bound";
  }
  return "?";
}

inline std::optional<Strategy> parse_strategy(std::string_view name) {
  for (auto s : {Strategy::supervised, Strategy::pl, Strategy::pl_t, Strategy::pl_flex, Strategy::tk_knn,
                 Strategy::tk_knn_unbalanced, Strategy::upper_bound}) {
    if (strategy_name(s) == name) return s;
  }
  return std::nullopt;
}

struct ScoredCandidate {
  ExampleId id = 0;
  ClassId predicted_class = 0;
  double p = 0.0;      // probability of the predicted class
  double sim = 0.0;    // best cosine to an anchor of the predicted class
  double score = 0.0;
};

struct SelectedExample {
  ExampleId id = 0;
  ClassId pseudo_label = 0;
  double score = 0.0;
  double p = 0.0;
  double sim = 0.0;
};

struct SelectionResult {
  std::vector<SelectedExample> selected;
  std::map<ClassId, std::size_t> per_class_counts;
  std::string strategy;
  int cycle = 0;

  void add(const ScoredCandidate& c) {
    selected.push_back({c.id, c.predicted_class, c.score, c.p, c.sim});
    ++per_class_counts[c.predicted_class];
  }
};

// Total ranking order: higher score first, then lower id.
inline bool ranks_before(const ScoredCandidate& a, const ScoredCandidate& b) {
  if (a.score != b.score) return a.score > b.score;
  return a.id < b.id;
}

inline double cosine_sim(const Vector& a, const Vector& b) {
  if (a.size() != b.size()) throw DimensionError("cosine_sim: dimension mismatch");
  const double na = a.norm();
  const double nb = b.norm();
  if (!(na > 0.0) || !(nb > 0.0)) throw InputError("cosine_sim: zero vector");
  return std::clamp(a.dot(b) / (na * nb), -1.0, 1.0);
}

// Max cosine between `u` and the rows of `anchors`; 0 when there are none.
inline double knn_best_sim(const Vector& u, const Matrix& anchors) {
  if (anchors.rows() == 0) return 0.0;
  double best = -1.0;
  for (Eigen::Index i = 0; i < anchors.rows(); ++i) {
    best = std::max(best, cosine_sim(u, anchors.row(i).transpose()));
  }
  return best;
}

struct CandidateInput {
  ExampleId id = 0;
  ClassId predicted_class = 0;
  double p = 0.0;
  Vector z;
};

// Weighted score (1 - beta) * p + beta * sim, where sim is the best cosine
// between the candidate's latent and the anchors of its predicted class.
// `anchors_by_class[c]` holds one latent per row. Without KNN the score is p.
inline std::vector<ScoredCandidate> score_candidates(std::span<const CandidateInput> inputs,
                                                     std::span<const Matrix> anchors_by_class, double beta,
                                                     bool use_knn = true,
                                                     std::vector<ClassId>* empty_anchor_classes = nullptr) {
  if (!(beta >= 0.0 && beta <= 1.0)) throw InputError("beta must be in [0, 1]");
  std::vector<ScoredCandidate> out(inputs.size());
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    out[i] = {inputs[i].id, inputs[i].predicted_class, inputs[i].p, 0.0, inputs[i].p};
  }
  if (!use_knn) return out;

  // Group by class and compute all cosines per class as one product.
  std::map<ClassId, std::vector<std::size_t>> by_class;
  for (std::size_t i = 0; i < inputs.size(); ++i) by_class[inputs[i].predicted_class].push_back(i);
  for (const auto& [c, members] : by_class) {
    const bool have = c >= 0 && static_cast<std::size_t>(c) < anchors_by_class.size() &&
                      anchors_by_class[static_cast<std::size_t>(c)].rows() > 0;
    if (!have) {
      if (empty_anchor_classes) empty_anchor_classes->push_back(c);
      log::debug("no anchors for class ", c, "; similarity set to 0");
      for (std::size_t i : members) out[i].score = (1.0 - beta) * out[i].p;
      continue;
    }
    const Matrix& anchors = anchors_by_class[static_cast<std::size_t>(c)];
    Vector anorm = anchors.rowwise().norm();
    for (Eigen::Index a = 0; a < anorm.size(); ++a) {
      if (!(anorm(a) > 0.0)) throw InputError("cosine_sim: zero anchor vector");
    }
    const Matrix unit_anchors = anorm.cwiseInverse().asDiagonal() * anchors;
    Matrix q(static_cast<Eigen::Index>(members.size()), anchors.cols());
    for (std::size_t r = 0; r < members.size(); ++r) {
      const Vector& z = inputs[members[r]].z;
      if (z.size() != anchors.cols()) throw DimensionError("latent dimension mismatch");
      const double n = z.norm();
      if (!(n > 0.0)) throw InputError("cosine_sim: zero latent vector");
      q.row(static_cast<Eigen::Index>(r)) = z.transpose() / n;
    }
    const Matrix sims = q * unit_anchors.transpose();
    for (std::size_t r = 0; r < members.size(); ++r) {
      auto& cand = out[members[r]];
      cand.sim = std::clamp(sims.row(static_cast<Eigen::Index>(r)).maxCoeff(), -1.0, 1.0);
      cand.score = (1.0 - beta) * cand.p + beta * cand.sim;
    }
  }
  return out;
}

inline std::vector<ScoredCandidate> ranked(std::span<const ScoredCandidate> candidates) {
  std::vector<ScoredCandidate> sorted(candidates.begin(), candidates.end());
  std::sort(sorted.begin(), sorted.end(), ranks_before);
  return sorted;
}

// At most k best-ranked candidates per predicted class.
inline SelectionResult select_topk_balanced(std::span<const ScoredCandidate> candidates, int k) {
  if (k < 1) throw InputError("k must be >= 1");
  SelectionResult out;
  std::map<ClassId, std::size_t> taken;
  for (const auto& c : ranked(candidates)) {
    auto& t = taken[c.predicted_class];
    if (t < static_cast<std::size_t>(k)) {
      ++t;
      out.add(c);
    }
  }
  return out;
}

// Globally best k*C candidates regardless of class.
inline SelectionResult select_topk_unbalanced(std::span<const ScoredCandidate> candidates, int k, int num_classes) {
  if (k < 1) throw InputError("k must be >= 1");
  if (num_classes < 1) throw InputError("num_classes must be >= 1");
  SelectionResult out;
  const auto budget = static_cast<std::size_t>(k) * static_cast<std::size_t>(num_classes);
  for (const auto& c : ranked(candidates)) {
    if (out.selected.size() == budget) break;
    out.add(c);
  }
  return out;
}

// Every candidate whose confidence p >= tau (inclusive boundary).
inline SelectionResult select_threshold(std::span<const ScoredCandidate> candidates, double tau) {
  if (!(tau > 0.0 && tau <= 1.0)) throw InputError("tau must be in (0, 1]");
  SelectionResult out;
  for (const auto& c : ranked(candidates)) {
    if (c.p >= tau) out.add(c);
  }
  return out;
}

// Curriculum thresholds: sigma(c) counts candidates confidently predicted as
// c, and tau_c = tau * sigma(c) / max sigma (tau_c = tau when max sigma = 0).
struct FlexState {
  double tau = 0.95;
  std::vector<std::size_t> sigma;
  std::vector<double> class_tau;
};

inline void update_flex(FlexState& state, std::span<const ScoredCandidate> candidates, int num_classes) {
  state.sigma.assign(static_cast<std::size_t>(num_classes), 0);
  for (const auto& c : candidates) {
    if (c.predicted_class < 0 || c.predicted_class >= num_classes) throw IndexError("class out of range");
    if (c.p >= state.tau) ++state.sigma[static_cast<std::size_t>(c.predicted_class)];
  }
  const std::size_t peak = state.sigma.empty() ? 0 : *std::max_element(state.sigma.begin(), state.sigma.end());
  state.class_tau.assign(static_cast<std::size_t>(num_classes), state.tau);
  if (peak == 0) return;
  for (std::size_t c = 0; c < state.sigma.size(); ++c) {
    state.class_tau[c] = state.tau * static_cast<double>(state.sigma[c]) / static_cast<double>(peak);
  }
}

inline SelectionResult select_flex(std::span<const ScoredCandidate> candidates, FlexState& state, int num_classes) {
  if (!(state.tau > 0.0 && state.tau <= 1.0)) throw InputError("tau must be in (0, 1]");
  update_flex(state, candidates, num_classes);
  SelectionResult out;
  for (const auto& c : ranked(candidates)) {
    if (c.p >= state.class_tau[static_cast<std::size_t>(c.predicted_class)]) out.add(c);
  }
  return out;
}

inline SelectionResult select_all_pl(std::span<const ScoredCandidate> candidates) {
  SelectionResult out;
  for (const auto& c : ranked(candidates)) out.add(c);
  return out;
}

using TruthLookup = std::function<std::optional<ClassId>(ExampleId)>;

// Replaces every pseudo-label with the hidden true label.
inline SelectionResult oracle_upper_bound(const SelectionResult& selection, const TruthLookup& truth) {
  SelectionResult out = selection;
  out.per_class_counts.clear();
  for (auto& s : out.selected) {
    const auto t = truth(s.id);
    if (!t) throw InputError("no hidden label for example " + std::to_string(s.id));
    s.pseudo_label = *t;
    ++out.per_class_counts[s.pseudo_label];
  }
  return out;
}

// One JSON object per selected example.
inline std::string selection_to_jsonl(const SelectionResult& r, const TruthLookup& truth = {}) {
  std::string out;
  for (const auto& s : r.selected) {
    nlohmann::json j;
    j["cycle"] = r.cycle;
    j["id"] = s.id;
    j["pseudo_label"] = s.pseudo_label;
    j["score"] = s.score;
    j["p"] = s.p;
    j["sim"] = s.sim;
    const auto t = truth ? truth(s.id) : std::nullopt;
    j["true_label"] = t ? nlohmann::json(*t) : nlohmann::json(nullptr);
    out += j.dump();
    out += '\n';
  }
  return out;
}

}  // namespace tkknn
