#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <span>
#include <vector>

#include <Eigen/Dense>

#include "tkknn/data.hpp"
#include "tkknn/error.hpp"
#include "tkknn/log.hpp"

namespace tkknn {

// Which terms of CE + SupCon + gamma * KoLeo are active.
struct LossSpec {
  bool use_ce = true;
  bool use_scl = true;
  bool use_koleo = true;
  double gamma = 0.1;
  double tau_scl = 0.07;
  // Evaluate the contrastive ratio without exponentials (sim/tau over the
  // sum of sim/tau). Comparison only; it is undefined for negative ratios.
  bool literal_supcon = false;

  bool any() const { return use_ce || use_scl || use_koleo; }
};

struct LossValue {
  double value = 0.0;
  Matrix grad;              // same shape as the differentiated input
  bool degenerate = false;  // value defined by convention (no positives, < 2 points)
};

// Two dropout views per source example, stacked view-major: rows [0, B) are
// the first view, rows [B, 2B) the second.
struct MultiViewBatch {
  Matrix anchors;
  std::vector<ClassId> labels;
  std::vector<std::size_t> view_of;
};

inline MultiViewBatch make_multiview(const Matrix& view1, const Matrix& view2, std::span<const ClassId> labels) {
  if (view1.rows() != view2.rows() || view1.cols() != view2.cols() ||
      static_cast<std::size_t>(view1.rows()) != labels.size()) {
    throw DimensionError("multiview shapes disagree");
  }
  MultiViewBatch b;
  const auto n = view1.rows();
  b.anchors.resize(2 * n, view1.cols());
  b.anchors.topRows(n) = view1;
  b.anchors.bottomRows(n) = view2;
  for (int v = 0; v < 2; ++v) {
    for (Eigen::Index i = 0; i < n; ++i) {
      b.labels.push_back(labels[static_cast<std::size_t>(i)]);
      b.view_of.push_back(static_cast<std::size_t>(i));
    }
  }
  return b;
}

inline Matrix softmax_rows(const Matrix& logits) {
  Matrix out(logits.rows(), logits.cols());
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    const double mx = logits.row(i).maxCoeff();
    out.row(i) = (logits.row(i).array() - mx).exp();
    out.row(i) /= out.row(i).sum();
  }
  return out;
}

namespace detail {

inline void check_labels(std::span<const ClassId> labels, Eigen::Index classes) {
  for (ClassId y : labels) {
    if (y < 0 || y >= classes) throw IndexError("label " + std::to_string(y) + " outside [0, " +
                                                std::to_string(classes) + ")");
  }
}

}  // namespace detail

// Mean cross-entropy of probability rows; grad is with respect to the logits
// that produced them: (probs - onehot) / B.
inline LossValue ce_loss(const Matrix& probs, std::span<const ClassId> labels) {
  if (static_cast<std::size_t>(probs.rows()) != labels.size()) throw DimensionError("ce_loss: batch mismatch");
  detail::check_labels(labels, probs.cols());
  LossValue out;
  const auto b = static_cast<double>(probs.rows());
  out.grad = probs / std::max(b, 1.0);
  for (Eigen::Index i = 0; i < probs.rows(); ++i) {
    const auto y = labels[static_cast<std::size_t>(i)];
    out.value -= std::log(std::max(probs(i, y), std::numeric_limits<double>::min()));
    out.grad(i, y) -= 1.0 / b;
  }
  if (probs.rows() > 0) out.value /= b;
  return out;
}

// Same loss evaluated through log-softmax, used on the training path.
inline LossValue ce_loss_logits(const Matrix& logits, std::span<const ClassId> labels) {
  if (static_cast<std::size_t>(logits.rows()) != labels.size()) throw DimensionError("ce_loss: batch mismatch");
  detail::check_labels(labels, logits.cols());
  LossValue out;
  const auto b = static_cast<double>(logits.rows());
  out.grad = softmax_rows(logits) / std::max(b, 1.0);
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    const auto y = labels[static_cast<std::size_t>(i)];
    const double mx = logits.row(i).maxCoeff();
    const double lse = mx + std::log((logits.row(i).array() - mx).exp().sum());
    out.value += lse - logits(i, y);
    out.grad(i, y) -= 1.0 / b;
  }
  if (logits.rows() > 0) out.value /= b;
  return out;
}

// Supervised contrastive loss over all rows of `anchors`. Similarities are
// cosines of the L2-normalized rows. Each anchor's candidates A(i) are all
// other rows and its positives P(i) the other rows sharing its label;
// anchors with no positives are skipped and the result is the mean over the
// rest. Grad is with respect to the raw (unnormalized) rows.
inline LossValue supcon_loss(const Matrix& anchors, std::span<const ClassId> labels, double tau,
                             bool literal = false) {
  const auto n = anchors.rows();
  if (static_cast<std::size_t>(n) != labels.size()) throw DimensionError("supcon_loss: label count mismatch");
  if (!(tau > 0.0)) throw InputError("supcon temperature must be positive");
  LossValue out;
  out.grad = Matrix::Zero(n, anchors.cols());

  Vector norms = anchors.rowwise().norm();
  for (Eigen::Index i = 0; i < n; ++i) {
    if (!(norms(i) > 0.0)) throw InputError("supcon_loss: zero-norm anchor");
  }
  const Matrix unit = norms.cwiseInverse().asDiagonal() * anchors;
  const Matrix cos = unit * unit.transpose();

  std::vector<int> positives(static_cast<std::size_t>(n), 0);
  int contributing = 0;
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index j = 0; j < n; ++j) {
      if (j != i && labels[static_cast<std::size_t>(j)] == labels[static_cast<std::size_t>(i)]) {
        ++positives[static_cast<std::size_t>(i)];
      }
    }
    contributing += positives[static_cast<std::size_t>(i)] > 0 ? 1 : 0;
  }
  if (contributing == 0) {
    out.degenerate = true;
    log::debug("supcon_loss: no anchor has a positive; loss defined as 0");
    return out;
  }

  // d loss / d cos
  Matrix g = Matrix::Zero(n, n);
  const double inv_k = 1.0 / contributing;
  if (!literal) {
    Eigen::ArrayXXd s = cos.array() / tau;
    s.matrix().diagonal().setConstant(-std::numeric_limits<double>::infinity());
    const Eigen::ArrayXd mx = s.rowwise().maxCoeff();
    Eigen::ArrayXXd e = (s.colwise() - mx).exp();
    const Eigen::ArrayXd denom = e.rowwise().sum();
    const Eigen::ArrayXd lse = mx + denom.log();
    e.colwise() /= denom;
    for (Eigen::Index i = 0; i < n; ++i) {
      const int np = positives[static_cast<std::size_t>(i)];
      if (np == 0) continue;
      const ClassId yi = labels[static_cast<std::size_t>(i)];
      double term = 0.0;
      for (Eigen::Index j = 0; j < n; ++j) {
        if (j == i) continue;
        const bool pos = labels[static_cast<std::size_t>(j)] == yi;
        if (pos) term -= s(i, j) - lse(i);
        g(i, j) = inv_k * (e(i, j) - (pos ? 1.0 / np : 0.0)) / tau;
      }
      out.value += inv_k * term / np;
    }
  } else {
    for (Eigen::Index i = 0; i < n; ++i) {
      const int np = positives[static_cast<std::size_t>(i)];
      if (np == 0) continue;
      const ClassId yi = labels[static_cast<std::size_t>(i)];
      double denom = 0.0;
      for (Eigen::Index j = 0; j < n; ++j) {
        if (j != i) denom += cos(i, j) / tau;
      }
      double term = 0.0;
      for (Eigen::Index j = 0; j < n; ++j) {
        if (j == i) continue;
        const bool pos = labels[static_cast<std::size_t>(j)] == yi;
        if (pos) term -= std::log((cos(i, j) / tau) / denom);
        g(i, j) += inv_k * ((1.0 / tau) / denom - (pos ? 1.0 / (np * cos(i, j)) : 0.0));
      }
      out.value += inv_k * term / np;
    }
  }

  const Matrix d_unit = (g + g.transpose()) * unit;
  for (Eigen::Index i = 0; i < n; ++i) {
    const double along = unit.row(i).dot(d_unit.row(i));
    out.grad.row(i) = (d_unit.row(i) - along * unit.row(i)) / norms(i);
  }
  return out;
}

inline LossValue supcon_loss(const MultiViewBatch& batch, double tau, bool literal = false) {
  return supcon_loss(batch.anchors, batch.labels, tau, literal);
}

inline constexpr double kKoleoEps = 1e-12;

// Kozachenko-Leonenko entropy penalty -(1/N) sum_i log(min_{j != i} |x_i - x_j|).
// Distances are clamped below at kKoleoEps; a clamped pair passes no gradient.
inline LossValue koleo_loss(const Matrix& points) {
  const auto n = points.rows();
  LossValue out;
  out.grad = Matrix::Zero(n, points.cols());
  if (n < 2) {
    out.degenerate = true;
    log::debug("koleo_loss: fewer than two points; loss defined as 0");
    return out;
  }
  const Vector sq = points.rowwise().squaredNorm();
  const Matrix gram = points * points.transpose();
  const double inv_n = 1.0 / static_cast<double>(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    Eigen::Index nearest = -1;
    double best = std::numeric_limits<double>::infinity();
    for (Eigen::Index j = 0; j < n; ++j) {
      if (j == i) continue;
      const double d2 = sq(i) + sq(j) - 2.0 * gram(i, j);
      if (d2 < best) {
        best = d2;
        nearest = j;
      }
    }
    // Recompute the winner exactly; the Gram shortcut loses precision for
    // near-duplicates.
    const Eigen::RowVectorXd diff = points.row(i) - points.row(nearest);
    const double dist = diff.norm();
    if (dist > kKoleoEps) {
      out.value -= inv_n * std::log(dist);
      const Eigen::RowVectorXd g = inv_n * diff / (dist * dist);
      out.grad.row(i) -= g;
      out.grad.row(nearest) += g;
    } else {
      out.value -= inv_n * std::log(kKoleoEps);
    }
  }
  return out;
}

struct CombinedLoss {
  double total = 0.0;
  double ce = 0.0;
  double scl = 0.0;
  double koleo = 0.0;
  Matrix grad_logits;   // zero-sized when CE is off
  Matrix grad_anchors;  // zero-sized when SupCon is off
  Matrix grad_points;   // zero-sized when KoLeo is off; already scaled by gamma
};

// Sum of enabled terms with KoLeo weighted by gamma; gradients add.
inline CombinedLoss combined_loss(const LossSpec& spec, const Matrix& logits, std::span<const ClassId> labels,
                                  const MultiViewBatch* views, const Matrix* koleo_points) {
  if (!spec.any()) throw InputError("loss spec enables no terms");
  if (!std::isfinite(spec.gamma) || spec.gamma < 0.0) throw InputError("gamma must be finite and >= 0");
  CombinedLoss out;
  if (spec.use_ce) {
    auto ce = ce_loss_logits(logits, labels);
    out.ce = ce.value;
    out.grad_logits = std::move(ce.grad);
  }
  if (spec.use_scl) {
    if (!views) throw InputError("contrastive term needs a multiview batch");
    auto scl = supcon_loss(*views, spec.tau_scl, spec.literal_supcon);
    out.scl = scl.value;
    out.grad_anchors = std::move(scl.grad);
  }
  if (spec.use_koleo) {
    if (!koleo_points) throw InputError("koleo term needs points");
    auto ko = koleo_loss(*koleo_points);
    out.koleo = ko.value;
    out.grad_points = spec.gamma * ko.grad;
  }
  out.total = out.ce + out.scl + spec.gamma * out.koleo;
  return out;
}

}  // namespace tkknn
