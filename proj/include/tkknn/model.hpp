#pragma once

#include <cmath>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "tkknn/data.hpp"
#include "tkknn/error.hpp"
#include "tkknn/losses.hpp"
#include "tkknn/rng.hpp"

namespace tkknn {

// Encoder trunk (tanh MLP) -> latent z -> {dropout + linear classifier,
// linear projection used by the contrastive and KoLeo terms}.
struct ModelConfig {
  int input_dim = 0;
  std::vector<int> hidden = {64};  // last entry is the latent size
  int num_classes = 0;
  int proj_dim = 32;
  double head_dropout = 0.1;
  double aug_dropout = 0.2;

  int latent_dim() const { return hidden.empty() ? input_dim : hidden.back(); }
};

struct Linear {
  Matrix weight;  // in x out
  Matrix bias;    // 1 x out
};

struct ModelParams {
  ModelConfig config;
  std::vector<Linear> trunk;
  Linear head;
  Linear proj;

  std::vector<Matrix*> tensors() {
    std::vector<Matrix*> out;
    for (auto& l : trunk) {
      out.push_back(&l.weight);
      out.push_back(&l.bias);
    }
    for (Linear* l : {&head, &proj}) {
      out.push_back(&l->weight);
      out.push_back(&l->bias);
    }
    return out;
  }

  std::vector<const Matrix*> tensors() const {
    std::vector<const Matrix*> out;
    for (Matrix* m : const_cast<ModelParams*>(this)->tensors()) out.push_back(m);
    return out;
  }

  // Same shapes, all zeros.
  ModelParams zeros_like() const {
    ModelParams z = *this;
    for (Matrix* m : z.tensors()) m->setZero();
    return z;
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const Matrix* m : tensors()) n += static_cast<std::size_t>(m->size());
    return n;
  }
};

inline ModelParams init_params(const ModelConfig& cfg, Rng& rng) {
  if (cfg.input_dim <= 0 || cfg.num_classes <= 0 || cfg.proj_dim <= 0) {
    throw InputError("model dimensions must be positive");
  }
  for (int h : cfg.hidden) {
    if (h <= 0) throw InputError("hidden sizes must be positive");
  }
  auto make = [&](int in, int out) {
    Linear l;
    const double scale = std::sqrt(2.0 / (in + out));
    l.weight.resize(in, out);
    for (Eigen::Index i = 0; i < l.weight.size(); ++i) l.weight.data()[i] = scale * rng.normal();
    l.bias = Matrix::Zero(1, out);
    return l;
  };
  ModelParams p;
  p.config = cfg;
  int in = cfg.input_dim;
  for (int h : cfg.hidden) {
    p.trunk.push_back(make(in, h));
    in = h;
  }
  p.head = make(in, cfg.num_classes);
  p.proj = make(in, cfg.proj_dim);
  return p;
}

// Elementwise mean over the rows of a token matrix.
inline Vector mean_pool(const Matrix& tokens) {
  if (tokens.rows() == 0) throw InputError("mean_pool: token matrix has no rows");
  return tokens.colwise().mean().transpose();
}

inline const Vector& resolve_features(Example& e) {
  if (e.features.size() == 0 && e.tokens) e.features = mean_pool(*e.tokens);
  return e.features;
}

enum class Mode { train, eval };

// Inverted-dropout masks for one training batch: entries are 0 or 1/(1-rate).
struct DropoutMasks {
  Matrix head;
  Matrix view1;
  Matrix view2;
};

inline Matrix dropout_mask(Eigen::Index rows, Eigen::Index cols, double rate, Rng& rng) {
  Matrix m(rows, cols);
  const double keep = 1.0 - rate;
  for (Eigen::Index i = 0; i < m.size(); ++i) {
    m.data()[i] = (rate <= 0.0 || rng.uniform() < keep) ? 1.0 / keep : 0.0;
  }
  return m;
}

inline DropoutMasks sample_masks(const ModelConfig& cfg, Eigen::Index batch, Rng& rng) {
  const int h = cfg.latent_dim();
  DropoutMasks m;
  m.head = dropout_mask(batch, h, cfg.head_dropout, rng);
  m.view1 = dropout_mask(batch, h, cfg.aug_dropout, rng);
  m.view2 = dropout_mask(batch, h, cfg.aug_dropout, rng);
  return m;
}

inline DropoutMasks identity_masks(const ModelConfig& cfg, Eigen::Index batch) {
  const int h = cfg.latent_dim();
  return {Matrix::Ones(batch, h), Matrix::Ones(batch, h), Matrix::Ones(batch, h)};
}

struct TrunkActivations {
  std::vector<Matrix> layers;  // post-activation output of each trunk layer
  const Matrix& latent() const { return layers.back(); }
};

inline void check_input(const ModelParams& p, const Matrix& x) {
  if (x.cols() != p.config.input_dim) {
    throw DimensionError("feature dimension " + std::to_string(x.cols()) + " != model input " +
                         std::to_string(p.config.input_dim));
  }
  if (!x.allFinite()) throw InputError("non-finite value in features");
}

inline TrunkActivations run_trunk(const ModelParams& p, const Matrix& x) {
  TrunkActivations acts;
  const Matrix* in = &x;
  for (const auto& layer : p.trunk) {
    Matrix a = (*in) * layer.weight;
    a.rowwise() += layer.bias.row(0);
    acts.layers.push_back(a.array().tanh().matrix());
    in = &acts.layers.back();
  }
  if (p.trunk.empty()) acts.layers.push_back(x);
  return acts;
}

inline Matrix linear(const Linear& l, const Matrix& x) {
  Matrix y = x * l.weight;
  y.rowwise() += l.bias.row(0);
  return y;
}

struct ForwardOutput {
  Matrix z;      // B x h
  Matrix probs;  // B x C
  Matrix proj;   // B x p
};

// Batched forward. Eval mode never touches `rng`; train mode samples head
// and augmentation dropout.
inline ForwardOutput forward(const ModelParams& p, const Matrix& x, Mode mode, Rng* rng = nullptr) {
  check_input(p, x);
  ForwardOutput out;
  out.z = run_trunk(p, x).latent();
  if (mode == Mode::eval) {
    out.probs = softmax_rows(linear(p.head, out.z));
    out.proj = linear(p.proj, out.z);
  } else {
    if (!rng) throw InputError("train-mode forward needs an rng");
    const auto masks = sample_masks(p.config, x.rows(), *rng);
    out.probs = softmax_rows(linear(p.head, out.z.cwiseProduct(masks.head)));
    out.proj = linear(p.proj, out.z.cwiseProduct(masks.view1));
  }
  return out;
}

inline ForwardOutput forward(const ModelParams& p, const Vector& features, Mode mode, Rng* rng = nullptr) {
  return forward(p, Matrix(features.transpose()), mode, rng);
}

struct LossBreakdown {
  double total = 0.0;
  double ce = 0.0;
  double scl = 0.0;
  double koleo = 0.0;
};

struct BackwardResult {
  LossBreakdown loss;
  ModelParams grads;
};

// Loss and parameter gradients for one batch under fixed dropout masks.
// The contrastive term sees two augmentation views of z through the
// projection; KoLeo sees the un-augmented projection of z.
inline BackwardResult backward(const ModelParams& p, const Matrix& x, std::span<const ClassId> labels,
                               const LossSpec& spec, const DropoutMasks& masks, bool want_grads = true) {
  check_input(p, x);
  const auto b = x.rows();
  if (b == 0) throw InputError("backward: empty batch");
  if (static_cast<std::size_t>(b) != labels.size()) throw DimensionError("backward: label count mismatch");
  if (masks.head.rows() != b || masks.view1.rows() != b || masks.view2.rows() != b) {
    throw DimensionError("backward: dropout masks do not match batch");
  }

  const auto acts = run_trunk(p, x);
  const Matrix& z = acts.latent();
  const Matrix zh = z.cwiseProduct(masks.head);
  const Matrix logits = linear(p.head, zh);

  Matrix zv1, zv2, zc, pc;
  MultiViewBatch views;
  if (spec.use_scl) {
    zv1 = z.cwiseProduct(masks.view1);
    zv2 = z.cwiseProduct(masks.view2);
    views = make_multiview(linear(p.proj, zv1), linear(p.proj, zv2), labels);
  }
  if (spec.use_koleo) pc = linear(p.proj, z);

  auto loss = combined_loss(spec, logits, labels, spec.use_scl ? &views : nullptr, spec.use_koleo ? &pc : nullptr);
  BackwardResult out;
  out.loss = {loss.total, loss.ce, loss.scl, loss.koleo};
  if (!want_grads) return out;

  out.grads = p.zeros_like();
  Matrix dz = Matrix::Zero(b, z.cols());
  if (spec.use_ce) {
    out.grads.head.weight = zh.transpose() * loss.grad_logits;
    out.grads.head.bias = loss.grad_logits.colwise().sum();
    dz += (loss.grad_logits * p.head.weight.transpose()).cwiseProduct(masks.head);
  }
  auto through_proj = [&](const Matrix& input, const Matrix& d_out, const Matrix* mask) {
    out.grads.proj.weight += input.transpose() * d_out;
    out.grads.proj.bias += d_out.colwise().sum();
    Matrix d_in = d_out * p.proj.weight.transpose();
    if (mask) d_in = d_in.cwiseProduct(*mask);
    dz += d_in;
  };
  if (spec.use_scl) {
    through_proj(zv1, loss.grad_anchors.topRows(b), &masks.view1);
    through_proj(zv2, loss.grad_anchors.bottomRows(b), &masks.view2);
  }
  if (spec.use_koleo) through_proj(z, loss.grad_points, nullptr);

  Matrix d_out = dz;
  for (std::size_t l = p.trunk.size(); l-- > 0;) {
    const Matrix& h = acts.layers[l];
    const Matrix d_pre = d_out.cwiseProduct((1.0 - h.array().square()).matrix());
    const Matrix& input = l == 0 ? x : acts.layers[l - 1];
    out.grads.trunk[l].weight = input.transpose() * d_pre;
    out.grads.trunk[l].bias = d_pre.colwise().sum();
    if (l > 0) d_out = d_pre * p.trunk[l].weight.transpose();
  }
  return out;
}

struct Prediction {
  ClassId cls = 0;
  double confidence = 0.0;
  Vector probs;
  Vector z;
};

inline Matrix stack_features(std::span<const Example> examples, int dim) {
  Matrix x(static_cast<Eigen::Index>(examples.size()), dim);
  for (std::size_t i = 0; i < examples.size(); ++i) {
    const auto& e = examples[i];
    Vector f = e.features.size() > 0 ? e.features : (e.tokens ? mean_pool(*e.tokens) : Vector());
    if (f.size() != dim) throw DimensionError("example " + std::to_string(e.id) + " has wrong feature dimension");
    x.row(static_cast<Eigen::Index>(i)) = f.transpose();
  }
  return x;
}

// Eval-mode prediction; argmax ties go to the lowest class index.
inline std::vector<Prediction> predict(const ModelParams& p, const Matrix& x) {
  const auto out = forward(p, x, Mode::eval);
  std::vector<Prediction> preds(static_cast<std::size_t>(x.rows()));
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    auto& pr = preds[static_cast<std::size_t>(i)];
    pr.probs = out.probs.row(i).transpose();
    pr.z = out.z.row(i).transpose();
    pr.cls = 0;
    for (Eigen::Index c = 1; c < pr.probs.size(); ++c) {
      if (pr.probs(c) > pr.probs(pr.cls)) pr.cls = static_cast<ClassId>(c);
    }
    pr.confidence = pr.probs(pr.cls);
  }
  return preds;
}

inline std::vector<Prediction> predict(const ModelParams& p, std::span<const Example> examples) {
  if (examples.empty()) return {};
  return predict(p, stack_features(examples, p.config.input_dim));
}

}  // namespace tkknn
