#include <gtest/gtest.h>

#include <cmath>

#include "oracles.hpp"
#include "support.hpp"
#include "tkknn/model.hpp"
#include "tkknn/optim.hpp"

using namespace tkknn;

namespace {

ModelConfig small_config(int d = 5, int c = 4) {
  ModelConfig cfg;
  cfg.input_dim = d;
  cfg.hidden = {7};
  cfg.num_classes = c;
  cfg.proj_dim = 6;
  return cfg;
}

Matrix random_matrix(Eigen::Index r, Eigen::Index c, Rng& rng, double scale = 1.0) {
  Matrix m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = scale * rng.normal();
  return m;
}

double grad_norm(const ModelParams& g) {
  double s = 0.0;
  for (const Matrix* t : g.tensors()) s += t->squaredNorm();
  return std::sqrt(s);
}

}  // namespace

TEST(MeanPool, Examples) {
  Matrix a(2, 2);
  a << 1, 3, 3, 5;
  EXPECT_EQ(mean_pool(a), Vector::LinSpaced(2, 2, 4));
  Matrix b(1, 2);
  b << 7, 7;
  EXPECT_EQ(mean_pool(b), Vector::Constant(2, 7));
  Matrix c(2, 1);
  c << 2.5, -2.5;
  EXPECT_EQ(mean_pool(c)(0), 0.0);
  EXPECT_THROW(mean_pool(Matrix(0, 3)), InputError);
}

TEST(Forward, ZeroWeightsGiveUniform) {
  Rng rng(1);
  auto p = init_params(small_config(3, 151), rng);
  for (Matrix* t : p.tensors()) t->setZero();
  const auto out = forward(p, random_matrix(4, 3, rng), Mode::eval);
  for (Eigen::Index i = 0; i < out.probs.size(); ++i) EXPECT_NEAR(out.probs.data()[i], 1.0 / 151, 1e-15);
  EXPECT_NEAR(1.0 / 151, 0.006623, 1e-6);
}

TEST(Forward, EvalIsDeterministicAndLeavesRngAlone) {
  Rng rng(2);
  const auto p = init_params(small_config(), rng);
  const Matrix x = random_matrix(6, 5, rng);
  Rng probe(99);
  const Rng before = probe;
  const auto a = forward(p, x, Mode::eval, &probe);
  const auto b = forward(p, x, Mode::eval, &probe);
  EXPECT_TRUE(probe == before);
  EXPECT_EQ(a.probs, b.probs);
  EXPECT_EQ(a.z, b.z);
  EXPECT_EQ(a.proj, b.proj);
}

TEST(Forward, ProbsSumToOne) {
  Rng rng(3);
  const auto p = init_params(small_config(), rng);
  for (Mode mode : {Mode::eval, Mode::train}) {
    const auto out = forward(p, random_matrix(20, 5, rng, 10.0), mode, &rng);
    for (Eigen::Index i = 0; i < out.probs.rows(); ++i) {
      EXPECT_NEAR(out.probs.row(i).sum(), 1.0, 1e-6);
      EXPECT_GE(out.probs.row(i).minCoeff(), 0.0);
    }
  }
}

TEST(Forward, TrainModeSameSeedSameOutput) {
  Rng init(4);
  const auto p = init_params(small_config(), init);
  const Matrix x = random_matrix(3, 5, init);
  Rng r1(5), r2(5);
  EXPECT_EQ(forward(p, x, Mode::train, &r1).probs, forward(p, x, Mode::train, &r2).probs);
}

TEST(Forward, NanFeatureIsInputError) {
  Rng rng(6);
  const auto p = init_params(small_config(), rng);
  Matrix x = Matrix::Zero(1, 5);
  x(0, 2) = std::nan("");
  EXPECT_THROW(forward(p, x, Mode::eval), InputError);
  EXPECT_THROW(forward(p, Matrix(Matrix::Zero(1, 4)), Mode::eval), DimensionError);
}

// Central differences on every parameter tensor of the full model for each
// loss combination, 5-example batches with fixed dropout masks.
TEST(Backward, MatchesFiniteDifferences) {
  Rng rng(7);
  const std::vector<LossSpec> specs = {
      {true, false, false, 0.1, 0.5, false},
      {false, true, false, 0.1, 0.5, false},
      {false, false, true, 1.0, 0.5, false},
      {true, true, true, 0.1, 0.5, false},
  };
  for (const auto& spec : specs) {
    for (int trial = 0; trial < 3; ++trial) {
      auto cfg = small_config();
      cfg.hidden = trial == 2 ? std::vector<int>{6, 5} : std::vector<int>{6};
      auto p = init_params(cfg, rng);
      const Matrix x = random_matrix(5, cfg.input_dim, rng);
      const std::vector<ClassId> y = {0, 1, 0, 2, 1};
      const auto masks = sample_masks(cfg, 5, rng);
      const auto res = backward(p, x, y, spec, masks);
      auto analytic = res.grads.tensors();
      auto weights = p.tensors();
      double scale = 0.0;
      for (const Matrix* g : analytic) scale = std::max(scale, g->cwiseAbs().maxCoeff());
      for (std::size_t t = 0; t < weights.size(); ++t) {
        const Matrix numeric = oracle::numeric_gradient(
            *weights[t], [&] { return backward(p, x, y, spec, masks, false).loss.total; });
        EXPECT_LT(oracle::max_relative_error(*analytic[t], numeric, scale), 1e-4)
            << "tensor " << t << " ce " << spec.use_ce << " scl " << spec.use_scl << " koleo " << spec.use_koleo;
      }
    }
  }
}

TEST(Backward, SaturatedHeadHasNoSignal) {
  Rng rng(8);
  auto cfg = small_config();
  auto p = init_params(cfg, rng);
  p.head.weight.setZero();
  p.head.bias.setZero();
  p.head.bias(0, 0) = 60.0;
  const Matrix x = random_matrix(6, cfg.input_dim, rng);
  const std::vector<ClassId> y(6, 0);
  const auto res = backward(p, x, y, {true, false, false}, sample_masks(cfg, 6, rng));
  EXPECT_LT(grad_norm(res.grads), 1e-6);
}

TEST(Backward, DuplicatedBatchSameMeanGradient) {
  Rng rng(9);
  auto cfg = small_config();
  const auto p = init_params(cfg, rng);
  const Matrix x = random_matrix(4, cfg.input_dim, rng);
  const std::vector<ClassId> y = {0, 3, 1, 1};
  const auto m = sample_masks(cfg, 4, rng);
  Matrix x2(8, cfg.input_dim);
  x2 << x, x;
  std::vector<ClassId> y2 = y;
  y2.insert(y2.end(), y.begin(), y.end());
  DropoutMasks m2;
  for (auto [dst, src] : {std::pair{&m2.head, &m.head}, {&m2.view1, &m.view1}, {&m2.view2, &m.view2}}) {
    dst->resize(8, src->cols());
    *dst << *src, *src;
  }
  const auto a = backward(p, x, y, {true, false, false}, m);
  const auto b = backward(p, x2, y2, {true, false, false}, m2);
  EXPECT_NEAR(a.loss.total, b.loss.total, 1e-12);
  const auto ga = a.grads.tensors();
  const auto gb = b.grads.tensors();
  for (std::size_t i = 0; i < ga.size(); ++i) EXPECT_LT((*ga[i] - *gb[i]).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Backward, ShapeMismatchThrows) {
  Rng rng(10);
  auto cfg = small_config();
  const auto p = init_params(cfg, rng);
  const std::vector<ClassId> y = {0, 1};
  EXPECT_THROW(backward(p, random_matrix(3, cfg.input_dim, rng), y, {}, sample_masks(cfg, 3, rng)),
               DimensionError);
  EXPECT_THROW(backward(p, random_matrix(2, cfg.input_dim, rng), y, {}, sample_masks(cfg, 3, rng)),
               DimensionError);
}

TEST(Predict, ArgmaxAndTieBreak) {
  Rng rng(11);
  auto cfg = small_config(2, 3);
  cfg.hidden = {2};
  auto p = init_params(cfg, rng);
  for (Matrix* t : p.tensors()) t->setZero();
  p.head.bias << std::log(0.2), std::log(0.5), std::log(0.3);
  auto pr = predict(p, Matrix::Zero(1, 2));
  EXPECT_EQ(pr[0].cls, 1);
  EXPECT_NEAR(pr[0].confidence, 0.5, 1e-12);

  cfg.num_classes = 2;
  auto q = init_params(cfg, rng);
  for (Matrix* t : q.tensors()) t->setZero();
  pr = predict(q, Matrix::Zero(1, 2));
  EXPECT_EQ(pr[0].cls, 0);
  EXPECT_EQ(pr[0].confidence, 0.5);
}

TEST(Predict, BatchEqualsSingle) {
  Rng rng(12);
  const auto p = init_params(small_config(), rng);
  const Matrix x = random_matrix(9, 5, rng);
  const auto batch = predict(p, x);
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    const auto one = predict(p, Matrix(x.row(i)));
    EXPECT_EQ(one[0].cls, batch[static_cast<std::size_t>(i)].cls);
    EXPECT_NEAR(one[0].confidence, batch[static_cast<std::size_t>(i)].confidence, 1e-15);
    EXPECT_LT((one[0].z - batch[static_cast<std::size_t>(i)].z).cwiseAbs().maxCoeff(), 1e-15);
  }
}

namespace {

ModelParams scalar_model(double w) {
  ModelParams p;
  p.config.input_dim = 1;
  p.config.hidden = {};
  p.head.weight = Matrix::Constant(1, 1, w);
  p.head.bias = Matrix::Zero(1, 1);
  p.proj.weight = Matrix::Zero(1, 1);
  p.proj.bias = Matrix::Zero(1, 1);
  return p;
}

}  // namespace

TEST(AdamW, HandExecutedStep) {
  auto p = scalar_model(1.0);
  auto g = scalar_model(1.0);
  g.head.bias.setZero();
  AdamWConfig hp;
  hp.lr = 0.1;
  hp.weight_decay = 0.0;
  auto st = make_optim_state(p, hp);
  ASSERT_TRUE(optimizer_step(p, g, st));
  // m_hat = 1, v_hat = 1, so w = 1 - 0.1 * 1 / (1 + 1e-8)
  EXPECT_NEAR(p.head.weight(0, 0), 0.9, 1e-8);
  EXPECT_EQ(st.step, 1);
}

TEST(AdamW, ZeroGradientFixedPoint) {
  auto p = scalar_model(2.5);
  auto st = make_optim_state(p, {0.1, 0.0});
  ASSERT_TRUE(optimizer_step(p, p.zeros_like(), st));
  EXPECT_EQ(p.head.weight(0, 0), 2.5);
}

TEST(AdamW, DecoupledDecayShrinks) {
  auto p = scalar_model(2.0);
  auto st = make_optim_state(p, {0.1, 0.5});
  ASSERT_TRUE(optimizer_step(p, p.zeros_like(), st));
  EXPECT_DOUBLE_EQ(p.head.weight(0, 0), 2.0 * (1.0 - 0.1 * 0.5));
}

TEST(AdamW, NonFiniteGradientAborts) {
  auto p = scalar_model(1.0);
  auto g = p.zeros_like();
  g.head.weight(0, 0) = INFINITY;
  auto st = make_optim_state(p, {});
  EXPECT_FALSE(optimizer_step(p, g, st));
  EXPECT_EQ(st.step, 0);
  EXPECT_EQ(p.head.weight(0, 0), 1.0);
}

TEST(Checkpoint, RoundTripGivesBitIdenticalContinuation) {
  Rng rng(13);
  auto cfg = small_config();
  auto p = init_params(cfg, rng);
  auto st = make_optim_state(p, {});
  Rng train_rng(14);
  const Matrix x = random_matrix(8, cfg.input_dim, rng);
  const std::vector<ClassId> y = {0, 1, 2, 3, 0, 1, 2, 3};
  auto step = [&](ModelParams& params, OptimState& os, Rng& r) {
    const auto res = backward(params, x, y, {}, sample_masks(cfg, 8, r));
    optimizer_step(params, res.grads, os);
  };
  for (int i = 0; i < 3; ++i) step(p, st, train_rng);

  tkknn::testing::TempDir dir("ckpt");
  save_checkpoint({p, st, train_rng}, dir / "m.tkck");
  auto ck = load_checkpoint(dir / "m.tkck");
  for (int i = 0; i < 4; ++i) {
    step(p, st, train_rng);
    step(ck.params, ck.optim, ck.rng);
  }
  const auto a = p.tensors();
  const auto b = ck.params.tensors();
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_TRUE(*a[i] == *b[i]);
  EXPECT_TRUE(train_rng == ck.rng);
  EXPECT_EQ(encode_checkpoint({p, st, train_rng}), encode_checkpoint(ck));
}

TEST(Checkpoint, BadMagic) {
  EXPECT_THROW(decode_checkpoint("NOPE1234"), FormatError);
}
