#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "tkknn/data.hpp"
#include "tkknn/log.hpp"
#include "tkknn/model.hpp"
#include "tkknn/rng.hpp"

namespace tkknn {

struct AdamWConfig {
  double lr = 1e-3;
  double weight_decay = 0.01;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct OptimState {
  AdamWConfig hp;
  std::int64_t step = 0;
  std::vector<Matrix> m;
  std::vector<Matrix> v;
};

inline OptimState make_optim_state(const ModelParams& params, const AdamWConfig& hp) {
  OptimState s;
  s.hp = hp;
  for (const Matrix* t : params.tensors()) {
    s.m.push_back(Matrix::Zero(t->rows(), t->cols()));
    s.v.push_back(Matrix::Zero(t->rows(), t->cols()));
  }
  return s;
}

// Bias-corrected Adam update with decoupled weight decay:
//   w <- w * (1 - lr*wd) - lr * m_hat / (sqrt(v_hat) + eps)
// Returns false and leaves everything untouched if any gradient entry is
// non-finite.
inline bool optimizer_step(ModelParams& params, const ModelParams& grads, OptimState& state) {
  auto weights = params.tensors();
  const auto gs = grads.tensors();
  if (weights.size() != gs.size() || weights.size() != state.m.size()) {
    throw DimensionError("optimizer_step: tensor count mismatch");
  }
  for (std::size_t i = 0; i < gs.size(); ++i) {
    if (gs[i]->rows() != weights[i]->rows() || gs[i]->cols() != weights[i]->cols()) {
      throw DimensionError("optimizer_step: gradient shape mismatch");
    }
    if (!gs[i]->allFinite()) {
      log::warn("optimizer_step: non-finite gradient, step ", state.step + 1, " skipped");
      return false;
    }
  }
  const auto& hp = state.hp;
  ++state.step;
  const double c1 = 1.0 - std::pow(hp.beta1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(hp.beta2, static_cast<double>(state.step));
  const double shrink = 1.0 - hp.lr * hp.weight_decay;
  for (std::size_t i = 0; i < gs.size(); ++i) {
    Matrix& w = *weights[i];
    const Matrix& g = *gs[i];
    state.m[i] = hp.beta1 * state.m[i] + (1.0 - hp.beta1) * g;
    state.v[i] = hp.beta2 * state.v[i] + (1.0 - hp.beta2) * g.cwiseAbs2();
    w *= shrink;
    w.array() -= hp.lr * (state.m[i].array() / c1) / ((state.v[i].array() / c2).sqrt() + hp.eps);
  }
  return true;
}

// ---------------------------------------------------------------------------
// Checkpoint: "TKCK" | u32 version | u32 config-json length | config json |
// u32 tensor count | per tensor (u64 rows, u64 cols, f64 data) for params,
// then optimizer hyperparameters, step, moments, and the rng state string.

namespace detail {

inline void put_f64(std::string& out, double v) { put_bytes(out, std::bit_cast<std::uint64_t>(v), 8); }

inline void put_matrix(std::string& out, const Matrix& m) {
  put_bytes(out, static_cast<std::uint64_t>(m.rows()), 8);
  put_bytes(out, static_cast<std::uint64_t>(m.cols()), 8);
  for (Eigen::Index i = 0; i < m.size(); ++i) put_f64(out, m.data()[i]);
}

struct Reader {
  const std::string& bytes;
  std::size_t pos = 0;

  const unsigned char* take(std::size_t n) {
    if (pos + n > bytes.size()) throw LengthError("checkpoint truncated");
    const auto* p = reinterpret_cast<const unsigned char*>(bytes.data()) + pos;
    pos += n;
    return p;
  }
  std::uint64_t u(int n) { return get_bytes(take(static_cast<std::size_t>(n)), n); }
  double f64() { return std::bit_cast<double>(u(8)); }
  std::string str() {
    const auto n = u(4);
    const auto* p = take(n);
    return std::string(reinterpret_cast<const char*>(p), n);
  }
  Matrix matrix() {
    const auto rows = u(8);
    const auto cols = u(8);
    if (cols != 0 && rows > (bytes.size() / 8) / cols) throw LengthError("checkpoint tensor too large");
    Matrix m(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = f64();
    return m;
  }
};

inline void put_str(std::string& out, const std::string& s) {
  put_bytes(out, s.size(), 4);
  out += s;
}

}  // namespace detail

inline nlohmann::json model_config_to_json(const ModelConfig& c) {
  return {{"input_dim", c.input_dim},       {"hidden", c.hidden},
          {"num_classes", c.num_classes},   {"proj_dim", c.proj_dim},
          {"head_dropout", c.head_dropout}, {"aug_dropout", c.aug_dropout}};
}

inline ModelConfig model_config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  c.input_dim = j.at("input_dim").get<int>();
  c.hidden = j.at("hidden").get<std::vector<int>>();
  c.num_classes = j.at("num_classes").get<int>();
  c.proj_dim = j.at("proj_dim").get<int>();
  c.head_dropout = j.at("head_dropout").get<double>();
  c.aug_dropout = j.at("aug_dropout").get<double>();
  return c;
}

struct Checkpoint {
  ModelParams params;
  OptimState optim;
  Rng rng;
};

inline std::string encode_checkpoint(const Checkpoint& ck) {
  std::string out = "TKCK";
  detail::put_bytes(out, 1, 4);
  detail::put_str(out, model_config_to_json(ck.params.config).dump());
  const auto ts = ck.params.tensors();
  detail::put_bytes(out, ts.size(), 4);
  for (const Matrix* t : ts) detail::put_matrix(out, *t);
  const auto& hp = ck.optim.hp;
  for (double v : {hp.lr, hp.weight_decay, hp.beta1, hp.beta2, hp.eps}) detail::put_f64(out, v);
  detail::put_bytes(out, static_cast<std::uint64_t>(ck.optim.step), 8);
  detail::put_bytes(out, ck.optim.m.size(), 4);
  for (std::size_t i = 0; i < ck.optim.m.size(); ++i) {
    detail::put_matrix(out, ck.optim.m[i]);
    detail::put_matrix(out, ck.optim.v[i]);
  }
  detail::put_str(out, ck.rng.state());
  return out;
}

inline Checkpoint decode_checkpoint(const std::string& bytes) {
  if (bytes.size() < 8 || bytes.compare(0, 4, "TKCK") != 0) throw FormatError("bad checkpoint magic");
  detail::Reader r{bytes, 4};
  if (r.u(4) != 1) throw FormatError("unsupported checkpoint version");
  Checkpoint ck;
  ck.params.config = model_config_from_json(nlohmann::json::parse(r.str()));
  Rng scratch(0);
  ck.params = init_params(ck.params.config, scratch);
  auto ts = ck.params.tensors();
  if (r.u(4) != ts.size()) throw FormatError("checkpoint tensor count mismatch");
  for (Matrix* t : ts) {
    Matrix m = r.matrix();
    if (m.rows() != t->rows() || m.cols() != t->cols()) throw FormatError("checkpoint tensor shape mismatch");
    *t = std::move(m);
  }
  auto& hp = ck.optim.hp;
  hp.lr = r.f64();
  hp.weight_decay = r.f64();
  hp.beta1 = r.f64();
  hp.beta2 = r.f64();
  hp.eps = r.f64();
  ck.optim.step = static_cast<std::int64_t>(r.u(8));
  const auto nm = r.u(4);
  for (std::uint64_t i = 0; i < nm; ++i) {
    ck.optim.m.push_back(r.matrix());
    ck.optim.v.push_back(r.matrix());
  }
  ck.rng.restore(r.str());
  if (r.pos != bytes.size()) throw LengthError("trailing bytes in checkpoint");
  return ck;
}

inline void save_checkpoint(const Checkpoint& ck, const std::filesystem::path& path) {
  detail::write_file(path, encode_checkpoint(ck));
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  return decode_checkpoint(detail::read_file(path));
}

}  // namespace tkknn
