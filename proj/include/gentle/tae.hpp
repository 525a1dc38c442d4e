#pragma once

#include <algorithm>
#include <numeric>
#include <string>
#include <vector>

#include "gentle/errors.hpp"
#include "gentle/numkit/adam.hpp"
#include "gentle/numkit/mlp.hpp"

namespace gentle {

using nk::Index;
using nk::Matrix;
using nk::Vector;

/// n labelled probing pairs from one task: rows of x = (s, a), rows of y =
/// (s', r) or (r).
struct ContextBatch {
  Matrix x;
  Matrix y;

  [[nodiscard]] Index size() const { return x.rows(); }
};

struct TaeConfig {
  Index latent_dim = 5;
  Index width = 64;
  int hidden_layers = 3;
};

/// Task auto-encoder: per-pair feature net, mean pooling and tanh squash on
/// the encoder side; a conditional decoder mapping (x, z) to y.
struct TaePair {
  nk::MlpParams feature;
  nk::MlpParams decoder;
  Index x_dim = 0;
  Index y_dim = 0;
  Index latent_dim = 0;
};

inline TaePair make_tae(Index x_dim, Index y_dim, const TaeConfig& cfg, nk::Rng& rng) {
  if (cfg.latent_dim < 1 || cfg.width < 1 || cfg.hidden_layers < 0) throw ConfigError("invalid TAE config");
  TaePair p;
  p.x_dim = x_dim;
  p.y_dim = y_dim;
  p.latent_dim = cfg.latent_dim;
  const int depth = cfg.hidden_layers + 1;
  p.feature = nk::make_mlp(nk::mlp_dims(x_dim + y_dim, cfg.width, depth, cfg.latent_dim), nk::Activation::relu,
                           nk::Activation::identity, rng);
  p.decoder = nk::make_mlp(nk::mlp_dims(x_dim + cfg.latent_dim, cfg.width, depth, y_dim), nk::Activation::relu,
                           nk::Activation::identity, rng);
  return p;
}

struct TaeGrads {
  nk::MlpGrads feature;
  nk::MlpGrads decoder;

  static TaeGrads zeros_like(const TaePair& p) {
    return {nk::MlpGrads::zeros_like(p.feature), nk::MlpGrads::zeros_like(p.decoder)};
  }
  void set_zero() {
    feature.set_zero();
    decoder.set_zero();
  }
};

struct TaeOptimizer {
  nk::AdamState feature;
  nk::AdamState decoder;

  TaeOptimizer() = default;
  TaeOptimizer(const TaePair& p, double lr) : feature(p.feature, {lr}), decoder(p.decoder, {lr}) {}

  void step(TaePair& p, const TaeGrads& g) {
    nk::adam_step(feature, p.feature, g.feature);
    nk::adam_step(decoder, p.decoder, g.decoder);
  }
};

namespace detail {

inline void check_context(const TaePair& p, const ContextBatch& c) {
  if (c.x.rows() != c.y.rows()) throw ConfigError("context: x and y row counts differ");
  if (c.size() > 0 && (c.x.cols() != p.x_dim || c.y.cols() != p.y_dim))
    throw ConfigError("context: pair dimensionality does not match the TAE (" + std::to_string(c.x.cols()) + "+" +
                      std::to_string(c.y.cols()) + " vs " + std::to_string(p.x_dim) + "+" +
                      std::to_string(p.y_dim) + ")");
}

inline Matrix concat_cols(const Matrix& a, const Matrix& b) {
  Matrix out(a.rows(), a.cols() + b.cols());
  out << a, b;
  return out;
}

// Decoder input rows (x_k, z).
inline Matrix decoder_input(const Matrix& x, const Vector& z) {
  Matrix out(x.rows(), x.cols() + z.size());
  out.leftCols(x.cols()) = x;
  out.rightCols(z.size()).rowwise() = z.transpose();
  return out;
}

// Rows of (x, y) in lexicographic order. Pooling over a canonical order makes
// the latent bit-identical under any permutation of the context.
inline Matrix canonical_pairs(const ContextBatch& c) {
  const Matrix u = concat_cols(c.x, c.y);
  std::vector<Index> order(static_cast<std::size_t>(u.rows()));
  std::iota(order.begin(), order.end(), Index{0});
  std::sort(order.begin(), order.end(), [&](Index a, Index b) {
    for (Index j = 0; j < u.cols(); ++j) {
      if (u(a, j) < u(b, j)) return true;
      if (u(b, j) < u(a, j)) return false;
    }
    return false;
  });
  Matrix out(u.rows(), u.cols());
  for (std::size_t i = 0; i < order.size(); ++i) out.row(static_cast<Index>(i)) = u.row(order[i]);
  return out;
}

// tanh saturates to exactly +-1 in double precision; keep z strictly inside.
inline Vector squash(const Vector& h) {
  constexpr double kEdge = 1.0 - 1e-15;
  return h.array().tanh().cwiseMax(-kEdge).cwiseMin(kEdge).matrix();
}

struct EncodeTrace {
  nk::MlpCache cache;
  Vector z;
};

inline EncodeTrace encode_traced(const TaePair& p, const ContextBatch& c) {
  EncodeTrace t;
  const Matrix e = nk::mlp_forward(p.feature, canonical_pairs(c), t.cache);
  t.z = squash(e.colwise().mean().transpose());
  return t;
}

// Pushes dL/dz back through tanh and mean pooling into the feature net.
inline void backprop_latent(const TaePair& p, const EncodeTrace& t, const Vector& d_z, nk::MlpGrads& g) {
  const Index n = t.cache.activations.front().rows();
  const Vector d_h = d_z.array() * (1.0 - t.z.array().square());
  Matrix d_e(n, p.latent_dim);
  d_e.rowwise() = (d_h / static_cast<double>(n)).transpose();
  nk::mlp_backward(p.feature, t.cache, d_e, &g);
}

}  // namespace detail

/// z = tanh(mean_k feature(x_k, y_k)); the empty context maps to the zero prior.
inline Vector encode(const TaePair& p, const ContextBatch& c) {
  detail::check_context(p, c);
  if (c.size() == 0) return Vector::Zero(p.latent_dim);
  const Matrix e = nk::mlp_forward(p.feature, detail::canonical_pairs(c));
  return detail::squash(e.colwise().mean().transpose());
}

inline Matrix decode(const TaePair& p, const Vector& z, const Matrix& x) {
  if (z.size() != p.latent_dim || x.cols() != p.x_dim) throw ConfigError("decode: dimension mismatch");
  return nk::mlp_forward(p.decoder, detail::decoder_input(x, z));
}

/// Mean over pairs of ||y_k - decode(encode(ctx), x_k)||^2.
inline double tae_loss(const TaePair& p, const ContextBatch& c) {
  if (c.size() < 1) throw ConfigError("tae_loss: context must be non-empty");
  const Matrix y_hat = decode(p, encode(p, c), c.x);
  return (c.y - y_hat).squaredNorm() / static_cast<double>(c.size());
}

/// Loss plus gradients w.r.t. both networks; gradients are scaled by `scale`
/// and accumulated into `g`.
inline double tae_loss_grad(const TaePair& p, const ContextBatch& c, TaeGrads& g, double scale = 1.0) {
  detail::check_context(p, c);
  if (c.size() < 1) throw ConfigError("tae_loss: context must be non-empty");
  const auto n = static_cast<double>(c.size());
  const detail::EncodeTrace enc = detail::encode_traced(p, c);
  nk::MlpCache dec_cache;
  const Matrix y_hat = nk::mlp_forward(p.decoder, detail::decoder_input(c.x, enc.z), dec_cache);
  const Matrix resid = y_hat - c.y;
  const double loss = resid.squaredNorm() / n;
  const Matrix d_yhat = (2.0 * scale / n) * resid;
  const Matrix d_in = nk::mlp_backward(p.decoder, dec_cache, d_yhat, &g.decoder);
  const Vector d_z = d_in.rightCols(p.latent_dim).colwise().sum().transpose();
  detail::backprop_latent(p, enc, d_z, g.feature);
  return loss;
}

inline constexpr double kContrastiveEpsilon = 1e-3;

struct ContrastiveParts {
  double same_task = 0.0;   // mean squared distance, same-task pairs
  double cross_task = 0.0;  // mean inverse squared distance, cross-task pairs
};

/// Contrastive objective over embeddings of several contexts per task:
/// mean squared distance of same-task pairs plus mean inverse squared
/// distance of cross-task pairs. Gradients (feature net only) accumulate into
/// `g` when non-null.
inline double contrastive_loss(const TaePair& p, const std::vector<std::vector<ContextBatch>>& per_task,
                               nk::MlpGrads* g = nullptr, double scale = 1.0,
                               double epsilon = kContrastiveEpsilon, ContrastiveParts* parts = nullptr) {
  if (per_task.size() < 2) throw ConfigError("contrastive_loss: needs at least 2 tasks");
  std::vector<detail::EncodeTrace> traces;
  std::vector<std::size_t> label;
  for (std::size_t t = 0; t < per_task.size(); ++t) {
    if (per_task[t].size() < 2) throw ConfigError("contrastive_loss: needs at least 2 contexts per task");
    for (const auto& c : per_task[t]) {
      detail::check_context(p, c);
      if (c.size() < 1) throw ConfigError("contrastive_loss: empty context");
      traces.push_back(detail::encode_traced(p, c));
      label.push_back(t);
    }
  }
  const std::size_t m = traces.size();
  std::size_t n_same = 0;
  std::size_t n_diff = 0;
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = i + 1; j < m; ++j) (label[i] == label[j] ? n_same : n_diff)++;

  double same = 0.0;
  double diff = 0.0;
  std::vector<Vector> d_z(m, Vector::Zero(p.latent_dim));
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = i + 1; j < m; ++j) {
      const Vector delta = traces[i].z - traces[j].z;
      const double d2 = delta.squaredNorm();
      if (label[i] == label[j]) {
        same += d2;
        const Vector gz = (2.0 / static_cast<double>(n_same)) * delta;
        d_z[i] += gz;
        d_z[j] -= gz;
      } else {
        const double inv = 1.0 / (d2 + epsilon);
        diff += inv;
        const Vector gz = (-2.0 * inv * inv / static_cast<double>(n_diff)) * delta;
        d_z[i] += gz;
        d_z[j] -= gz;
      }
    }
  }
  if (g != nullptr)
    for (std::size_t i = 0; i < m; ++i) detail::backprop_latent(p, traces[i], scale * d_z[i], *g);
  const ContrastiveParts out{same / static_cast<double>(n_same), diff / static_cast<double>(n_diff)};
  if (parts != nullptr) *parts = out;
  return out.same_task + out.cross_task;
}

}  // namespace gentle
