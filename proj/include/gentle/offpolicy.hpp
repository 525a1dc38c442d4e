#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <span>
#include <vector>

#include "gentle/errors.hpp"
#include "gentle/numkit/adam.hpp"
#include "gentle/numkit/mlp.hpp"

namespace gentle {

using nk::Index;
using nk::Matrix;
using nk::Vector;

struct Td3BcConfig {
  double gamma = 0.9;
  double tau = 0.005;
  double policy_noise = 0.2;  // in normalized action units
  double noise_clip = 0.5;
  int policy_delay = 2;
  double alpha = 2.5;
  double actor_lr = 3e-4;
  double critic_lr = 3e-4;
  Index width = 64;
  int depth = 4;  // linear layers
};

inline constexpr double kLambdaGuard = 1e-8;

/// TD3+BC trade-off: alpha / max(mean |Q|, guard).
inline double compute_lambda(std::span<const double> q_values, double alpha) {
  if (q_values.empty()) throw ConfigError("compute_lambda: empty Q list");
  double sum = 0.0;
  for (double q : q_values) sum += std::abs(q);
  return alpha / std::max(sum / static_cast<double>(q_values.size()), kLambdaGuard);
}

/// Deterministic actor and twin critics with target copies. Networks work in
/// normalized action units [-1, 1]; the environment action is bound * output.
struct ActorCritic {
  Index state_dim = 0;
  Index latent_dim = 0;
  Index action_dim = 2;
  double action_bound = 1.0;
  Td3BcConfig config;

  nk::MlpParams actor;
  nk::MlpParams q1;
  nk::MlpParams q2;
  nk::MlpParams actor_target;
  nk::MlpParams q1_target;
  nk::MlpParams q2_target;

  nk::AdamState actor_opt;
  nk::AdamState q1_opt;
  nk::AdamState q2_opt;

  std::uint64_t critic_updates = 0;
  std::uint64_t actor_updates = 0;
};

inline ActorCritic make_actor_critic(Index state_dim, Index latent_dim, Index action_dim, double action_bound,
                                     const Td3BcConfig& cfg, nk::Rng& rng) {
  ActorCritic ac;
  ac.state_dim = state_dim;
  ac.latent_dim = latent_dim;
  ac.action_dim = action_dim;
  ac.action_bound = action_bound;
  ac.config = cfg;
  const Index in = state_dim + latent_dim;
  ac.actor = nk::make_mlp(nk::mlp_dims(in, cfg.width, cfg.depth, action_dim), nk::Activation::relu,
                          nk::Activation::tanh, rng);
  ac.q1 = nk::make_mlp(nk::mlp_dims(in + action_dim, cfg.width, cfg.depth, 1), nk::Activation::relu,
                       nk::Activation::identity, rng);
  ac.q2 = nk::make_mlp(nk::mlp_dims(in + action_dim, cfg.width, cfg.depth, 1), nk::Activation::relu,
                       nk::Activation::identity, rng);
  ac.actor_target = ac.actor;
  ac.q1_target = ac.q1;
  ac.q2_target = ac.q2;
  ac.actor_opt = nk::AdamState(ac.actor, {cfg.actor_lr});
  ac.q1_opt = nk::AdamState(ac.q1, {cfg.critic_lr});
  ac.q2_opt = nk::AdamState(ac.q2, {cfg.critic_lr});
  return ac;
}

/// B transitions of one task, with that task's detached latent.
struct RlBatch {
  Matrix s;
  Matrix a;  // environment units
  Vector r;
  Matrix s_next;
  Vector z;

  [[nodiscard]] Index size() const { return s.rows(); }
};

/// Several task batches stacked row-wise; `segments` holds each batch's row count.
struct StackedBatch {
  Matrix sz;
  Matrix sz_next;
  Matrix a;  // normalized units
  Vector r;
  std::vector<Index> segments;

  [[nodiscard]] Index rows() const { return sz.rows(); }
};

inline Matrix append_latent(const Matrix& s, const Vector& z) {
  Matrix out(s.rows(), s.cols() + z.size());
  out.leftCols(s.cols()) = s;
  out.rightCols(z.size()).rowwise() = z.transpose();
  return out;
}

inline StackedBatch stack_batches(const ActorCritic& ac, std::span<const RlBatch> batches) {
  Index total = 0;
  for (const auto& b : batches) {
    if (b.s.cols() != ac.state_dim || b.z.size() != ac.latent_dim || b.a.cols() != ac.action_dim ||
        b.r.size() != b.s.rows() || b.s_next.rows() != b.s.rows() || b.a.rows() != b.s.rows())
      throw ConfigError("RL batch shape does not match the actor-critic");
    total += b.size();
  }
  if (total == 0) throw ConfigError("empty RL batch");
  StackedBatch st;
  const Index in = ac.state_dim + ac.latent_dim;
  st.sz.resize(total, in);
  st.sz_next.resize(total, in);
  st.a.resize(total, ac.action_dim);
  st.r.resize(total);
  Index row = 0;
  for (const auto& b : batches) {
    st.sz.middleRows(row, b.size()) = append_latent(b.s, b.z);
    st.sz_next.middleRows(row, b.size()) = append_latent(b.s_next, b.z);
    st.a.middleRows(row, b.size()) = b.a / ac.action_bound;
    st.r.segment(row, b.size()) = b.r;
    st.segments.push_back(b.size());
    row += b.size();
  }
  return st;
}

inline Matrix critic_input(const Matrix& sz, const Matrix& a) {
  Matrix out(sz.rows(), sz.cols() + a.cols());
  out << sz, a;
  return out;
}

/// Deterministic action in environment units for states `s` under latent `z`.
inline Matrix policy_act(const ActorCritic& ac, const Matrix& s, const Vector& z) {
  return ac.action_bound * nk::mlp_forward(ac.actor, append_latent(s, z));
}

inline Vector policy_act(const ActorCritic& ac, const Vector& s, const Vector& z) {
  Matrix row = s.transpose();
  return policy_act(ac, row, z).row(0).transpose();
}

/// y = r + gamma * min(Q1', Q2')(s' + z, a~), a~ the smoothed target action.
inline Vector critic_targets(const ActorCritic& ac, const StackedBatch& b, nk::Rng& rng) {
  const Td3BcConfig& c = ac.config;
  Matrix next_a = nk::mlp_forward(ac.actor_target, b.sz_next);
  for (Index i = 0; i < next_a.size(); ++i) {
    const double noise = std::clamp(rng.normal(0.0, c.policy_noise), -c.noise_clip, c.noise_clip);
    next_a.data()[i] = std::clamp(next_a.data()[i] + noise, -1.0, 1.0);
  }
  const Matrix in = critic_input(b.sz_next, next_a);
  const Matrix t1 = nk::mlp_forward(ac.q1_target, in);
  const Matrix t2 = nk::mlp_forward(ac.q2_target, in);
  Vector y(b.rows());
  for (Index i = 0; i < b.rows(); ++i) y[i] = b.r[i] + c.gamma * std::min(t1(i, 0), t2(i, 0));
  return y;
}

/// Sum of both critics' mean squared TD errors against fixed targets `y`.
inline double critic_loss_grad(const ActorCritic& ac, const StackedBatch& b, const Vector& y, nk::MlpGrads* g1,
                               nk::MlpGrads* g2) {
  const Matrix in = critic_input(b.sz, b.a);
  const auto n = static_cast<double>(b.rows());
  double loss = 0.0;
  auto one = [&](const nk::MlpParams& q, nk::MlpGrads* g) {
    nk::MlpCache cache;
    const Matrix out = nk::mlp_forward(q, in, cache);
    const Matrix resid = out - Matrix(y);
    loss += resid.squaredNorm() / n;
    if (g != nullptr) nk::mlp_backward(q, cache, (2.0 / n) * resid, g);
  };
  one(ac.q1, g1);
  one(ac.q2, g2);
  return loss;
}

/// Per-segment lambda computed from Q1(s, pi(s)).
inline std::vector<double> segment_lambdas(const ActorCritic& ac, const StackedBatch& b) {
  const Matrix pi = nk::mlp_forward(ac.actor, b.sz);
  const Matrix q = nk::mlp_forward(ac.q1, critic_input(b.sz, pi));
  std::vector<double> out;
  Index row = 0;
  for (Index len : b.segments) {
    std::vector<double> qs(q.data() + row, q.data() + row + len);
    out.push_back(compute_lambda(qs, ac.config.alpha));
    row += len;
  }
  return out;
}

/// Minimized actor objective: mean over segments of
///   -lambda_i * mean Q1(s, pi(s)) + mean ||pi(s) - a||^2
/// (normalized action units). Gradients w.r.t. the actor only.
inline double actor_loss_grad(const ActorCritic& ac, const StackedBatch& b, std::span<const double> lambdas,
                              nk::MlpGrads* g) {
  if (lambdas.size() != b.segments.size()) throw ConfigError("actor update: one lambda per task batch required");
  nk::MlpCache actor_cache;
  const Matrix pi = nk::mlp_forward(ac.actor, b.sz, actor_cache);
  nk::MlpCache q_cache;
  const Matrix q = nk::mlp_forward(ac.q1, critic_input(b.sz, pi), q_cache);
  const auto n_seg = static_cast<double>(b.segments.size());
  Matrix d_q(b.rows(), 1);
  Matrix d_pi(b.rows(), ac.action_dim);
  double loss = 0.0;
  Index row = 0;
  for (std::size_t k = 0; k < b.segments.size(); ++k) {
    const Index len = b.segments[k];
    const auto w = 1.0 / (n_seg * static_cast<double>(len));
    const auto q_seg = q.middleRows(row, len);
    const Matrix diff = pi.middleRows(row, len) - b.a.middleRows(row, len);
    loss += w * (-lambdas[k] * q_seg.sum() + diff.squaredNorm());
    d_q.middleRows(row, len).setConstant(-lambdas[k] * w);
    d_pi.middleRows(row, len) = 2.0 * w * diff;
    row += len;
  }
  if (g != nullptr) {
    const Matrix d_in = nk::mlp_backward(ac.q1, q_cache, d_q, nullptr);
    d_pi += d_in.rightCols(ac.action_dim);
    nk::mlp_backward(ac.actor, actor_cache, d_pi, g);
  }
  return loss;
}

inline void soft_update_targets(ActorCritic& ac) {
  nk::soft_update(ac.actor_target, ac.actor, ac.config.tau);
  nk::soft_update(ac.q1_target, ac.q1, ac.config.tau);
  nk::soft_update(ac.q2_target, ac.q2, ac.config.tau);
}

/// One critic regression step; returns the critic loss before the step.
inline double critic_update(const StackedBatch& b, ActorCritic& ac, nk::Rng& rng) {
  const Vector y = critic_targets(ac, b, rng);
  auto g1 = nk::MlpGrads::zeros_like(ac.q1);
  auto g2 = nk::MlpGrads::zeros_like(ac.q2);
  const double loss = critic_loss_grad(ac, b, y, &g1, &g2);
  nk::adam_step(ac.q1_opt, ac.q1, g1);
  nk::adam_step(ac.q2_opt, ac.q2, g2);
  ++ac.critic_updates;
  return loss;
}

/// One actor step followed by the soft target update; returns the actor loss.
inline double actor_update(const StackedBatch& b, ActorCritic& ac, std::span<const double> lambdas) {
  auto g = nk::MlpGrads::zeros_like(ac.actor);
  const double loss = actor_loss_grad(ac, b, lambdas, &g);
  nk::adam_step(ac.actor_opt, ac.actor, g);
  soft_update_targets(ac);
  ++ac.actor_updates;
  return loss;
}

struct RlStepStats {
  double critic_loss = 0.0;
  double actor_loss = std::numeric_limits<double>::quiet_NaN();
  double lambda = std::numeric_limits<double>::quiet_NaN();
  bool actor_updated = false;
};

/// Critic step every call; actor and target step every `policy_delay` calls.
inline RlStepStats rl_update(std::span<const RlBatch> batches, ActorCritic& ac, nk::Rng& rng) {
  const StackedBatch b = stack_batches(ac, batches);
  RlStepStats st;
  st.critic_loss = critic_update(b, ac, rng);
  if (ac.critic_updates % static_cast<std::uint64_t>(std::max(ac.config.policy_delay, 1)) == 0) {
    const auto lambdas = segment_lambdas(ac, b);
    st.actor_loss = actor_update(b, ac, lambdas);
    double sum = 0.0;
    for (double l : lambdas) sum += l;
    st.lambda = sum / static_cast<double>(lambdas.size());
    st.actor_updated = true;
  }
  return st;
}

}  // namespace gentle
