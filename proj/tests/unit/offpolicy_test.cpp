#include <gtest/gtest.h>

#include <array>

#include "gentle/numkit/gradcheck.hpp"
#include "gentle/offpolicy.hpp"

using namespace gentle;

namespace {

Td3BcConfig small_config() {
  Td3BcConfig c;
  c.width = 16;
  c.depth = 3;
  return c;
}

RlBatch random_batch(Index n, Index sd, Index zd, double bound, nk::Rng& rng) {
  RlBatch b;
  b.s = Matrix(n, sd);
  b.s_next = Matrix(n, sd);
  b.a = Matrix(n, 2);
  b.r = Vector(n);
  b.z = Vector(zd);
  for (Index i = 0; i < n; ++i) {
    for (Index j = 0; j < sd; ++j) {
      b.s(i, j) = rng.uniform(-1, 1);
      b.s_next(i, j) = rng.uniform(-1, 1);
    }
    b.a(i, 0) = bound * rng.uniform(-1, 1);
    b.a(i, 1) = bound * rng.uniform(-1, 1);
    b.r[i] = rng.normal(0.0, 1.0);
  }
  for (Index j = 0; j < zd; ++j) b.z[j] = rng.uniform(-1, 1);
  return b;
}

ActorCritic make_ac(std::uint64_t seed, const Td3BcConfig& cfg = small_config(), double bound = 0.1) {
  nk::Rng rng(seed);
  return make_actor_critic(2, 3, 2, bound, cfg, rng);
}

double max_abs_diff(const nk::MlpParams& a, const nk::MlpParams& b) {
  double m = 0.0;
  for (std::size_t k = 0; k < a.layers.size(); ++k)
    m = std::max({m, (a.layers[k].weight - b.layers[k].weight).cwiseAbs().maxCoeff(),
                  (a.layers[k].bias - b.layers[k].bias).cwiseAbs().maxCoeff()});
  return m;
}

}  // namespace

TEST(Lambda, AlphaOverMeanAbsQ) {
  const std::array<double, 4> q{1.0, -3.0, 2.0, 2.0};
  EXPECT_DOUBLE_EQ(compute_lambda(q, 2.5), 1.25);
  const std::array<double, 1> one{-0.5};
  EXPECT_DOUBLE_EQ(compute_lambda(one, 2.5), 5.0);
}

TEST(Lambda, GuardAgainstZeroQ) {
  const std::array<double, 3> zeros{0.0, 0.0, 0.0};
  EXPECT_DOUBLE_EQ(compute_lambda(zeros, 2.5), 2.5 / kLambdaGuard);
  EXPECT_THROW(compute_lambda(std::span<const double>{}, 2.5), ConfigError);
}

TEST(Lambda, ComputedPerTaskBatch) {
  nk::Rng rng(1);
  const ActorCritic ac = make_ac(1);
  const std::array<RlBatch, 2> batches{random_batch(8, 2, 3, 0.1, rng), random_batch(5, 2, 3, 0.1, rng)};
  const auto st = stack_batches(ac, batches);
  const auto lambdas = segment_lambdas(ac, st);
  ASSERT_EQ(lambdas.size(), 2u);
  for (std::size_t k = 0; k < 2; ++k) {
    const auto single = stack_batches(ac, std::span<const RlBatch>(&batches[k], 1));
    EXPECT_DOUBLE_EQ(lambdas[k], segment_lambdas(ac, single)[0]);
  }
}

TEST(Critic, TargetIsRewardWhenGammaZero) {
  Td3BcConfig cfg = small_config();
  cfg.gamma = 0.0;
  const ActorCritic ac = make_ac(2, cfg);
  nk::Rng rng(2);
  const std::array<RlBatch, 1> b{random_batch(16, 2, 3, 0.1, rng)};
  const auto st = stack_batches(ac, b);
  EXPECT_EQ(critic_targets(ac, st, rng), st.r);
}

TEST(Critic, TargetUsesTwinMinimum) {
  Td3BcConfig cfg = small_config();
  cfg.policy_noise = 0.0;
  cfg.gamma = 0.5;
  ActorCritic ac = make_ac(3, cfg);
  // Make the second target critic a constant far below the first.
  for (auto& layer : ac.q2_target.layers) {
    layer.weight.setZero();
    layer.bias.setZero();
  }
  ac.q2_target.layers.back().bias(0) = -100.0;
  nk::Rng rng(3);
  const std::array<RlBatch, 1> b{random_batch(10, 2, 3, 0.1, rng)};
  const auto st = stack_batches(ac, b);
  const Vector y = critic_targets(ac, st, rng);
  for (Index i = 0; i < y.size(); ++i) EXPECT_DOUBLE_EQ(y[i], st.r[i] + 0.5 * -100.0);
}

TEST(Critic, TargetNoiseIsClipped) {
  Td3BcConfig cfg = small_config();
  cfg.policy_noise = 100.0;
  cfg.noise_clip = 0.5;
  cfg.gamma = 1.0;
  ActorCritic ac = make_ac(4, cfg);
  // Target Q = first action coordinate; actor target outputs 0.
  for (auto& layer : ac.actor_target.layers) {
    layer.weight.setZero();
    layer.bias.setZero();
  }
  ac.q1_target = nk::MlpParams{};
  nk::Layer lin;
  lin.weight = Matrix::Zero(2 + 3 + 2, 1);
  lin.weight(5, 0) = 1.0;
  lin.bias = nk::RowVector::Zero(1);
  ac.q1_target.layers = {lin};
  ac.q2_target = ac.q1_target;
  nk::Rng rng(4);
  const std::array<RlBatch, 1> b{random_batch(200, 2, 3, 0.1, rng)};
  const auto st = stack_batches(ac, b);
  const Vector y = critic_targets(ac, st, rng);
  int at_clip = 0;
  for (Index i = 0; i < y.size(); ++i) {
    const double shift = std::abs(y[i] - st.r[i]);
    EXPECT_LE(shift, 0.5 + 1e-12);
    at_clip += std::abs(shift - 0.5) < 1e-12 ? 1 : 0;
  }
  EXPECT_GE(at_clip, 190);
}

TEST(Critic, GradientMatchesDifferences) {
  ActorCritic ac = make_ac(5);
  nk::Rng rng(5);
  const std::array<RlBatch, 2> b{random_batch(6, 2, 3, 0.1, rng), random_batch(4, 2, 3, 0.1, rng)};
  const auto st = stack_batches(ac, b);
  const Vector y = critic_targets(ac, st, rng);
  auto g1 = nk::MlpGrads::zeros_like(ac.q1);
  auto g2 = nk::MlpGrads::zeros_like(ac.q2);
  critic_loss_grad(ac, st, y, &g1, &g2);
  auto loss = [&] { return critic_loss_grad(ac, st, y, nullptr, nullptr); };
  EXPECT_LT(nk::check_gradient(ac.q1, g1, loss, 1e-6).max_relative_error, 1e-4);
  EXPECT_LT(nk::check_gradient(ac.q2, g2, loss, 1e-6).max_relative_error, 1e-4);
}

TEST(Actor, GradientMatchesDifferences) {
  ActorCritic ac = make_ac(6);
  nk::Rng rng(6);
  const std::array<RlBatch, 3> b{random_batch(5, 2, 3, 0.1, rng), random_batch(7, 2, 3, 0.1, rng),
                                 random_batch(3, 2, 3, 0.1, rng)};
  const auto st = stack_batches(ac, b);
  const std::vector<double> lambdas{0.5, 2.0, 1.0};
  auto g = nk::MlpGrads::zeros_like(ac.actor);
  actor_loss_grad(ac, st, lambdas, &g);
  const auto r = nk::check_gradient(ac.actor, g, [&] { return actor_loss_grad(ac, st, lambdas, nullptr); }, 1e-6);
  EXPECT_LT(r.max_relative_error, 1e-4);
}

TEST(Actor, UpdateLeavesCriticsUntouched) {
  ActorCritic ac = make_ac(7);
  nk::Rng rng(7);
  const std::array<RlBatch, 1> b{random_batch(32, 2, 3, 0.1, rng)};
  const auto st = stack_batches(ac, b);
  const auto q1 = ac.q1, q2 = ac.q2, actor = ac.actor;
  const std::vector<double> lambdas{1.0};
  actor_update(st, ac, lambdas);
  EXPECT_EQ(max_abs_diff(q1, ac.q1), 0.0);
  EXPECT_EQ(max_abs_diff(q2, ac.q2), 0.0);
  EXPECT_GT(max_abs_diff(actor, ac.actor), 0.0);
}

TEST(Critic, UpdateLeavesActorUntouched) {
  ActorCritic ac = make_ac(8);
  nk::Rng rng(8);
  const std::array<RlBatch, 1> b{random_batch(32, 2, 3, 0.1, rng)};
  const auto actor = ac.actor, target = ac.q1_target;
  critic_update(stack_batches(ac, b), ac, rng);
  EXPECT_EQ(max_abs_diff(actor, ac.actor), 0.0);
  EXPECT_EQ(max_abs_diff(target, ac.q1_target), 0.0);
}

TEST(Targets, PolicyDelayAndSoftUpdate) {
  ActorCritic ac = make_ac(9);
  nk::Rng rng(9);
  const std::array<RlBatch, 1> b{random_batch(32, 2, 3, 0.1, rng)};
  const auto target0 = ac.q1_target;
  const auto st1 = rl_update(b, ac, rng);
  EXPECT_FALSE(st1.actor_updated);
  EXPECT_EQ(max_abs_diff(target0, ac.q1_target), 0.0);
  const auto st2 = rl_update(b, ac, rng);
  EXPECT_TRUE(st2.actor_updated);
  EXPECT_EQ(ac.critic_updates, 2u);
  EXPECT_EQ(ac.actor_updates, 1u);
  // theta' <- tau * theta + (1 - tau) * theta'
  for (std::size_t k = 0; k < ac.q1.layers.size(); ++k) {
    const Matrix expect = 0.005 * ac.q1.layers[k].weight + 0.995 * target0.layers[k].weight;
    EXPECT_TRUE(ac.q1_target.layers[k].weight.isApprox(expect, 1e-14));
  }
}

TEST(Policy, ActionsWithinBound) {
  nk::Rng rng(10);
  for (double bound : {0.1, 1.0}) {
    ActorCritic ac = make_ac(10, small_config(), bound);
    for (auto& layer : ac.actor.layers) layer.weight *= 20.0;
    const Matrix s = Matrix::Random(100, 2) * 50.0;
    const Matrix a = policy_act(ac, s, Vector::Constant(3, 0.9));
    EXPECT_LE(a.cwiseAbs().maxCoeff(), bound);
  }
}

TEST(Policy, BehaviourCloningAnchorsToData) {
  // With alpha = 0 the actor objective is pure regression onto the data.
  Td3BcConfig cfg = small_config();
  cfg.alpha = 0.0;
  cfg.actor_lr = 3e-3;
  ActorCritic ac = make_ac(11, cfg, 1.0);
  nk::Rng rng(11);
  RlBatch b = random_batch(64, 2, 3, 1.0, rng);
  for (Index i = 0; i < b.size(); ++i) {
    b.a(i, 0) = 0.5 * std::tanh(b.s(i, 0));
    b.a(i, 1) = -0.3;
  }
  const std::array<RlBatch, 1> batches{b};
  const auto st = stack_batches(ac, batches);
  const std::vector<double> lambdas{0.0};
  for (int k = 0; k < 1500; ++k) actor_update(st, ac, lambdas);
  const double err = (policy_act(ac, b.s, b.z) - b.a).cwiseAbs().maxCoeff();
  EXPECT_LT(err, 0.05);
}

TEST(Stack, NormalizesActionsAndRejectsBadShapes) {
  const ActorCritic ac = make_ac(12);
  nk::Rng rng(12);
  std::array<RlBatch, 1> b{random_batch(4, 2, 3, 0.1, rng)};
  const auto st = stack_batches(ac, b);
  EXPECT_TRUE(st.a.isApprox(b[0].a / 0.1, 1e-15));
  EXPECT_EQ(st.sz.rightCols(3).row(2).transpose(), b[0].z);
  b[0].z = Vector::Zero(4);
  EXPECT_THROW(stack_batches(ac, b), ConfigError);
  EXPECT_THROW(stack_batches(ac, std::span<const RlBatch>{}), ConfigError);
}
