#include <gtest/gtest.h>

#include <cmath>

#include "gentle/env.hpp"

using namespace gentle;

namespace {

TaskSpec robot(double gx, double gy) {
  TaskSpec t;
  t.family = Family::point_robot;
  t.goal = {gx, gy};
  return t;
}

TaskSpec mass(double damping, double m) {
  TaskSpec t;
  t.family = Family::point_mass_params;
  t.damping_mult = damping;
  t.mass_mult = m;
  return t;
}

Vector vec(std::initializer_list<double> v) {
  Vector out(static_cast<Index>(v.size()));
  Index i = 0;
  for (double x : v) out[i++] = x;
  return out;
}

}  // namespace

TEST(SampleTasks, PointRobotGoalsInsideSquare) {
  for (std::uint64_t seed : {0u, 1u, 99u}) {
    for (const auto& t : sample_tasks(Family::point_robot, 200, seed)) {
      EXPECT_GE(t.goal[0], -1.0);
      EXPECT_LE(t.goal[0], 1.0);
      EXPECT_GE(t.goal[1], -1.0);
      EXPECT_LE(t.goal[1], 1.0);
      EXPECT_NO_THROW(validate(t));
    }
  }
}

TEST(SampleTasks, Deterministic) {
  EXPECT_EQ(sample_tasks(Family::point_mass_params, 20, 5), sample_tasks(Family::point_mass_params, 20, 5));
  EXPECT_EQ(sample_tasks(Family::point_robot, 20, 5, Split::test), sample_tasks(Family::point_robot, 20, 5, Split::test));
}

TEST(SampleTasks, SplitsUseDisjointStreams) {
  const auto train = sample_tasks(Family::point_robot, 10, 3, Split::train);
  const auto test = sample_tasks(Family::point_robot, 10, 3, Split::test);
  for (const auto& a : train)
    for (const auto& b : test) EXPECT_NE(a, b);
}

TEST(SampleTasks, CoverageOfGoalDistribution) {
  const auto tasks = sample_tasks(Family::point_robot, 10000, 17);
  double mx = 0, my = 0, lo0 = 1, hi0 = -1, lo1 = 1, hi1 = -1;
  for (const auto& t : tasks) {
    mx += t.goal[0];
    my += t.goal[1];
    lo0 = std::min(lo0, t.goal[0]);
    hi0 = std::max(hi0, t.goal[0]);
    lo1 = std::min(lo1, t.goal[1]);
    hi1 = std::max(hi1, t.goal[1]);
  }
  EXPECT_LT(std::abs(mx / 10000), 0.05);
  EXPECT_LT(std::abs(my / 10000), 0.05);
  EXPECT_LT(std::abs(lo0 + 1), 0.01);
  EXPECT_LT(std::abs(hi0 - 1), 0.01);
  EXPECT_LT(std::abs(lo1 + 1), 0.01);
  EXPECT_LT(std::abs(hi1 - 1), 0.01);
}

TEST(SampleTasks, ParamMultipliersInRange) {
  const double lo = std::pow(1.5, -3.0), hi = std::pow(1.5, 3.0);
  for (const auto& t : sample_tasks(Family::point_mass_params, 1000, 2)) {
    EXPECT_GE(t.damping_mult, lo);
    EXPECT_LE(t.damping_mult, hi);
    EXPECT_GE(t.mass_mult, lo);
    EXPECT_LE(t.mass_mult, hi);
  }
}

TEST(SampleTasks, RejectsBadInput) {
  EXPECT_THROW(sample_tasks(Family::point_robot, 0, 1), ConfigError);
  EXPECT_THROW(family_from_string("half_cheetah"), ConfigError);
  EXPECT_THROW(validate(robot(1.5, 0.0)), ConfigError);
  EXPECT_THROW(validate(mass(5.0, 1.0)), ConfigError);
}

TEST(EnvStep, PointRobotAtGoalStaysWithZeroReward) {
  const TaskSpec t = robot(0.3, -0.4);
  const auto r = env_step(t, env_config(t.family), vec({0.3, -0.4}), vec({0.0, 0.0}));
  EXPECT_EQ(r.next_state, vec({0.3, -0.4}));
  EXPECT_EQ(r.reward, 0.0);
}

TEST(EnvStep, PointRobotClipsActionAndScoresDistance) {
  const TaskSpec t = robot(1.0, 0.0);
  const auto r = env_step(t, env_config(t.family), vec({0.0, 0.0}), vec({5.0, -0.05}));
  EXPECT_DOUBLE_EQ(r.next_state[0], 0.1);
  EXPECT_DOUBLE_EQ(r.next_state[1], -0.05);
  EXPECT_DOUBLE_EQ(r.reward, -std::sqrt(0.9 * 0.9 + 0.05 * 0.05));
}

TEST(EnvStep, PointRobotRewardNonPositive) {
  nk::Rng rng(4);
  for (int i = 0; i < 1000; ++i) {
    const TaskSpec t = sample_task(Family::point_robot, rng);
    const Vector s = vec({rng.uniform(-2, 2), rng.uniform(-2, 2)});
    const Vector a = vec({rng.uniform(-1, 1), rng.uniform(-1, 1)});
    const auto r = env_step(t, env_config(t.family), s, a);
    EXPECT_LE(r.reward, 0.0);
  }
}

TEST(EnvStep, PointMassDefaultDynamics) {
  const TaskSpec t = mass(1.0, 1.0);
  const auto r = env_step(t, env_config(t.family), Vector::Zero(4), vec({1.0, 0.0}));
  EXPECT_DOUBLE_EQ(r.next_state[2], 0.1);
  EXPECT_DOUBLE_EQ(r.next_state[3], 0.0);
  EXPECT_DOUBLE_EQ(r.reward, 0.1);
  EXPECT_DOUBLE_EQ(r.next_state[0], 0.01);
}

TEST(EnvStep, PointMassUsesMultipliers) {
  const TaskSpec t = mass(2.0, 0.5);
  const auto r = env_step(t, env_config(t.family), vec({0, 0, 1.0, -1.0}), vec({0.5, 0.5}));
  EXPECT_DOUBLE_EQ(r.next_state[2], 2.0 * 0.9 * 1.0 + (0.5 / 0.5) * 0.1);
  EXPECT_DOUBLE_EQ(r.next_state[3], 2.0 * 0.9 * -1.0 + (0.5 / 0.5) * 0.1);
  EXPECT_DOUBLE_EQ(r.reward, r.next_state[2]);
}

TEST(EnvStep, ExponentZeroReproducesDefaultTrajectory) {
  const TaskSpec a = mass(std::pow(1.5, 0.0), std::pow(1.5, 0.0));
  const TaskSpec b = mass(1.0, 1.0);
  const EnvConfig cfg = env_config(Family::point_mass_params);
  Vector sa = Vector::Zero(4), sb = Vector::Zero(4);
  for (int t = 0; t < 50; ++t) {
    const Vector act = vec({std::sin(t * 0.3), std::cos(t * 0.7)});
    const auto ra = env_step(a, cfg, sa, act);
    const auto rb = env_step(b, cfg, sb, act);
    ASSERT_EQ(ra.next_state, rb.next_state);
    ASSERT_EQ(ra.reward, rb.reward);
    sa = ra.next_state;
    sb = rb.next_state;
  }
}

TEST(EnvStep, SafetyBoxBoundsState) {
  const TaskSpec t = mass(std::pow(1.5, 3.0), std::pow(1.5, -3.0));
  const EnvConfig cfg = env_config(t.family);
  Vector s = Vector::Zero(4);
  for (int k = 0; k < 500; ++k) s = env_step(t, cfg, s, vec({1.0, 1.0})).next_state;
  EXPECT_LE(s.cwiseAbs().maxCoeff(), kSafetyBox);
  EXPECT_TRUE(s.allFinite());
}

TEST(EnvStep, RejectsNonFiniteInput) {
  const TaskSpec t = robot(0, 0);
  EXPECT_THROW(env_step(t, env_config(t.family), vec({NAN, 0.0}), vec({0, 0})), std::domain_error);
  EXPECT_THROW(env_step(t, env_config(t.family), vec({0, 0}), vec({INFINITY, 0})), std::domain_error);
  EXPECT_THROW(env_step(t, env_config(t.family), vec({0, 0, 0}), vec({0, 0})), ConfigError);
}

TEST(EnvStep, DeterministicAndTrueModelAgrees) {
  nk::Rng rng(10);
  for (Family f : {Family::point_robot, Family::point_mass_params}) {
    const EnvConfig cfg = env_config(f);
    for (int i = 0; i < 1000; ++i) {
      const TaskSpec t = sample_task(f, rng);
      Vector s(state_dim(f));
      for (Index j = 0; j < s.size(); ++j) s[j] = rng.uniform(-3, 3);
      const Vector a = vec({rng.uniform(-2, 2), rng.uniform(-2, 2)});
      const auto r1 = env_step(t, cfg, s, a);
      const auto r2 = env_step(t, cfg, s, a);
      ASSERT_EQ(r1.next_state, r2.next_state);
      ASSERT_EQ(r1.reward, r2.reward);
      const Vector y = true_model(t, cfg, s, a);
      ASSERT_EQ(y.size(), label_dim(f));
      ASSERT_EQ(y[y.size() - 1], r1.reward);
      if (!cfg.reward_only) ASSERT_EQ(y.head(4), r1.next_state);
      ASSERT_EQ(true_model(t, cfg, s, a), y);
    }
  }
}

TEST(EnvStep, SharedDynamicsOnlyForRewardOnlyFamily) {
  const EnvConfig pr = env_config(Family::point_robot);
  EXPECT_EQ(shared_next_state(Family::point_robot, pr, vec({0.5, 0.5}), vec({0.2, -0.2})), vec({0.6, 0.4}));
  EXPECT_THROW(shared_next_state(Family::point_mass_params, env_config(Family::point_mass_params), Vector::Zero(4),
                                 vec({0, 0})),
               ConfigError);
}

TEST(EnvConfigTest, FamilyDefaults) {
  const EnvConfig pr = env_config(Family::point_robot);
  EXPECT_EQ(pr.horizon, 20);
  EXPECT_EQ(pr.action_bound, 0.1);
  EXPECT_EQ(pr.dt, 1.0);
  EXPECT_TRUE(pr.reward_only);
  EXPECT_EQ(label_dim(Family::point_robot), 1);
  const EnvConfig pm = env_config(Family::point_mass_params);
  EXPECT_EQ(pm.horizon, 50);
  EXPECT_EQ(pm.action_bound, 1.0);
  EXPECT_EQ(pm.dt, 0.1);
  EXPECT_FALSE(pm.reward_only);
  EXPECT_EQ(label_dim(Family::point_mass_params), 5);
}

TEST(TaskJson, RoundTrip) {
  for (const TaskSpec& t : {robot(0.25, -0.75), mass(1.5, 0.5)}) {
    const auto j = to_json(t);
    EXPECT_EQ(j.at("family").get<std::string>(), to_string(t.family));
    EXPECT_TRUE(j.contains("params"));
    EXPECT_EQ(task_from_json(j), t);
  }
  EXPECT_THROW(task_from_json(nlohmann::json{{"family", "point_robot"}}), ConfigError);
}
