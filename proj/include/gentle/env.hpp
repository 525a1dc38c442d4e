#pragma once

#include <nlohmann/json.hpp>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "gentle/errors.hpp"
#include "gentle/numkit/mlp.hpp"
#include "gentle/numkit/rng.hpp"

namespace gentle {

using nk::Index;
using nk::Matrix;
using nk::Vector;

/// Task families. PointRobot varies the goal (reward only); PointMassParams
/// varies damping and mass (dynamics and reward).
enum class Family { point_robot, point_mass_params };

enum class Split { train, test };

inline std::string to_string(Family f) {
  return f == Family::point_robot ? "point_robot" : "point_mass_params";
}

inline Family family_from_string(const std::string& s) {
  if (s == "point_robot") return Family::point_robot;
  if (s == "point_mass_params") return Family::point_mass_params;
  throw ConfigError("unknown task family '" + s + "'");
}

inline std::string to_string(Split s) { return s == Split::train ? "train" : "test"; }

inline Split split_from_string(const std::string& s) {
  if (s == "train") return Split::train;
  if (s == "test") return Split::test;
  throw ConfigError("unknown split '" + s + "' (expected train|test)");
}

/// Position safety box half-width; velocities share the same bound.
inline constexpr double kSafetyBox = 10.0;
/// Multipliers are 1.5^mu with mu ~ U[-3, 3].
inline constexpr double kParamBase = 1.5;
inline constexpr double kParamExponent = 3.0;
/// Default velocity retention per step before the damping multiplier.
inline constexpr double kBaseRetention = 0.9;

/// Hidden parameters of one task.
struct TaskSpec {
  Family family = Family::point_robot;
  std::array<double, 2> goal{0.0, 0.0};
  double damping_mult = 1.0;
  double mass_mult = 1.0;

  friend bool operator==(const TaskSpec&, const TaskSpec&) = default;
};

struct EnvConfig {
  int horizon = 20;
  double action_bound = 0.1;
  double dt = 1.0;
  bool reward_only = true;  // only the reward function varies across tasks
};

inline EnvConfig env_config(Family f) {
  if (f == Family::point_robot) return EnvConfig{20, 0.1, 1.0, true};
  return EnvConfig{50, 1.0, 0.1, false};
}

inline Index state_dim(Family f) { return f == Family::point_robot ? 2 : 4; }
inline constexpr Index kActionDim = 2;

/// Label y is (s', r), or r alone when only rewards vary.
inline Index label_dim(Family f) { return env_config(f).reward_only ? 1 : state_dim(f) + 1; }

inline void validate(const TaskSpec& t) {
  if (t.family == Family::point_robot) {
    for (double g : t.goal)
      if (!(g >= -1.0 && g <= 1.0)) throw ConfigError("point_robot goal outside [-1,1]^2");
  } else {
    const double lo = std::pow(kParamBase, -kParamExponent) * (1 - 1e-12);
    const double hi = std::pow(kParamBase, kParamExponent) * (1 + 1e-12);
    for (double m : {t.damping_mult, t.mass_mult})
      if (!(m >= lo && m <= hi)) throw ConfigError("point_mass_params multiplier outside [1.5^-3, 1.5^3]");
  }
}

inline TaskSpec sample_task(Family f, nk::Rng& rng) {
  TaskSpec t;
  t.family = f;
  if (f == Family::point_robot) {
    t.goal = {rng.uniform(-1.0, 1.0), rng.uniform(-1.0, 1.0)};
  } else {
    t.damping_mult = std::pow(kParamBase, rng.uniform(-kParamExponent, kParamExponent));
    t.mass_mult = std::pow(kParamBase, rng.uniform(-kParamExponent, kParamExponent));
  }
  return t;
}

/// i.i.d. tasks; train and test splits come from disjoint streams of `seed`.
inline std::vector<TaskSpec> sample_tasks(Family f, int count, std::uint64_t seed, Split split = Split::train) {
  if (count < 1) throw ConfigError("sample_tasks: count must be >= 1");
  nk::Rng rng(seed, split == Split::train ? "tasks/train" : "tasks/test");
  std::vector<TaskSpec> out;
  out.reserve(static_cast<std::size_t>(count));
  for (int i = 0; i < count; ++i) out.push_back(sample_task(f, rng));
  return out;
}

inline Vector initial_state(const TaskSpec& t, nk::Rng& rng) {
  if (t.family == Family::point_robot) {
    Vector s(2);
    s << rng.uniform(-0.1, 0.1), rng.uniform(-0.1, 0.1);
    return s;
  }
  return Vector::Zero(4);
}

inline Vector clip_action(const Vector& a, double bound) { return a.cwiseMax(-bound).cwiseMin(bound); }

struct StepResult {
  Vector next_state;
  double reward = 0.0;
};

namespace detail {

inline void check_finite(const Vector& v, const char* what) {
  if (!v.allFinite()) throw std::domain_error(std::string("env_step: non-finite ") + what);
}

inline double clip_box(double x) { return std::clamp(x, -kSafetyBox, kSafetyBox); }

inline Vector point_robot_next(const EnvConfig& cfg, const Vector& s, const Vector& a_clipped) {
  Vector n(2);
  for (Index i = 0; i < 2; ++i) n[i] = clip_box(s[i] + a_clipped[i] * cfg.dt);
  return n;
}

}  // namespace detail

/// Deterministic transition. Actions are clipped to the action bound first.
inline StepResult env_step(const TaskSpec& t, const EnvConfig& cfg, const Vector& s, const Vector& a) {
  detail::check_finite(s, "state");
  detail::check_finite(a, "action");
  if (s.size() != state_dim(t.family) || a.size() != kActionDim)
    throw ConfigError("env_step: state/action dimension mismatch");
  const Vector ac = clip_action(a, cfg.action_bound);
  StepResult r;
  if (t.family == Family::point_robot) {
    r.next_state = detail::point_robot_next(cfg, s, ac);
    const double dx = r.next_state[0] - t.goal[0];
    const double dy = r.next_state[1] - t.goal[1];
    r.reward = -std::sqrt(dx * dx + dy * dy);
  } else {
    // state = (x, y, vx, vy)
    r.next_state.resize(4);
    for (Index i = 0; i < 2; ++i) {
      const double v = t.damping_mult * kBaseRetention * s[2 + i] + (ac[i] / t.mass_mult) * cfg.dt;
      r.next_state[2 + i] = detail::clip_box(v);
      r.next_state[i] = detail::clip_box(s[i] + r.next_state[2 + i] * cfg.dt);
    }
    r.reward = r.next_state[2];
  }
  return r;
}

/// Task-independent dynamics of a reward-only family.
inline Vector shared_next_state(Family f, const EnvConfig& cfg, const Vector& s, const Vector& a) {
  if (!cfg.reward_only) throw ConfigError("shared_next_state: dynamics vary across tasks in " + to_string(f));
  return detail::point_robot_next(cfg, s, clip_action(a, cfg.action_bound));
}

/// Exact label y for probing input x = (s, a).
inline Vector true_model(const TaskSpec& t, const EnvConfig& cfg, const Vector& s, const Vector& a) {
  const StepResult r = env_step(t, cfg, s, a);
  if (cfg.reward_only) return Vector::Constant(1, r.reward);
  Vector y(r.next_state.size() + 1);
  y << r.next_state, r.reward;
  return y;
}

inline nlohmann::json to_json(const TaskSpec& t) {
  nlohmann::json j;
  j["family"] = to_string(t.family);
  if (t.family == Family::point_robot)
    j["params"] = {{"goal", {t.goal[0], t.goal[1]}}};
  else
    j["params"] = {{"damping_mult", t.damping_mult}, {"mass_mult", t.mass_mult}};
  return j;
}

inline TaskSpec task_from_json(const nlohmann::json& j) {
  try {
    TaskSpec t;
    t.family = family_from_string(j.at("family").get<std::string>());
    const auto& p = j.at("params");
    if (t.family == Family::point_robot) {
      t.goal = {p.at("goal").at(0).get<double>(), p.at("goal").at(1).get<double>()};
    } else {
      t.damping_mult = p.at("damping_mult").get<double>();
      t.mass_mult = p.at("mass_mult").get<double>();
    }
    validate(t);
    return t;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("malformed task spec: ") + e.what());
  }
}

}  // namespace gentle
