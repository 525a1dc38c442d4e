#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "gentle/datagen.hpp"
#include "gentle/dynmodel.hpp"
#include "gentle/env.hpp"
#include "gentle/errors.hpp"

namespace gentle {

struct AugmentConfig {
  int k_ego = 64;     // states drawn from the task's own dataset
  int k_other = 192;  // states drawn from the pooled donor datasets
  bool no_policy_relabel = false;
  bool oracle_model = false;

  void validate() const {
    if (k_ego < 0 || k_other < 0 || k_ego + k_other < 1) throw ConfigError("augment: need k_ego, k_other >= 0 and sum >= 1");
  }
};

/// Where an augmented state came from. Used by tests only.
struct Provenance {
  int source_task = 0;
  bool ego = true;
  std::size_t source_index = 0;
};

struct AugTransition {
  Vector s;
  Vector a;
  Vector s_next;
  double r = 0.0;
  Provenance provenance;
};

using AugBuffer = std::vector<AugTransition>;

/// Builds pseudo-transitions for every task: k_ego states from D_i and
/// k_other from the union of the other datasets (with replacement), actions
/// from `policy(states, z_i)` (or the stored actions), labels from task i's
/// model. Buffers are rebuilt from scratch on every call.
///
/// `policy` is any callable (const Matrix& states, const Vector& z) -> Matrix
/// of actions in environment units.
template <class Policy>
std::vector<AugBuffer> augment(const std::vector<TaskDataset>& datasets, const std::vector<EnsembleModel>& models,
                               Policy&& policy, const std::vector<Vector>& zs, const AugmentConfig& cfg,
                               std::uint64_t seed) {
  cfg.validate();
  const std::size_t n = datasets.size();
  if (n == 0) throw ConfigError("augment: no datasets");
  if (zs.size() != n) throw ConfigError("augment: need one latent per task");
  if (!cfg.oracle_model && models.size() != n) throw ConfigError("augment: need one model per task");
  if (cfg.k_other > 0 && n < 2) throw ConfigError("augment: donor pool is empty (k_other > 0 with a single task)");

  const Family family = datasets.front().spec.family;
  const EnvConfig env = env_config(family);
  const Index ds = state_dim(family);

  std::vector<std::size_t> offsets(n + 1, 0);
  for (std::size_t j = 0; j < n; ++j) {
    if (datasets[j].transitions.empty()) throw ConfigError("augment: empty dataset");
    offsets[j + 1] = offsets[j] + datasets[j].size();
  }

  std::vector<AugBuffer> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    nk::Rng rng(derive_seed(seed, "relabel", i));
    const auto k_total = static_cast<std::size_t>(cfg.k_ego + cfg.k_other);
    std::vector<Provenance> picks;
    picks.reserve(k_total);
    for (int k = 0; k < cfg.k_ego; ++k)
      picks.push_back({static_cast<int>(i), true, static_cast<std::size_t>(rng.below(datasets[i].size()))});
    const std::size_t donor_total = offsets[n] - datasets[i].size();
    for (int k = 0; k < cfg.k_other; ++k) {
      std::size_t u = rng.below(donor_total);
      // Skip over the ego block in the pooled index space.
      if (u >= offsets[i]) u += datasets[i].size();
      std::size_t j = 0;
      while (u >= offsets[j + 1]) ++j;
      picks.push_back({static_cast<int>(j), false, u - offsets[j]});
    }

    Matrix states(static_cast<Index>(k_total), ds);
    Matrix actions(static_cast<Index>(k_total), kActionDim);
    for (std::size_t k = 0; k < k_total; ++k) {
      const auto& t = datasets[static_cast<std::size_t>(picks[k].source_task)].transitions[picks[k].source_index];
      states.row(static_cast<Index>(k)) = t.s.transpose();
      actions.row(static_cast<Index>(k)) = t.a.transpose();
    }
    if (!cfg.no_policy_relabel) actions = policy(states, zs[i]);

    Matrix x(static_cast<Index>(k_total), ds + kActionDim);
    x << states, actions;
    const EnsembleModel oracle =
        cfg.oracle_model ? make_oracle_model(datasets[i].spec, datasets[i].task_id) : EnsembleModel{};
    const Matrix y = model_predict(cfg.oracle_model ? oracle : models[i], x);

    out[i].reserve(k_total);
    for (std::size_t k = 0; k < k_total; ++k) {
      const auto row = static_cast<Index>(k);
      AugTransition t;
      t.s = states.row(row).transpose();
      t.a = actions.row(row).transpose();
      if (env.reward_only) {
        t.s_next = shared_next_state(family, env, t.s, t.a);
        t.r = y(row, 0);
      } else {
        t.s_next = y.row(row).head(ds).transpose();
        t.r = y(row, ds);
      }
      t.provenance = picks[k];
      out[i].push_back(std::move(t));
    }
  }
  return out;
}

}  // namespace gentle
