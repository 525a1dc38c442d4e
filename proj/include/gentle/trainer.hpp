#pragma once

#include <nlohmann/json.hpp>

#include <cstdint>
#include <functional>
#include <set>
#include <string>
#include <vector>

#include "gentle/datagen.hpp"
#include "gentle/dynmodel.hpp"
#include "gentle/env.hpp"
#include "gentle/errors.hpp"
#include "gentle/evalkit.hpp"
#include "gentle/offpolicy.hpp"
#include "gentle/relabel.hpp"
#include "gentle/tae.hpp"

namespace gentle {

enum class Variant { gentle, contrastive, no_relabel, no_policy_relabel };

inline std::string to_string(Variant v) {
  switch (v) {
    case Variant::gentle: return "gentle";
    case Variant::contrastive: return "contrastive";
    case Variant::no_relabel: return "no_relabel";
    case Variant::no_policy_relabel: return "no_policy_relabel";
  }
  return "?";
}

inline Variant variant_from_string(const std::string& s) {
  for (Variant v : {Variant::gentle, Variant::contrastive, Variant::no_relabel, Variant::no_policy_relabel})
    if (to_string(v) == s) return v;
  throw ConfigError("unknown variant '" + s + "'");
}

struct TrainConfig {
  Family family = Family::point_robot;
  Variant variant = Variant::gentle;
  std::uint64_t seed = 0;
  int epochs = 50;
  int steps_per_epoch = 200;

  Index context_size = 256;
  Index rl_batch = 256;
  int k_ego = 64;
  int k_other = 192;
  bool oracle_model = false;

  Index latent_dim = 5;
  Index tae_width = 64;
  int tae_hidden_layers = 3;
  double tae_lr = 3e-4;
  double tae_weight = 10.0;
  int contrastive_contexts = 2;  // contexts per task for the contrastive objective

  Index rl_width = 64;
  int rl_depth = 4;
  double actor_lr = 3e-4;
  double critic_lr = 3e-4;
  double gamma = 0.9;
  double alpha = 2.5;
  double tau = 0.005;
  double policy_noise = 0.2;
  double noise_clip = 0.5;
  int policy_delay = 2;

  int eval_every = 1;
  int probe_tasks = 3;
  int eval_episodes = 3;
  int diag_resamples = 5;

  void validate() const {
    auto positive = [](long v, const char* name) {
      if (v < 1) throw ConfigError(std::string(name) + " must be >= 1");
    };
    positive(epochs, "epochs");
    positive(steps_per_epoch, "steps_per_epoch");
    positive(context_size, "context_size");
    positive(rl_batch, "rl_batch");
    positive(latent_dim, "latent_dim");
    positive(tae_width, "tae_width");
    positive(rl_width, "rl_width");
    positive(rl_depth, "rl_depth");
    positive(policy_delay, "policy_delay");
    positive(eval_every, "eval_every");
    positive(eval_episodes, "eval_episodes");
    positive(diag_resamples, "diag_resamples");
    if (probe_tasks < 0) throw ConfigError("probe_tasks must be >= 0");
    if (tae_hidden_layers < 0) throw ConfigError("tae_hidden_layers must be >= 0");
    if (contrastive_contexts < 2) throw ConfigError("contrastive_contexts must be >= 2");
    if (k_ego < 0 || k_other < 0 || k_ego + k_other < 1) throw ConfigError("k_ego, k_other >= 0 with k_ego + k_other >= 1");
    if (!(gamma >= 0.0 && gamma <= 1.0)) throw ConfigError("gamma must lie in [0, 1]");
    if (!(tau > 0.0 && tau <= 1.0)) throw ConfigError("tau must lie in (0, 1]");
    if (!(tae_lr > 0 && actor_lr > 0 && critic_lr > 0)) throw ConfigError("learning rates must be positive");
    if (!(tae_weight > 0)) throw ConfigError("tae_weight must be positive");
    if (alpha < 0) throw ConfigError("alpha must be non-negative");
    if (oracle_model && variant == Variant::no_relabel) throw ConfigError("oracle_model has no effect with no_relabel");
  }

  [[nodiscard]] Td3BcConfig td3() const {
    Td3BcConfig c;
    c.gamma = gamma;
    c.tau = tau;
    c.policy_noise = policy_noise;
    c.noise_clip = noise_clip;
    c.policy_delay = policy_delay;
    c.alpha = alpha;
    c.actor_lr = actor_lr;
    c.critic_lr = critic_lr;
    c.width = rl_width;
    c.depth = rl_depth;
    return c;
  }

  [[nodiscard]] AugmentConfig augment_config() const {
    return {k_ego, k_other, variant == Variant::no_policy_relabel, oracle_model};
  }

  [[nodiscard]] TaeConfig tae_config() const { return {latent_dim, tae_width, tae_hidden_layers}; }
};

/// Family-dependent defaults.
inline TrainConfig default_train_config(Family f) {
  TrainConfig c;
  c.family = f;
  if (f == Family::point_mass_params) c.gamma = 0.99;
  return c;
}

inline nlohmann::json to_json(const TrainConfig& c) {
  return {{"family", to_string(c.family)},
          {"variant", to_string(c.variant)},
          {"seed", c.seed},
          {"epochs", c.epochs},
          {"steps_per_epoch", c.steps_per_epoch},
          {"context_size", c.context_size},
          {"rl_batch", c.rl_batch},
          {"k_ego", c.k_ego},
          {"k_other", c.k_other},
          {"oracle_model", c.oracle_model},
          {"latent_dim", c.latent_dim},
          {"tae_width", c.tae_width},
          {"tae_hidden_layers", c.tae_hidden_layers},
          {"tae_lr", c.tae_lr},
          {"tae_weight", c.tae_weight},
          {"contrastive_contexts", c.contrastive_contexts},
          {"rl_width", c.rl_width},
          {"rl_depth", c.rl_depth},
          {"actor_lr", c.actor_lr},
          {"critic_lr", c.critic_lr},
          {"gamma", c.gamma},
          {"alpha", c.alpha},
          {"tau", c.tau},
          {"policy_noise", c.policy_noise},
          {"noise_clip", c.noise_clip},
          {"policy_delay", c.policy_delay},
          {"eval_every", c.eval_every},
          {"probe_tasks", c.probe_tasks},
          {"eval_episodes", c.eval_episodes},
          {"diag_resamples", c.diag_resamples}};
}

/// Parses a flat config document. Family, variant, seed, epochs and
/// steps_per_epoch are required; unknown keys are rejected.
inline TrainConfig train_config_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ConfigError("config must be a JSON object");
  for (const char* key : {"family", "variant", "seed", "epochs", "steps_per_epoch"})
    if (!j.contains(key)) throw ConfigError(std::string("missing required config key '") + key + "'");
  TrainConfig c = default_train_config(family_from_string(j.at("family").get<std::string>()));
  const nlohmann::json known = to_json(c);
  for (const auto& [key, _] : j.items())
    if (!known.contains(key)) throw ConfigError("unknown config key '" + key + "'");
  auto get = [&](const char* key, auto& field) {
    if (!j.contains(key)) return;
    try {
      j.at(key).get_to(field);
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError(std::string("bad value for config key '") + key + "': " + e.what());
    }
  };
  c.variant = variant_from_string(j.at("variant").get<std::string>());
  get("seed", c.seed);
  get("epochs", c.epochs);
  get("steps_per_epoch", c.steps_per_epoch);
  get("context_size", c.context_size);
  get("rl_batch", c.rl_batch);
  get("k_ego", c.k_ego);
  get("k_other", c.k_other);
  get("oracle_model", c.oracle_model);
  get("latent_dim", c.latent_dim);
  get("tae_width", c.tae_width);
  get("tae_hidden_layers", c.tae_hidden_layers);
  get("tae_lr", c.tae_lr);
  get("tae_weight", c.tae_weight);
  get("contrastive_contexts", c.contrastive_contexts);
  get("rl_width", c.rl_width);
  get("rl_depth", c.rl_depth);
  get("actor_lr", c.actor_lr);
  get("critic_lr", c.critic_lr);
  get("gamma", c.gamma);
  get("alpha", c.alpha);
  get("tau", c.tau);
  get("policy_noise", c.policy_noise);
  get("noise_clip", c.noise_clip);
  get("policy_delay", c.policy_delay);
  get("eval_every", c.eval_every);
  get("probe_tasks", c.probe_tasks);
  get("eval_episodes", c.eval_episodes);
  get("diag_resamples", c.diag_resamples);
  c.validate();
  return c;
}

struct RunArtifacts {
  TaePair tae;
  ActorCritic ac;
  std::vector<MetricRow> metrics;
  std::vector<Vector> task_reps;
  std::vector<std::size_t> aug_sizes;  // total augmented transitions per epoch
  std::uint64_t tae_updates = 0;
  std::uint64_t rl_updates = 0;
};

/// Context of n pairs drawn uniformly (with replacement) from D_i ∪ D_i^aug.
inline ContextBatch sample_union_context(const TaskDataset& d, const AugBuffer& aug, Index n, nk::Rng& rng) {
  const std::size_t total = d.size() + aug.size();
  if (total == 0) throw ConfigError("cannot sample a context from an empty dataset");
  const Family f = d.spec.family;
  const Index ds = state_dim(f);
  const bool reward_only = env_config(f).reward_only;
  ContextBatch c;
  c.x.resize(n, ds + kActionDim);
  c.y.resize(n, label_dim(f));
  for (Index k = 0; k < n; ++k) {
    const std::size_t u = rng.below(total);
    const Vector *s, *a, *s_next;
    double r;
    if (u < d.size()) {
      const auto& t = d.transitions[u];
      s = &t.s, a = &t.a, s_next = &t.s_next, r = t.r;
    } else {
      const auto& t = aug[u - d.size()];
      s = &t.s, a = &t.a, s_next = &t.s_next, r = t.r;
    }
    c.x.row(k) << s->transpose(), a->transpose();
    if (reward_only)
      c.y(k, 0) = r;
    else
      c.y.row(k) << s_next->transpose(), r;
  }
  return c;
}

/// Detached per-task latents from fresh context batches.
inline std::vector<Vector> compute_task_reps(const TaePair& tae, const std::vector<TaskDataset>& datasets,
                                             const std::vector<AugBuffer>& aug, Index n, nk::Rng& rng) {
  std::vector<Vector> zs;
  zs.reserve(datasets.size());
  static const AugBuffer kEmpty;
  for (std::size_t i = 0; i < datasets.size(); ++i)
    zs.push_back(encode(tae, sample_union_context(datasets[i], aug.empty() ? kEmpty : aug[i], n, rng)));
  return zs;
}

inline RlBatch sample_rl_batch(const TaskDataset& d, Index b, const Vector& z, nk::Rng& rng) {
  const Index ds = state_dim(d.spec.family);
  RlBatch out;
  out.s.resize(b, ds);
  out.a.resize(b, kActionDim);
  out.r.resize(b);
  out.s_next.resize(b, ds);
  out.z = z;
  for (Index k = 0; k < b; ++k) {
    const auto& t = d.transitions[rng.below(d.size())];
    out.s.row(k) = t.s.transpose();
    out.a.row(k) = t.a.transpose();
    out.r[k] = t.r;
    out.s_next.row(k) = t.s_next.transpose();
  }
  return out;
}

/// Called after every epoch with (epoch index, artifacts so far).
using EpochHook = std::function<void(int, const RunArtifacts&)>;

/// Epoch loop: relabel, then per step one TAE update, fresh detached task
/// latents, and one TD3+BC update over all task batches.
inline RunArtifacts meta_train(const TrainConfig& cfg, const std::vector<TaskDataset>& datasets,
                               const std::vector<EnsembleModel>& models, const EpochHook& hook = {}) {
  cfg.validate();
  if (datasets.empty()) throw ConfigError("meta_train: no training datasets");
  for (const auto& d : datasets) {
    if (d.spec.family != cfg.family) throw ConfigError("meta_train: dataset family does not match the config");
    if (d.transitions.empty()) throw ConfigError("meta_train: empty dataset for task " + std::to_string(d.task_id));
  }
  const bool relabel = cfg.variant != Variant::no_relabel;
  if (relabel && !cfg.oracle_model && models.size() != datasets.size())
    throw MissingInputError("meta_train: one dynamics model per training task is required");
  if (cfg.variant == Variant::contrastive && datasets.size() < 2)
    throw ConfigError("contrastive variant needs at least 2 training tasks");

  const Family f = cfg.family;
  const EnvConfig env = env_config(f);
  const Index ds = state_dim(f);
  const std::size_t n_tasks = datasets.size();

  RunArtifacts run;
  {
    nk::Rng init_tae(cfg.seed, "init/tae");
    run.tae = make_tae(ds + kActionDim, label_dim(f), cfg.tae_config(), init_tae);
    nk::Rng init_rl(cfg.seed, "init/rl");
    run.ac = make_actor_critic(ds, cfg.latent_dim, kActionDim, env.action_bound, cfg.td3(), init_rl);
  }
  TaeOptimizer tae_opt(run.tae, cfg.tae_lr);
  nk::Rng tae_rng(cfg.seed, "tae");
  nk::Rng rep_rng(cfg.seed, "reps");
  nk::Rng rl_rng(cfg.seed, "rl");

  std::vector<Vector> zs(n_tasks, Vector::Zero(cfg.latent_dim));
  std::vector<AugBuffer> aug;
  const AugmentConfig aug_cfg = cfg.augment_config();
  auto policy = [&run](const Matrix& s, const Vector& z) { return policy_act(run.ac, s, z); };

  std::vector<TaskSpec> probes;
  for (std::size_t i = 0; i < std::min<std::size_t>(n_tasks, static_cast<std::size_t>(cfg.probe_tasks)); ++i)
    probes.push_back(datasets[i].spec);
  std::vector<TaskSpec> train_specs;
  for (const auto& d : datasets) train_specs.push_back(d.spec);

  long step = 0;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    if (relabel)
      aug = augment(datasets, models, policy, zs, aug_cfg, derive_seed(cfg.seed, "relabel/epoch", epoch));
    std::size_t aug_total = 0;
    for (const auto& b : aug) aug_total += b.size();
    run.aug_sizes.push_back(aug_total);
    static const AugBuffer kEmpty;
    auto aug_of = [&](std::size_t i) -> const AugBuffer& { return aug.empty() ? kEmpty : aug[i]; };

    double tae_loss_sum = 0.0;
    double critic_loss_sum = 0.0;
    double actor_loss_sum = 0.0;
    double lambda_sum = 0.0;
    int actor_steps = 0;

    for (int s = 0; s < cfg.steps_per_epoch; ++s) {
      auto g = TaeGrads::zeros_like(run.tae);
      double loss = 0.0;
      if (cfg.variant == Variant::contrastive) {
        std::vector<std::vector<ContextBatch>> per_task(n_tasks);
        for (std::size_t i = 0; i < n_tasks; ++i)
          for (int c = 0; c < cfg.contrastive_contexts; ++c)
            per_task[i].push_back(sample_union_context(datasets[i], aug_of(i), cfg.context_size, tae_rng));
        loss = contrastive_loss(run.tae, per_task, &g.feature, cfg.tae_weight);
      } else {
        const double scale = cfg.tae_weight / static_cast<double>(n_tasks);
        for (std::size_t i = 0; i < n_tasks; ++i) {
          const ContextBatch c = sample_union_context(datasets[i], aug_of(i), cfg.context_size, tae_rng);
          loss += tae_loss_grad(run.tae, c, g, scale) / static_cast<double>(n_tasks);
        }
      }
      tae_opt.step(run.tae, g);
      ++run.tae_updates;
      tae_loss_sum += loss;

      std::vector<Vector> step_zs = compute_task_reps(run.tae, datasets, aug, cfg.context_size, rep_rng);

      std::vector<RlBatch> batches;
      batches.reserve(n_tasks);
      for (std::size_t i = 0; i < n_tasks; ++i)
        batches.push_back(sample_rl_batch(datasets[i], cfg.rl_batch, step_zs[i], rl_rng));
      const RlStepStats st = rl_update(batches, run.ac, rl_rng);
      ++run.rl_updates;
      critic_loss_sum += st.critic_loss;
      if (st.actor_updated) {
        actor_loss_sum += st.actor_loss;
        lambda_sum += st.lambda;
        ++actor_steps;
      }
      zs = std::move(step_zs);
      ++step;
    }

    const auto S = static_cast<double>(cfg.steps_per_epoch);
    auto emit = [&](const std::string& split, const std::string& metric, double v) {
      run.metrics.push_back({epoch, step, split, metric, v});
    };
    emit("train", "tae_loss", tae_loss_sum / S);
    emit("train", "critic_loss", critic_loss_sum / S);
    if (actor_steps > 0) {
      emit("train", "actor_loss", actor_loss_sum / actor_steps);
      emit("train", "lambda", lambda_sum / actor_steps);
    }
    emit("train", "aug_size", static_cast<double>(aug_total));
    const bool last = epoch + 1 == cfg.epochs;
    if (((epoch + 1) % cfg.eval_every == 0 || last) && !probes.empty()) {
      const EvalReport rep = evaluate_tasks(run.ac, run.tae, probes, Protocol::one_shot, Split::train,
                                            cfg.eval_episodes, derive_seed(cfg.seed, "eval/epoch", epoch));
      emit("train", "return_oneshot", rep.aggregate_mean);
      if (n_tasks >= 2) {
        const RepDiagnostics d = one_shot_diagnostics(run.ac, run.tae, train_specs, cfg.diag_resamples,
                                                      derive_seed(cfg.seed, "diag/epoch", epoch));
        emit("train", "knn_accuracy", d.knn_accuracy);
      }
    }
    if (hook) hook(epoch, run);
  }
  run.task_reps = std::move(zs);
  return run;
}

}  // namespace gentle
