#pragma once

#include <nlohmann/json.hpp>

#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <exception>
#include <filesystem>
#include <map>
#include <string>
#include <thread>
#include <vector>

#include "gentle/datagen.hpp"
#include "gentle/dynmodel.hpp"
#include "gentle/env.hpp"
#include "gentle/errors.hpp"
#include "gentle/evalkit.hpp"
#include "gentle/numkit/snapshot.hpp"
#include "gentle/offpolicy.hpp"
#include "gentle/tae.hpp"
#include "gentle/trainer.hpp"

namespace gentle {

namespace fs = std::filesystem;

inline constexpr int kRunManifestVersion = 1;

/// Worker cap from GENTLE_THREADS (default 1).
inline unsigned worker_threads() {
  if (const char* v = std::getenv("GENTLE_THREADS")) {
    char* end = nullptr;
    const long n = std::strtol(v, &end, 10);
    if (end != v && *end == '\0' && n >= 1) return static_cast<unsigned>(n);
    throw ConfigError(std::string("GENTLE_THREADS must be a positive integer, got '") + v + "'");
  }
  return 1;
}

/// Runs job(i) for i in [0, n) on up to `threads` workers. Jobs must be
/// independent; results land wherever job writes them.
template <class Job>
void parallel_for(std::size_t n, unsigned threads, Job&& job) {
  if (threads <= 1 || n <= 1) {
    for (std::size_t i = 0; i < n; ++i) job(i);
    return;
  }
  std::vector<std::exception_ptr> errors(n);
  std::atomic<std::size_t> next{0};
  std::vector<std::thread> pool;
  for (unsigned t = 0; t < std::min<std::size_t>(threads, n); ++t)
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < n; i = next++) {
        try {
          job(i);
        } catch (...) {
          errors[i] = std::current_exception();
        }
      }
    });
  for (auto& th : pool) th.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

inline std::uint64_t config_hash(const nlohmann::json& config) {
  return nk::hash_name(config.dump());
}

inline std::string hex64(std::uint64_t v) {
  char buf[20];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

struct RunManifest {
  std::string subcommand;
  nlohmann::json config = nlohmann::json::object();
  std::uint64_t seed = 0;
  std::vector<std::string> artifacts;  // relative to the output directory
  double wall_clock_seconds = 0.0;

  [[nodiscard]] nlohmann::json to_json() const {
    return {{"schema_version", kRunManifestVersion},
            {"subcommand", subcommand},
            {"config", config},
            {"config_hash", hex64(config_hash(config))},
            {"seed", seed},
            {"artifacts", artifacts},
            {"wall_clock_seconds", wall_clock_seconds}};
  }
};

class Stopwatch {
 public:
  [[nodiscard]] double seconds() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
  }

 private:
  std::chrono::steady_clock::time_point start_ = std::chrono::steady_clock::now();
};

// ---------------------------------------------------------------------------
// pretrain

/// Trains one ensemble per training task into <out>/task_XXX.
inline std::vector<EnsembleModel> pretrain_models(const DataDir& data, const ModelTrainConfig& cfg, std::uint64_t seed,
                                                  const fs::path& out, unsigned threads = 1) {
  std::vector<EnsembleModel> models(data.train.size());
  parallel_for(data.train.size(), threads, [&](std::size_t i) {
    models[i] = train_task_model(data.train[i], cfg, derive_seed(seed, "model", data.train[i].task_id));
  });
  fs::create_directories(out);
  for (const auto& m : models) save_model(m, out / model_dir_name(m.task_id));
  return models;
}

inline nlohmann::json to_json(const ModelTrainConfig& c) {
  return {{"holdout_fraction", c.holdout_fraction}, {"patience", c.patience}, {"learning_rate", c.learning_rate},
          {"batch_size", c.batch_size},             {"max_epochs", c.max_epochs}, {"width", c.width},
          {"depth", c.depth},                       {"members", c.members}};
}

inline std::vector<EnsembleModel> load_models(const fs::path& dir, const std::vector<TaskDataset>& datasets) {
  if (!fs::is_directory(dir)) throw MissingInputError("missing model directory: " + dir.string());
  std::vector<EnsembleModel> out;
  for (const auto& d : datasets) {
    const auto sub = dir / model_dir_name(d.task_id);
    if (!fs::exists(sub / "model.json")) throw MissingInputError("missing model for task " + std::to_string(d.task_id) + ": " + sub.string());
    auto m = load_model(sub);
    if (m.family != d.spec.family) throw ConfigError("model family does not match dataset for task " + std::to_string(d.task_id));
    out.push_back(std::move(m));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Snapshots: one .bin per network plus a JSON sidecar (<name>.json).

struct PolicyMeta {
  Family family = Family::point_robot;
  Index state_dim = 0;
  Index latent_dim = 0;
  Index action_dim = 0;
  double action_bound = 1.0;
  int epochs = 0;
  long steps = 0;
};

inline nlohmann::json to_json(const PolicyMeta& m) {
  return {{"family", to_string(m.family)}, {"state_dim", m.state_dim}, {"latent_dim", m.latent_dim},
          {"action_dim", m.action_dim},   {"action_bound", m.action_bound}, {"epochs", m.epochs},
          {"steps", m.steps}};
}

inline PolicyMeta policy_meta_from_json(const nlohmann::json& j) {
  try {
    return {family_from_string(j.at("family").get<std::string>()), j.at("state_dim").get<Index>(),
            j.at("latent_dim").get<Index>(), j.at("action_dim").get<Index>(), j.at("action_bound").get<double>(),
            j.at("epochs").get<int>(), j.at("steps").get<long>()};
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("malformed policy metadata: ") + e.what());
  }
}

inline fs::path sidecar(const fs::path& snapshot) {
  fs::path p = snapshot;
  return p.replace_extension(".json");
}

inline void save_policy(const ActorCritic& ac, const PolicyMeta& meta, const fs::path& dir) {
  fs::create_directories(dir);
  nk::save_snapshot(ac.actor, dir / "actor.bin");
  nk::save_snapshot(ac.q1, dir / "critic1.bin");
  nk::save_snapshot(ac.q2, dir / "critic2.bin");
  write_json_file(dir / "actor.json", to_json(meta));
}

/// Actor-only policy for evaluation; critics are left empty.
inline ActorCritic load_policy(const fs::path& actor_path, PolicyMeta* meta_out = nullptr) {
  const PolicyMeta meta = policy_meta_from_json(read_json_file(sidecar(actor_path)));
  ActorCritic ac;
  ac.actor = nk::load_snapshot(actor_path);
  ac.state_dim = meta.state_dim;
  ac.latent_dim = meta.latent_dim;
  ac.action_dim = meta.action_dim;
  ac.action_bound = meta.action_bound;
  if (ac.actor.in_dim() != meta.state_dim + meta.latent_dim || ac.actor.out_dim() != meta.action_dim)
    throw FormatError(actor_path.string() + ": actor shape does not match its metadata");
  if (meta_out != nullptr) *meta_out = meta;
  return ac;
}

inline void save_encoder(const TaePair& p, Family f, const fs::path& dir) {
  fs::create_directories(dir);
  nk::save_snapshot(p.feature, dir / "encoder.bin");
  nk::save_snapshot(p.decoder, dir / "decoder.bin");
  write_json_file(dir / "encoder.json", {{"family", to_string(f)},
                                         {"x_dim", p.x_dim},
                                         {"y_dim", p.y_dim},
                                         {"latent_dim", p.latent_dim}});
}

/// Loads encoder.bin and, when present next to it, decoder.bin.
inline TaePair load_encoder(const fs::path& encoder_path, Family* family = nullptr) {
  const auto j = read_json_file(sidecar(encoder_path));
  TaePair p;
  try {
    p.x_dim = j.at("x_dim").get<Index>();
    p.y_dim = j.at("y_dim").get<Index>();
    p.latent_dim = j.at("latent_dim").get<Index>();
    if (family != nullptr) *family = family_from_string(j.at("family").get<std::string>());
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("malformed encoder metadata: ") + e.what());
  }
  p.feature = nk::load_snapshot(encoder_path);
  const auto dec = encoder_path.parent_path() / "decoder.bin";
  if (fs::exists(dec)) p.decoder = nk::load_snapshot(dec);
  if (p.feature.in_dim() != p.x_dim + p.y_dim || p.feature.out_dim() != p.latent_dim)
    throw FormatError(encoder_path.string() + ": encoder shape does not match its metadata");
  return p;
}

// ---------------------------------------------------------------------------
// train / eval / diag

struct TrainOutputs {
  RunArtifacts run;
  std::vector<std::string> artifacts;
};

/// Representation rows for the train tasks and (when given) the test tasks.
inline std::vector<RepRow> representation_rows(const ActorCritic& ac, const TaePair& tae,
                                               const std::vector<TaskSpec>& train, const std::vector<TaskSpec>& test,
                                               int resamples, std::uint64_t seed) {
  std::vector<RepRow> rows;
  if (train.size() >= 2) {
    const auto d = one_shot_diagnostics(ac, tae, train, resamples, derive_seed(seed, "reps/train"));
    const auto r = rep_rows(d, Split::train);
    rows.insert(rows.end(), r.begin(), r.end());
  }
  if (test.size() >= 2) {
    const auto d = one_shot_diagnostics(ac, tae, test, resamples, derive_seed(seed, "reps/test"));
    const auto r = rep_rows(d, Split::test);
    rows.insert(rows.end(), r.begin(), r.end());
  }
  return rows;
}

/// Full training run into `out`: metrics.csv, reps.csv, policy/ and encoder/.
inline TrainOutputs run_training(const TrainConfig& cfg, const DataDir& data, const std::vector<EnsembleModel>& models,
                                 const fs::path& out) {
  fs::create_directories(out);
  TrainOutputs o;
  o.run = meta_train(cfg, data.train, models);
  export_metrics(o.run.metrics, out / "metrics.csv");
  std::vector<TaskSpec> train_specs;
  for (const auto& d : data.train) train_specs.push_back(d.spec);
  export_reps(representation_rows(o.run.ac, o.run.tae, train_specs, data.test_specs, cfg.diag_resamples, cfg.seed),
              out / "reps.csv");
  PolicyMeta meta{cfg.family, state_dim(cfg.family), cfg.latent_dim, kActionDim, env_config(cfg.family).action_bound,
                  cfg.epochs, static_cast<long>(cfg.epochs) * cfg.steps_per_epoch};
  save_policy(o.run.ac, meta, out / "policy");
  save_encoder(o.run.tae, cfg.family, out / "encoder");
  o.artifacts = {"metrics.csv",        "reps.csv",           "policy/actor.bin",    "policy/actor.json",
                 "policy/critic1.bin", "policy/critic2.bin", "encoder/encoder.bin", "encoder/decoder.bin",
                 "encoder/encoder.json"};
  return o;
}

inline Protocol protocol_from_string(const std::string& s) {
  if (s == "given" || s == "given_context") return Protocol::given_context;
  if (s == "oneshot" || s == "one_shot") return Protocol::one_shot;
  throw ConfigError("unknown protocol '" + s + "' (expected given or oneshot)");
}

struct EvalOptions {
  Protocol protocol = Protocol::one_shot;
  Split split = Split::test;
  int episodes = 10;
  int pool_trajectories = 100;
  std::uint64_t seed = 0;
};

/// Evaluates a saved policy/encoder on one task split; appends headline rows
/// to <out>/metrics.csv and writes the per-task report.
inline EvalReport run_evaluation(const fs::path& policy_path, const fs::path& encoder_path, const DataDir& data,
                                 const EvalOptions& opt, const fs::path& out, std::vector<std::string>* artifacts = nullptr) {
  PolicyMeta meta;
  const ActorCritic ac = load_policy(policy_path, &meta);
  Family enc_family{};
  const TaePair tae = load_encoder(encoder_path, &enc_family);
  if (meta.family != data.manifest.family || enc_family != data.manifest.family)
    throw ConfigError("policy, encoder and data families differ");
  if (tae.latent_dim != ac.latent_dim) throw ConfigError("encoder and policy latent dimensions differ");
  std::vector<TaskSpec> tasks;
  if (opt.split == Split::train)
    for (const auto& d : data.train) tasks.push_back(d.spec);
  else
    tasks = data.test_specs;
  if (tasks.empty()) throw MissingInputError("data directory lists no " + to_string(opt.split) + " tasks");

  EvalReport rep = evaluate_tasks(ac, tae, tasks, opt.protocol, opt.split, opt.episodes, opt.seed, opt.pool_trajectories);
  fs::create_directories(out);
  const std::string tag = to_string(opt.protocol) + "_" + to_string(opt.split);
  write_json_file(out / ("eval_" + tag + ".json"), to_json(rep));
  std::vector<MetricRow> rows;
  const std::string split = to_string(opt.split);
  rows.push_back({meta.epochs, meta.steps, split, "return_" + to_string(opt.protocol), rep.aggregate_mean});
  rows.push_back({meta.epochs, meta.steps, split, "return_" + to_string(opt.protocol) + "_std", rep.aggregate_std});
  export_metrics(rows, out / "metrics.csv", /*append=*/true);
  if (artifacts != nullptr) {
    artifacts->push_back("eval_" + tag + ".json");
    artifacts->push_back("metrics.csv");
  }
  return rep;
}

// ---------------------------------------------------------------------------
// ablate

struct SweepPoint {
  std::string label;
  TrainConfig config;
  Quality quality = Quality::expert;
  int n_tasks = 0;  // 0: all training tasks
};

inline constexpr int kRatioSweep[] = {0, 1, 3, 6, 9, 12, 15};
inline constexpr int kTaskCountSweep[] = {4, 6, 8, 10};

/// K1:K2 = 1:r at a fixed total of k_ego + k_other draws.
inline std::pair<int, int> ratio_counts(int r, int total) {
  const int ego = static_cast<int>(std::lround(static_cast<double>(total) / (1.0 + r)));
  return {ego, total - ego};
}

inline std::vector<SweepPoint> sweep_points(const std::string& sweep, const TrainConfig& base) {
  std::vector<SweepPoint> pts;
  if (sweep == "ratio") {
    const int total = base.k_ego + base.k_other;
    for (int r : kRatioSweep) {
      SweepPoint p{"1:" + std::to_string(r), base};
      std::tie(p.config.k_ego, p.config.k_other) = ratio_counts(r, total);
      pts.push_back(p);
    }
  } else if (sweep == "task-count") {
    for (int n : kTaskCountSweep) {
      SweepPoint p{"N" + std::to_string(n), base};
      p.n_tasks = n;
      pts.push_back(p);
    }
  } else if (sweep == "diversity") {
    for (Quality q : {Quality::expert, Quality::medium, Quality::mixed}) {
      SweepPoint p{to_string(q), base};
      p.quality = q;
      pts.push_back(p);
    }
  } else if (sweep == "variant") {
    for (Variant v : {Variant::gentle, Variant::contrastive, Variant::no_relabel, Variant::no_policy_relabel}) {
      SweepPoint p{to_string(v), base};
      p.config.variant = v;
      p.config.oracle_model = false;
      pts.push_back(p);
    }
  } else {
    throw ConfigError("unknown sweep '" + sweep + "' (expected ratio, task-count, diversity or variant)");
  }
  return pts;
}

struct AblateOptions {
  std::string sweep;
  int seeds = 1;
  int n_train = 10;
  int n_test = 10;
  int n_traj = 100;
  int episodes = 10;
  std::uint64_t seed = 0;
};

/// Runs every sweep point for `seeds` derived seeds. Data and models per
/// quality are generated once under <out>/shared; each point gets
/// <out>/<label>/seed_K. Returns the rows of <out>/summary.csv.
inline std::vector<MetricRow> run_ablation(const TrainConfig& base, const AblateOptions& opt, const fs::path& out,
                                           unsigned threads = 1) {
  if (opt.seeds < 1) throw ConfigError("ablate: --seeds must be >= 1");
  const auto points = sweep_points(opt.sweep, base);
  fs::create_directories(out);
  std::map<Quality, std::pair<DataDir, std::vector<EnsembleModel>>> shared;
  for (const auto& p : points) {
    if (shared.count(p.quality) != 0U) continue;
    const auto dir = generate_data(out / "shared" / "data", base.family, p.quality, opt.n_train, opt.n_test,
                                   opt.n_traj, derive_seed(opt.seed, "ablate/data"));
    DataDir data = load_data_dir(dir);
    auto models = pretrain_models(data, model_train_config(base.family), derive_seed(opt.seed, "ablate/models"),
                                  out / "shared" / "models" / to_string(p.quality), threads);
    shared.emplace(p.quality, std::make_pair(std::move(data), std::move(models)));
  }

  struct Job {
    std::size_t point;
    int seed_index;
  };
  std::vector<Job> jobs;
  for (std::size_t i = 0; i < points.size(); ++i)
    for (int s = 0; s < opt.seeds; ++s) jobs.push_back({i, s});
  std::vector<std::vector<MetricRow>> results(jobs.size());

  parallel_for(jobs.size(), threads, [&](std::size_t j) {
    const SweepPoint& p = points[jobs[j].point];
    const auto& [full_data, full_models] = shared.at(p.quality);
    DataDir data = full_data;
    std::vector<EnsembleModel> models = full_models;
    if (p.n_tasks > 0) {
      if (static_cast<std::size_t>(p.n_tasks) > data.train.size())
        throw ConfigError("ablate: sweep needs " + std::to_string(p.n_tasks) + " training tasks, data has " +
                          std::to_string(data.train.size()));
      data.train.resize(static_cast<std::size_t>(p.n_tasks));
      models.resize(static_cast<std::size_t>(p.n_tasks));
    }
    TrainConfig cfg = p.config;
    cfg.seed = derive_seed(opt.seed, "ablate/" + p.label, static_cast<std::uint64_t>(jobs[j].seed_index));
    cfg.validate();
    const auto dir = out / p.label / ("seed_" + std::to_string(jobs[j].seed_index));
    const auto trained = run_training(cfg, data, models, dir);
    for (Protocol proto : {Protocol::one_shot, Protocol::given_context}) {
      EvalOptions eo{proto, Split::test, opt.episodes, opt.n_traj, derive_seed(cfg.seed, "ablate/eval")};
      const EvalReport rep = run_evaluation(dir / "policy" / "actor.bin", dir / "encoder" / "encoder.bin", data, eo, dir);
      results[j].push_back({jobs[j].seed_index, 0, p.label, "return_" + to_string(proto), rep.aggregate_mean});
    }
  });

  std::vector<MetricRow> summary;
  for (auto& r : results) summary.insert(summary.end(), r.begin(), r.end());
  return summary;
}

/// summary.csv: sweep,label,seed,metric,value
inline void export_summary(const std::string& sweep, const std::vector<MetricRow>& rows, const fs::path& path) {
  FileLock lock(path);
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << "sweep,label,seed,metric,value\n";
  for (const auto& r : rows)
    out << sweep << ',' << r.split << ',' << r.epoch << ',' << r.metric << ',' << format_double(r.value) << '\n';
}

}  // namespace gentle
