#pragma once

#include <Eigen/Eigenvalues>

#include <algorithm>
#include <cerrno>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "gentle/datagen.hpp"
#include "gentle/env.hpp"
#include "gentle/offpolicy.hpp"
#include "gentle/tae.hpp"

namespace gentle {

inline constexpr Index kContextSize = 256;
inline constexpr int kKnnNeighbours = 5;

enum class Protocol { given_context, one_shot };

inline std::string to_string(Protocol p) { return p == Protocol::given_context ? "given_context" : "one_shot"; }

/// (s, a) rows and labels for a list of transitions.
template <class T>
ContextBatch make_context(const std::vector<T>& ts, Family f) {
  const Index ds = state_dim(f);
  const bool reward_only = env_config(f).reward_only;
  ContextBatch c;
  c.x.resize(static_cast<Index>(ts.size()), ds + kActionDim);
  c.y.resize(static_cast<Index>(ts.size()), label_dim(f));
  for (std::size_t i = 0; i < ts.size(); ++i) {
    const auto row = static_cast<Index>(i);
    c.x.row(row) << ts[i].s.transpose(), ts[i].a.transpose();
    if (reward_only)
      c.y(row, 0) = ts[i].r;
    else
      c.y.row(row) << ts[i].s_next.transpose(), ts[i].r;
  }
  return c;
}

/// Runs one episode with the deterministic actor under latent z. Transitions
/// are appended to `record` when non-null. Returns the undiscounted return.
inline double run_episode(const TaskSpec& spec, const ActorCritic& ac, const Vector& z, nk::Rng& rng,
                          std::vector<Transition>* record = nullptr) {
  const EnvConfig cfg = env_config(spec.family);
  Vector s = initial_state(spec, rng);
  double ret = 0.0;
  for (int step = 0; step < cfg.horizon; ++step) {
    const Vector a = policy_act(ac, s, z);
    StepResult r = env_step(spec, cfg, s, a);
    ret += r.reward;
    if (record != nullptr) record->push_back(Transition{s, clip_action(a, cfg.action_bound), r.next_state, r.reward, 0, step});
    s = std::move(r.next_state);
  }
  return ret;
}

struct EvalRow {
  int task_id = 0;
  double mean_return = 0.0;
  double std_return = 0.0;
  int episodes = 0;
  Vector latent;
  double adaptation_return = std::numeric_limits<double>::quiet_NaN();  // one-shot only
};

struct EvalReport {
  Protocol protocol = Protocol::one_shot;
  Split split = Split::test;
  std::vector<EvalRow> rows;
  double aggregate_mean = 0.0;
  double aggregate_std = 0.0;

  void finalize() {
    if (rows.empty()) return;
    double sum = 0.0;
    for (const auto& r : rows) sum += r.mean_return;
    aggregate_mean = sum / static_cast<double>(rows.size());
    double var = 0.0;
    for (const auto& r : rows) var += (r.mean_return - aggregate_mean) * (r.mean_return - aggregate_mean);
    aggregate_std = std::sqrt(var / static_cast<double>(rows.size()));
  }
};

inline std::pair<double, double> mean_std(const std::vector<double>& v) {
  if (v.empty()) return {0.0, 0.0};
  const double mean = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
  double var = 0.0;
  for (double x : v) var += (x - mean) * (x - mean);
  return {mean, std::sqrt(var / static_cast<double>(v.size()))};
}

inline EvalRow episodes_under(const TaskSpec& spec, const ActorCritic& ac, const Vector& z, int episodes,
                              nk::Rng& rng) {
  if (episodes < 1) throw ConfigError("evaluation needs at least one episode");
  std::vector<double> rets;
  for (int e = 0; e < episodes; ++e) rets.push_back(run_episode(spec, ac, z, rng));
  EvalRow row;
  std::tie(row.mean_return, row.std_return) = mean_std(rets);
  row.episodes = episodes;
  row.latent = z;
  return row;
}

/// Context of `n` transitions drawn from an expert pool; without replacement
/// when the pool is large enough.
inline ContextBatch sample_pool_context(const TaskDataset& pool, Index n, nk::Rng& rng) {
  std::vector<Transition> picked;
  if (static_cast<Index>(pool.size()) >= n) {
    std::vector<std::size_t> idx(pool.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    for (Index k = 0; k < n; ++k) {
      const std::size_t j = static_cast<std::size_t>(k) + rng.below(idx.size() - static_cast<std::size_t>(k));
      std::swap(idx[static_cast<std::size_t>(k)], idx[j]);
      picked.push_back(pool.transitions[idx[static_cast<std::size_t>(k)]]);
    }
  } else {
    std::cerr << "warning: expert pool of " << pool.size() << " transitions is smaller than the context size " << n
              << "; sampling with replacement\n";
    for (Index k = 0; k < n; ++k) picked.push_back(pool.transitions[rng.below(pool.size())]);
  }
  return make_context(picked, pool.spec.family);
}

/// Given-context protocol: z from an expert-collected pool in the task.
inline EvalRow eval_given_context(const ActorCritic& ac, const TaePair& tae, const TaskSpec& spec,
                                  const TaskDataset& expert_pool, int episodes, std::uint64_t seed,
                                  Index context_size = kContextSize) {
  nk::Rng rng(seed, "eval/given");
  const Vector z = encode(tae, sample_pool_context(expert_pool, context_size, rng));
  return episodes_under(spec, ac, z, episodes, rng);
}

/// One adaptation episode under the zero prior; its transitions are the context.
inline std::vector<Transition> one_shot_context(const ActorCritic& ac, const TaskSpec& spec, nk::Rng& rng,
                                                double* adaptation_return = nullptr) {
  std::vector<Transition> ctx;
  const double ret = run_episode(spec, ac, Vector::Zero(ac.latent_dim), rng, &ctx);
  if (adaptation_return != nullptr) *adaptation_return = ret;
  return ctx;
}

/// One-shot protocol: adapt from a zero-prior rollout, then report the
/// returns of `episodes` post-adaptation episodes only.
inline EvalRow eval_one_shot(const ActorCritic& ac, const TaePair& tae, const TaskSpec& spec, int episodes,
                             std::uint64_t seed) {
  nk::Rng rng(seed, "eval/oneshot");
  double adapt_ret = 0.0;
  const auto ctx = one_shot_context(ac, spec, rng, &adapt_ret);
  const Vector z = encode(tae, make_context(ctx, spec.family));
  EvalRow row = episodes_under(spec, ac, z, episodes, rng);
  row.adaptation_return = adapt_ret;
  return row;
}

inline std::uint64_t task_eval_seed(std::uint64_t seed, Protocol p, int task_id) {
  return derive_seed(seed, p == Protocol::given_context ? "eval/given/task" : "eval/oneshot/task",
                     static_cast<std::uint64_t>(task_id));
}

/// Expert pool for the given-context protocol, drawn from an evaluation-only stream.
inline TaskDataset expert_pool(const TaskSpec& spec, int task_id, int n_traj, std::uint64_t seed) {
  return collect_dataset(spec, env_config(spec.family), Quality::expert, n_traj, derive_seed(seed, "eval/pool", task_id),
                         task_id);
}

inline EvalReport evaluate_tasks(const ActorCritic& ac, const TaePair& tae, const std::vector<TaskSpec>& tasks,
                                 Protocol protocol, Split split, int episodes, std::uint64_t seed,
                                 int pool_trajectories = 100) {
  EvalReport rep;
  rep.protocol = protocol;
  rep.split = split;
  for (std::size_t i = 0; i < tasks.size(); ++i) {
    const int id = static_cast<int>(i);
    const std::uint64_t ts = task_eval_seed(seed, protocol, id);
    EvalRow row = protocol == Protocol::one_shot
                      ? eval_one_shot(ac, tae, tasks[i], episodes, ts)
                      : eval_given_context(ac, tae, tasks[i], expert_pool(tasks[i], id, pool_trajectories, seed),
                                           episodes, ts);
    row.task_id = id;
    rep.rows.push_back(std::move(row));
  }
  rep.finalize();
  return rep;
}

enum class ReferencePolicy { expert, uniform_random };

/// Monte-Carlo mean return of a scripted reference policy on each task.
inline std::vector<double> reference_returns(const std::vector<TaskSpec>& tasks, ReferencePolicy which, int episodes,
                                             std::uint64_t seed) {
  std::vector<double> out;
  for (std::size_t i = 0; i < tasks.size(); ++i) {
    const EnvConfig cfg = env_config(tasks[i].family);
    nk::Rng rng(derive_seed(seed, which == ReferencePolicy::expert ? "ref/expert" : "ref/random", i));
    double sum = 0.0;
    for (int e = 0; e < episodes; ++e) {
      Vector s0 = initial_state(tasks[i], rng);
      if (which == ReferencePolicy::expert)
        sum += rollout_return(tasks[i], cfg, s0, [&](const Vector& s) { return expert_action(tasks[i], cfg, s); });
      else
        sum += rollout_return(tasks[i], cfg, s0, [&](const Vector&) { return random_action(cfg, rng); });
    }
    out.push_back(sum / static_cast<double>(episodes));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Representation diagnostics

/// Leave-one-out k-NN task identification. Distance ties go to the lower
/// point index, vote ties to the lower task id.
inline double knn_accuracy(const std::vector<Vector>& zs, const std::vector<int>& labels, int k = kKnnNeighbours) {
  const std::size_t n = zs.size();
  if (n != labels.size() || n < 2) throw ConfigError("knn_accuracy: need >= 2 labelled points");
  std::size_t correct = 0;
  std::vector<std::pair<double, std::size_t>> d;
  for (std::size_t i = 0; i < n; ++i) {
    d.clear();
    for (std::size_t j = 0; j < n; ++j)
      if (j != i) d.emplace_back((zs[i] - zs[j]).squaredNorm(), j);
    const std::size_t kk = std::min<std::size_t>(static_cast<std::size_t>(k), d.size());
    std::partial_sort(d.begin(), d.begin() + static_cast<std::ptrdiff_t>(kk), d.end());
    std::map<int, int> votes;
    for (std::size_t m = 0; m < kk; ++m) votes[labels[d[m].second]]++;
    int best_label = votes.begin()->first;
    int best_votes = -1;
    for (const auto& [label, v] : votes)
      if (v > best_votes) {
        best_votes = v;
        best_label = label;
      }
    if (best_label == labels[i]) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(n);
}

struct Projection {
  Matrix coords;  // n x 2
  bool degenerate = false;
};

/// Top-2 principal components of the latent cloud. A cloud with (near) zero
/// variance yields zeros and the degenerate flag.
inline Projection pca_2d(const std::vector<Vector>& zs) {
  Projection p;
  const auto n = static_cast<Index>(zs.size());
  p.coords = Matrix::Zero(n, 2);
  if (n == 0) {
    p.degenerate = true;
    return p;
  }
  const Index m = zs.front().size();
  Matrix x(n, m);
  for (Index i = 0; i < n; ++i) x.row(i) = zs[static_cast<std::size_t>(i)].transpose();
  const Eigen::RowVectorXd mean = x.colwise().mean();
  x.rowwise() -= mean;
  const Eigen::MatrixXd cov = (x.transpose() * x) / static_cast<double>(n);
  if (cov.trace() <= 1e-24) {
    p.degenerate = true;
    return p;
  }
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(cov);
  const Index cols = std::min<Index>(2, m);
  for (Index c = 0; c < cols; ++c) {
    Eigen::VectorXd v = es.eigenvectors().col(m - 1 - c);
    // Fix the sign so the largest-magnitude loading is positive.
    Index arg = 0;
    v.cwiseAbs().maxCoeff(&arg);
    if (v[arg] < 0) v = -v;
    p.coords.col(c) = x * v;
  }
  return p;
}

struct RepDiagnostics {
  double knn_accuracy = 0.0;
  std::vector<Vector> latents;
  std::vector<int> labels;
  Projection projection;
};

inline RepDiagnostics rep_diagnostics(std::vector<Vector> latents, std::vector<int> labels, int k = kKnnNeighbours) {
  std::vector<int> distinct(labels);
  std::sort(distinct.begin(), distinct.end());
  if (std::unique(distinct.begin(), distinct.end()) - distinct.begin() < 2)
    throw ConfigError("rep_diagnostics: needs at least 2 tasks");
  RepDiagnostics d;
  d.knn_accuracy = knn_accuracy(latents, labels, k);
  d.projection = pca_2d(latents);
  d.latents = std::move(latents);
  d.labels = std::move(labels);
  return d;
}

/// Diagnostics from one-shot contexts: `resamples` zero-prior rollouts per task.
inline RepDiagnostics one_shot_diagnostics(const ActorCritic& ac, const TaePair& tae,
                                           const std::vector<TaskSpec>& tasks, int resamples, std::uint64_t seed,
                                           int k = kKnnNeighbours) {
  std::vector<Vector> zs;
  std::vector<int> labels;
  for (std::size_t i = 0; i < tasks.size(); ++i) {
    nk::Rng rng(derive_seed(seed, "diag/oneshot", i));
    for (int r = 0; r < resamples; ++r) {
      const auto ctx = one_shot_context(ac, tasks[i], rng);
      zs.push_back(encode(tae, make_context(ctx, tasks[i].family)));
      labels.push_back(static_cast<int>(i));
    }
  }
  return rep_diagnostics(std::move(zs), std::move(labels), k);
}

/// Diagnostics from contexts of `n` transitions resampled from each dataset.
inline RepDiagnostics dataset_diagnostics(const TaePair& tae, const std::vector<TaskDataset>& datasets, int resamples,
                                          Index n, std::uint64_t seed, int k = kKnnNeighbours) {
  std::vector<Vector> zs;
  std::vector<int> labels;
  for (std::size_t i = 0; i < datasets.size(); ++i) {
    nk::Rng rng(derive_seed(seed, "diag/data", i));
    for (int r = 0; r < resamples; ++r) {
      std::vector<Transition> picked;
      for (Index j = 0; j < n; ++j) picked.push_back(datasets[i].transitions[rng.below(datasets[i].size())]);
      zs.push_back(encode(tae, make_context(picked, datasets[i].spec.family)));
      labels.push_back(static_cast<int>(i));
    }
  }
  return rep_diagnostics(std::move(zs), std::move(labels), k);
}

// ---------------------------------------------------------------------------
// CSV export

struct MetricRow {
  int epoch = 0;
  long step = 0;
  std::string split;
  std::string metric;
  double value = 0.0;

  friend bool operator==(const MetricRow&, const MetricRow&) = default;
};

inline const char* kMetricsHeader = "epoch,step,split,metric,value";

/// Exclusive lock file next to `path`; released on destruction.
class FileLock {
 public:
  explicit FileLock(std::filesystem::path target) : lock_(target.string() + ".lock") {
    std::FILE* f = std::fopen(lock_.string().c_str(), "wx");
    if (f == nullptr) {
      if (errno == EEXIST) throw std::runtime_error("another writer holds " + lock_.string());
      throw std::runtime_error("cannot create lock " + lock_.string());
    }
    std::fclose(f);
  }
  FileLock(const FileLock&) = delete;
  FileLock& operator=(const FileLock&) = delete;
  ~FileLock() {
    std::error_code ec;
    std::filesystem::remove(lock_, ec);
  }

 private:
  std::filesystem::path lock_;
};

/// Writes metrics rows. With `append`, rows go after the existing content
/// (the header is written only when the file is new).
inline void export_metrics(const std::vector<MetricRow>& rows, const std::filesystem::path& path, bool append = false) {
  FileLock lock(path);
  const bool fresh = !append || !std::filesystem::exists(path);
  std::ofstream out(path, append ? std::ios::app : std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  if (fresh) out << kMetricsHeader << '\n';
  for (const auto& r : rows)
    out << r.epoch << ',' << r.step << ',' << r.split << ',' << r.metric << ',' << format_double(r.value) << '\n';
  if (!out) throw std::runtime_error("write failed: " + path.string());
}

inline std::vector<MetricRow> read_metrics(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw MissingInputError("missing metrics file: " + path.string());
  std::string line;
  if (!std::getline(in, line) || line != kMetricsHeader) throw FormatError(path.string() + ": bad metrics header");
  std::vector<MetricRow> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string f[5];
    for (auto& c : f)
      if (!std::getline(ss, c, ',')) throw FormatError(path.string() + ": short metrics row");
    rows.push_back({std::stoi(f[0]), std::stol(f[1]), f[2], f[3], std::stod(f[4])});
  }
  return rows;
}

struct RepRow {
  int task_id = 0;
  std::string split;
  Vector z;
  double proj_x = 0.0;
  double proj_y = 0.0;
};

inline std::vector<RepRow> rep_rows(const RepDiagnostics& d, Split split) {
  std::vector<RepRow> rows;
  for (std::size_t i = 0; i < d.latents.size(); ++i)
    rows.push_back({d.labels[i], to_string(split), d.latents[i], d.projection.coords(static_cast<Index>(i), 0),
                    d.projection.coords(static_cast<Index>(i), 1)});
  return rows;
}

inline void export_reps(const std::vector<RepRow>& rows, const std::filesystem::path& path, bool append = false) {
  FileLock lock(path);
  const bool fresh = !append || !std::filesystem::exists(path);
  std::ofstream out(path, append ? std::ios::app : std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  if (fresh) {
    const Index m = rows.empty() ? 0 : rows.front().z.size();
    out << "task_id,split";
    for (Index j = 0; j < m; ++j) out << ",z" << (j + 1);
    out << ",proj_x,proj_y\n";
  }
  for (const auto& r : rows) {
    out << r.task_id << ',' << r.split;
    for (Index j = 0; j < r.z.size(); ++j) out << ',' << format_double(r.z[j]);
    out << ',' << format_double(r.proj_x) << ',' << format_double(r.proj_y) << '\n';
  }
  if (!out) throw std::runtime_error("write failed: " + path.string());
}

inline nlohmann::json to_json(const EvalReport& r) {
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& row : r.rows) {
    nlohmann::json j{{"task_id", row.task_id},
                     {"mean_return", row.mean_return},
                     {"std_return", row.std_return},
                     {"episodes", row.episodes},
                     {"latent", std::vector<double>(row.latent.data(), row.latent.data() + row.latent.size())}};
    if (!std::isnan(row.adaptation_return)) j["adaptation_return"] = row.adaptation_return;
    rows.push_back(j);
  }
  return {{"protocol", to_string(r.protocol)},
          {"split", to_string(r.split)},
          {"aggregate_mean", r.aggregate_mean},
          {"aggregate_std", r.aggregate_std},
          {"rows", rows}};
}

}  // namespace gentle
