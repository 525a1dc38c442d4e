#pragma once

#include <nlohmann/json.hpp>

#include <array>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "gentle/env.hpp"
#include "gentle/errors.hpp"
#include "gentle/numkit/rng.hpp"

namespace gentle {

enum class Quality { expert, medium, mixed };

inline std::string to_string(Quality q) {
  switch (q) {
    case Quality::expert: return "expert";
    case Quality::medium: return "medium";
    case Quality::mixed: return "mixed";
  }
  return "?";
}

inline Quality quality_from_string(const std::string& s) {
  if (s == "expert") return Quality::expert;
  if (s == "medium") return Quality::medium;
  if (s == "mixed") return Quality::mixed;
  throw ConfigError("unknown data quality '" + s + "' (expected expert|medium|mixed)");
}

/// Seed for item `index` of a named sub-stream of `root`.
inline std::uint64_t derive_seed(std::uint64_t root, std::string_view name, std::uint64_t index = 0) {
  nk::Rng r(root, nk::hash_name(name) ^ (index * 0x9e3779b97f4a7c15ULL));
  return r.next_u64();
}

struct Transition {
  Vector s;
  Vector a;
  Vector s_next;
  double r = 0.0;
  int traj = 0;
  int step = 0;

  friend bool operator==(const Transition&, const Transition&) = default;
};

/// D_i. `spec` is metadata for oracle relabeling and evaluation; the encoder
/// only ever sees transitions.
struct TaskDataset {
  int task_id = 0;
  TaskSpec spec;
  Quality quality = Quality::expert;
  int horizon = 0;
  std::vector<Transition> transitions;

  [[nodiscard]] std::size_t size() const { return transitions.size(); }
  [[nodiscard]] int trajectory_count() const {
    return horizon > 0 ? static_cast<int>(transitions.size()) / horizon : 0;
  }
};

/// Noise-free action of the scripted expert.
inline Vector expert_action(const TaskSpec& t, const EnvConfig& cfg, const Vector& s) {
  if (t.family == Family::point_robot) {
    Vector d(2);
    d << t.goal[0] - s[0], t.goal[1] - s[1];
    return clip_action(d / cfg.dt, cfg.action_bound);
  }
  Vector a(2);
  a << cfg.action_bound, 0.0;
  return a;
}

inline constexpr std::array<double, 5> kMixedNoiseTiers = {0.0, 0.25, 0.5, 0.75, 1.0};

/// Scripted behaviour policy. Noise is fixed per trajectory: none for expert,
/// sigma = bound for medium, a uniformly drawn tier for mixed.
class ScriptedPolicy {
 public:
  ScriptedPolicy(TaskSpec spec, EnvConfig cfg, Quality q) : spec_(spec), cfg_(cfg), quality_(q) {}

  void begin_trajectory(nk::Rng& rng) {
    switch (quality_) {
      case Quality::expert: sigma_ = 0.0; break;
      case Quality::medium: sigma_ = cfg_.action_bound; break;
      case Quality::mixed: sigma_ = kMixedNoiseTiers[rng.below(kMixedNoiseTiers.size())] * cfg_.action_bound; break;
    }
  }

  /// Sets an explicit noise level (in absolute action units) for this trajectory.
  void set_noise(double sigma) { sigma_ = sigma; }
  [[nodiscard]] double noise() const { return sigma_; }

  Vector act(const Vector& s, nk::Rng& rng) const {
    Vector a = expert_action(spec_, cfg_, s);
    if (sigma_ > 0.0)
      for (Index i = 0; i < a.size(); ++i) a[i] += rng.normal(0.0, sigma_);
    return clip_action(a, cfg_.action_bound);
  }

 private:
  TaskSpec spec_;
  EnvConfig cfg_;
  Quality quality_;
  double sigma_ = 0.0;
};

inline Vector random_action(const EnvConfig& cfg, nk::Rng& rng) {
  Vector a(kActionDim);
  for (Index i = 0; i < a.size(); ++i) a[i] = rng.uniform(-cfg.action_bound, cfg.action_bound);
  return a;
}

/// Rolls out one episode of `act(s)` and returns its undiscounted return.
template <class Act>
double rollout_return(const TaskSpec& t, const EnvConfig& cfg, Vector s, Act&& act) {
  double ret = 0.0;
  for (int step = 0; step < cfg.horizon; ++step) {
    const StepResult r = env_step(t, cfg, s, act(s));
    ret += r.reward;
    s = r.next_state;
  }
  return ret;
}

inline TaskDataset collect_dataset(const TaskSpec& t, const EnvConfig& cfg, Quality q, int n_traj, std::uint64_t seed,
                                   int task_id = 0) {
  if (n_traj < 1) throw ConfigError("collect_dataset: n_traj must be >= 1");
  nk::Rng rng(seed, "collect");
  TaskDataset d;
  d.task_id = task_id;
  d.spec = t;
  d.quality = q;
  d.horizon = cfg.horizon;
  d.transitions.reserve(static_cast<std::size_t>(n_traj) * static_cast<std::size_t>(cfg.horizon));
  ScriptedPolicy policy(t, cfg, q);
  for (int traj = 0; traj < n_traj; ++traj) {
    policy.begin_trajectory(rng);
    Vector s = initial_state(t, rng);
    for (int step = 0; step < cfg.horizon; ++step) {
      Vector a = policy.act(s, rng);
      StepResult r = env_step(t, cfg, s, a);
      d.transitions.push_back(Transition{s, a, r.next_state, r.reward, traj, step});
      s = std::move(r.next_state);
    }
  }
  return d;
}

// ---------------------------------------------------------------------------
// On-disk format: <dir>/manifest.json plus task_XXX.csv per training task.

inline constexpr int kDatasetSchemaVersion = 1;

struct ManifestEntry {
  int task_id = 0;
  Split split = Split::train;
  TaskSpec spec;
  std::string file;  // empty for test tasks
};

struct DatasetManifest {
  int schema_version = kDatasetSchemaVersion;
  Family family = Family::point_robot;
  Quality quality = Quality::expert;
  std::uint64_t seed = 0;
  int n_traj = 0;
  int horizon = 0;
  std::vector<ManifestEntry> tasks;

  [[nodiscard]] std::vector<TaskSpec> specs(Split s) const {
    std::vector<TaskSpec> out;
    for (const auto& e : tasks)
      if (e.split == s) out.push_back(e.spec);
    return out;
  }
};

inline nlohmann::json to_json(const DatasetManifest& m) {
  nlohmann::json tasks = nlohmann::json::array();
  for (const auto& e : m.tasks) {
    nlohmann::json j{{"task_id", e.task_id}, {"split", to_string(e.split)}, {"spec", to_json(e.spec)}};
    if (!e.file.empty()) j["file"] = e.file;
    tasks.push_back(j);
  }
  return {{"schema_version", m.schema_version},
          {"family", to_string(m.family)},
          {"quality", to_string(m.quality)},
          {"seed", m.seed},
          {"n_traj", m.n_traj},
          {"horizon", m.horizon},
          {"tasks", tasks}};
}

inline DatasetManifest manifest_from_json(const nlohmann::json& j) {
  DatasetManifest m;
  try {
    m.schema_version = j.at("schema_version").get<int>();
    if (m.schema_version != kDatasetSchemaVersion)
      throw FormatError("unsupported dataset schema version " + std::to_string(m.schema_version) + " (expected " +
                        std::to_string(kDatasetSchemaVersion) + ")");
    m.family = family_from_string(j.at("family").get<std::string>());
    m.quality = quality_from_string(j.at("quality").get<std::string>());
    m.seed = j.at("seed").get<std::uint64_t>();
    m.n_traj = j.at("n_traj").get<int>();
    m.horizon = j.at("horizon").get<int>();
    for (const auto& t : j.at("tasks")) {
      ManifestEntry e;
      e.task_id = t.at("task_id").get<int>();
      e.split = split_from_string(t.at("split").get<std::string>());
      e.spec = task_from_json(t.at("spec"));
      if (t.contains("file")) e.file = t.at("file").get<std::string>();
      m.tasks.push_back(std::move(e));
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("malformed dataset manifest: ") + e.what());
  }
  return m;
}

inline std::string format_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

inline std::string dataset_csv_header(Family f) {
  const Index ds = state_dim(f);
  std::string h = "traj,step";
  for (Index i = 0; i < ds; ++i) h += ",s" + std::to_string(i);
  for (Index i = 0; i < kActionDim; ++i) h += ",a" + std::to_string(i);
  for (Index i = 0; i < ds; ++i) h += ",s_next" + std::to_string(i);
  h += ",r";
  return h;
}

inline void save_dataset(const TaskDataset& d, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << dataset_csv_header(d.spec.family) << '\n';
  for (const auto& t : d.transitions) {
    out << t.traj << ',' << t.step;
    for (Index i = 0; i < t.s.size(); ++i) out << ',' << format_double(t.s[i]);
    for (Index i = 0; i < t.a.size(); ++i) out << ',' << format_double(t.a[i]);
    for (Index i = 0; i < t.s_next.size(); ++i) out << ',' << format_double(t.s_next[i]);
    out << ',' << format_double(t.r) << '\n';
  }
  if (!out) throw std::runtime_error("write failed: " + path.string());
}

/// Reads one task CSV. `expected_rows` < 0 skips the row-count check.
inline TaskDataset load_dataset(const std::filesystem::path& path, const TaskSpec& spec, int task_id, Quality q,
                                int horizon, long expected_rows = -1) {
  std::ifstream in(path);
  if (!in) throw MissingInputError("missing dataset file: " + path.string());
  const Family f = spec.family;
  const Index ds = state_dim(f);
  std::string line;
  if (!std::getline(in, line) || line != dataset_csv_header(f))
    throw FormatError(path.string() + ": unexpected header (schema mismatch)");
  TaskDataset d;
  d.task_id = task_id;
  d.spec = spec;
  d.quality = q;
  d.horizon = horizon;
  const std::size_t ncol = static_cast<std::size_t>(2 + 2 * ds + kActionDim + 1);
  long row = 0;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    ++row;
    std::vector<std::string> cells;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    if (cells.size() != ncol)
      throw FormatError(path.string() + ": row " + std::to_string(row) + " has " + std::to_string(cells.size()) +
                        " columns, expected " + std::to_string(ncol));
    Transition t;
    std::size_t c = 0;
    try {
      t.traj = std::stoi(cells[c++]);
      t.step = std::stoi(cells[c++]);
      t.s.resize(ds);
      t.a.resize(kActionDim);
      t.s_next.resize(ds);
      for (Index i = 0; i < ds; ++i) t.s[i] = std::stod(cells[c++]);
      for (Index i = 0; i < kActionDim; ++i) t.a[i] = std::stod(cells[c++]);
      for (Index i = 0; i < ds; ++i) t.s_next[i] = std::stod(cells[c++]);
      t.r = std::stod(cells[c++]);
    } catch (const std::logic_error&) {
      throw FormatError(path.string() + ": unparsable value on row " + std::to_string(row));
    }
    d.transitions.push_back(std::move(t));
  }
  if (expected_rows >= 0 && row != expected_rows)
    throw FormatError(path.string() + ": row count " + std::to_string(row) + " does not match manifest (" +
                      std::to_string(expected_rows) + ")");
  return d;
}

/// Checks trajectory structure: complete trajectories, consecutive steps, and
/// s_{t+1} == s'_t exactly.
inline void check_trajectories(const TaskDataset& d) {
  if (d.horizon < 1 || d.transitions.size() % static_cast<std::size_t>(d.horizon) != 0)
    throw FormatError("dataset does not consist of complete trajectories");
  for (std::size_t i = 0; i < d.transitions.size(); ++i) {
    const auto& t = d.transitions[i];
    if (t.step != static_cast<int>(i % static_cast<std::size_t>(d.horizon)))
      throw FormatError("dataset step index out of order at row " + std::to_string(i));
    if (t.step > 0 && t.s != d.transitions[i - 1].s_next)
      throw FormatError("trajectory discontinuity at row " + std::to_string(i));
  }
}

struct DataDir {
  std::filesystem::path dir;
  DatasetManifest manifest;
  std::vector<TaskDataset> train;  // ordered by task_id
  std::vector<TaskSpec> test_specs;
};

inline std::string task_file_name(int task_id) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "task_%03d.csv", task_id);
  return buf;
}

inline void write_json_file(const std::filesystem::path& path, const nlohmann::json& j) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << j.dump(2) << '\n';
}

inline nlohmann::json read_json_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw MissingInputError("missing file: " + path.string());
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(path.string() + ": malformed JSON: " + e.what());
  }
}

/// Samples tasks, collects one dataset per training task, and writes
/// <out>/<family>/<quality>/. Returns the dataset directory.
inline std::filesystem::path generate_data(const std::filesystem::path& root, Family f, Quality q, int n_train,
                                           int n_test, int n_traj, std::uint64_t seed) {
  if (n_train < 1 || n_test < 0) throw ConfigError("gen-data: need n_train >= 1 and n_test >= 0");
  const EnvConfig cfg = env_config(f);
  const auto dir = root / to_string(f) / to_string(q);
  std::filesystem::create_directories(dir);
  DatasetManifest m;
  m.family = f;
  m.quality = q;
  m.seed = seed;
  m.n_traj = n_traj;
  m.horizon = cfg.horizon;
  const auto train = sample_tasks(f, n_train, seed, Split::train);
  for (int i = 0; i < n_train; ++i) {
    const auto d = collect_dataset(train[static_cast<std::size_t>(i)], cfg, q, n_traj, derive_seed(seed, "data", i), i);
    const auto file = task_file_name(i);
    save_dataset(d, dir / file);
    m.tasks.push_back({i, Split::train, d.spec, file});
  }
  if (n_test > 0) {
    const auto test = sample_tasks(f, n_test, seed, Split::test);
    for (int i = 0; i < n_test; ++i) m.tasks.push_back({i, Split::test, test[static_cast<std::size_t>(i)], ""});
  }
  write_json_file(dir / "manifest.json", to_json(m));
  return dir;
}

inline DataDir load_data_dir(const std::filesystem::path& dir) {
  if (!std::filesystem::is_directory(dir)) throw MissingInputError("missing data directory: " + dir.string());
  DataDir out;
  out.dir = dir;
  out.manifest = manifest_from_json(read_json_file(dir / "manifest.json"));
  const long rows = static_cast<long>(out.manifest.n_traj) * out.manifest.horizon;
  for (const auto& e : out.manifest.tasks) {
    if (e.split == Split::train) {
      if (e.file.empty()) throw FormatError("manifest: training task " + std::to_string(e.task_id) + " has no file");
      auto d = load_dataset(dir / e.file, e.spec, e.task_id, out.manifest.quality, out.manifest.horizon, rows);
      check_trajectories(d);
      out.train.push_back(std::move(d));
    } else {
      out.test_specs.push_back(e.spec);
    }
  }
  if (out.train.empty()) throw FormatError("manifest lists no training tasks");
  return out;
}

}  // namespace gentle
