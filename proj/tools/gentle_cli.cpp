#include <CLI11.hpp>

#include <iostream>
#include <string>
#include <vector>

#include "gentle/gentle.hpp"

namespace fs = std::filesystem;
using namespace gentle;

namespace {

enum ExitCode { kOk = 0, kRuntime = 1, kConfig = 2, kMissing = 3 };

void write_manifest(const fs::path& out, RunManifest m, const Stopwatch& clock) {
  m.wall_clock_seconds = clock.seconds();
  fs::create_directories(out);
  write_json_file(out / ("manifest_" + m.subcommand + ".json"), m.to_json());
}

nlohmann::json parse_override_value(const std::string& text) {
  try {
    return nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error&) {
    return text;  // bare strings such as variant names
  }
}

struct GenDataArgs {
  std::string family = "point_robot";
  std::string quality = "expert";
  int n_train = 10;
  int n_test = 10;
  int n_traj = 100;
  std::uint64_t seed = 0;
  std::string out = "data";
};

struct PretrainArgs {
  std::string data;
  std::string out = "models";
  std::uint64_t seed = 0;
  int members = 0;
  int patience = 0;
  int max_epochs = 0;
  double holdout = 0.0;
};

struct TrainArgs {
  std::string config;
  std::string data;
  std::string models;
  std::string out = "run";
  std::uint64_t seed = 0;
  std::vector<std::string> overrides;
};

struct EvalArgs {
  std::string policy;
  std::string encoder;
  std::string data;
  std::string protocol = "oneshot";
  std::string split = "test";
  int episodes = 10;
  int pool = 100;
  std::uint64_t seed = 0;
  std::string out = "eval";
};

struct AblateArgs {
  std::string config;
  std::string sweep;
  int seeds = 1;
  int n_train = 10;
  int n_test = 10;
  int n_traj = 100;
  int episodes = 10;
  std::uint64_t seed = 0;
  std::string out = "ablate";
  std::vector<std::string> overrides;
};

struct DiagArgs {
  std::string policy;
  std::string encoder;
  std::string data;
  std::string split = "test";
  int resamples = 10;
  bool random_encoder = false;
  std::uint64_t seed = 0;
  std::string out = "diag";
};

TrainConfig load_train_config(const std::string& path, const std::vector<std::string>& overrides,
                              const std::uint64_t* seed) {
  nlohmann::json j = read_json_file(path);
  if (!j.is_object()) throw ConfigError(path + ": config must be a JSON object");
  for (const auto& kv : overrides) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos || eq == 0) throw ConfigError("--set expects key=value, got '" + kv + "'");
    j[kv.substr(0, eq)] = parse_override_value(kv.substr(eq + 1));
  }
  if (seed != nullptr) j["seed"] = *seed;
  return train_config_from_json(j);
}

int cmd_gen_data(const GenDataArgs& a) {
  Stopwatch clock;
  const Family f = family_from_string(a.family);
  const Quality q = quality_from_string(a.quality);
  const auto dir = generate_data(a.out, f, q, a.n_train, a.n_test, a.n_traj, a.seed);
  RunManifest m;
  m.subcommand = "gen-data";
  m.seed = a.seed;
  m.config = {{"family", a.family}, {"quality", a.quality}, {"train_tasks", a.n_train},
              {"test_tasks", a.n_test}, {"trajectories", a.n_traj}, {"seed", a.seed}};
  const auto rel = fs::relative(dir, a.out).string();
  m.artifacts.push_back(rel + "/manifest.json");
  for (int i = 0; i < a.n_train; ++i) m.artifacts.push_back(rel + "/" + task_file_name(i));
  write_manifest(a.out, m, clock);
  std::cout << dir.string() << '\n';
  return kOk;
}

int cmd_pretrain(const PretrainArgs& a) {
  Stopwatch clock;
  const DataDir data = load_data_dir(a.data);
  ModelTrainConfig cfg = model_train_config(data.manifest.family);
  if (a.members > 0) cfg.members = a.members;
  if (a.patience > 0) cfg.patience = a.patience;
  if (a.max_epochs > 0) cfg.max_epochs = a.max_epochs;
  if (a.holdout > 0.0) cfg.holdout_fraction = a.holdout;
  cfg.validate();
  const auto models = pretrain_models(data, cfg, a.seed, a.out, worker_threads());
  RunManifest m;
  m.subcommand = "pretrain";
  m.seed = a.seed;
  m.config = to_json(cfg);
  m.config["seed"] = a.seed;
  m.config["data"] = a.data;
  for (const auto& model : models) {
    const auto sub = model_dir_name(model.task_id);
    m.artifacts.push_back(sub + "/model.json");
    for (std::size_t k = 0; k < model.members.size(); ++k)
      m.artifacts.push_back(sub + "/member_" + std::to_string(k) + ".bin");
  }
  write_manifest(a.out, m, clock);
  for (const auto& model : models) {
    std::cout << "task " << model.task_id << ":";
    for (const auto& r : model.reports) std::cout << ' ' << r.epochs;
    std::cout << " epochs\n";
  }
  return kOk;
}

int cmd_train(const TrainArgs& a, bool seed_given) {
  Stopwatch clock;
  const TrainConfig cfg = load_train_config(a.config, a.overrides, seed_given ? &a.seed : nullptr);
  const DataDir data = load_data_dir(a.data);
  if (data.manifest.family != cfg.family) throw ConfigError("config family does not match the data directory");
  std::vector<EnsembleModel> models;
  if (cfg.variant != Variant::no_relabel && !cfg.oracle_model) {
    if (a.models.empty()) throw MissingInputError("train: --models is required for this variant");
    models = load_models(a.models, data.train);
  }
  const auto outputs = run_training(cfg, data, models, a.out);
  RunManifest m;
  m.subcommand = "train";
  m.seed = cfg.seed;
  m.config = to_json(cfg);
  m.artifacts = outputs.artifacts;
  write_manifest(a.out, m, clock);
  for (const auto& row : outputs.run.metrics)
    if (row.epoch + 1 == cfg.epochs) std::cout << row.metric << " = " << row.value << '\n';
  return kOk;
}

int cmd_eval(const EvalArgs& a) {
  Stopwatch clock;
  const DataDir data = load_data_dir(a.data);
  EvalOptions opt;
  opt.protocol = protocol_from_string(a.protocol);
  opt.split = split_from_string(a.split);
  opt.episodes = a.episodes;
  opt.pool_trajectories = a.pool;
  opt.seed = a.seed;
  RunManifest m;
  m.subcommand = "eval";
  m.seed = a.seed;
  m.config = {{"policy", a.policy},   {"encoder", a.encoder}, {"data", a.data},  {"protocol", to_string(opt.protocol)},
              {"split", a.split},     {"episodes", a.episodes}, {"pool", a.pool}, {"seed", a.seed}};
  const EvalReport rep = run_evaluation(a.policy, a.encoder, data, opt, a.out, &m.artifacts);
  write_manifest(a.out, m, clock);
  for (const auto& r : rep.rows) std::cout << "task " << r.task_id << ": " << r.mean_return << " +- " << r.std_return << '\n';
  std::cout << "aggregate: " << rep.aggregate_mean << " +- " << rep.aggregate_std << '\n';
  return kOk;
}

int cmd_ablate(const AblateArgs& a, bool seed_given) {
  Stopwatch clock;
  const TrainConfig base = load_train_config(a.config, a.overrides, seed_given ? &a.seed : nullptr);
  AblateOptions opt;
  opt.sweep = a.sweep;
  opt.seeds = a.seeds;
  opt.n_train = a.n_train;
  opt.n_test = a.n_test;
  opt.n_traj = a.n_traj;
  opt.episodes = a.episodes;
  opt.seed = seed_given ? a.seed : base.seed;
  const auto rows = run_ablation(base, opt, a.out, worker_threads());
  export_summary(a.sweep, rows, fs::path(a.out) / "summary.csv");
  RunManifest m;
  m.subcommand = "ablate";
  m.seed = opt.seed;
  m.config = to_json(base);
  m.config["sweep"] = a.sweep;
  m.config["seeds"] = a.seeds;
  m.artifacts.push_back("summary.csv");
  for (const auto& p : sweep_points(a.sweep, base))
    for (int s = 0; s < a.seeds; ++s) m.artifacts.push_back(p.label + "/seed_" + std::to_string(s) + "/metrics.csv");
  write_manifest(a.out, m, clock);
  for (const auto& r : rows) std::cout << r.split << " seed " << r.epoch << ' ' << r.metric << " = " << r.value << '\n';
  return kOk;
}

int cmd_diag(const DiagArgs& a) {
  Stopwatch clock;
  const DataDir data = load_data_dir(a.data);
  const ActorCritic ac = load_policy(a.policy);
  TaePair tae = load_encoder(a.encoder);
  if (a.random_encoder) {
    nk::Rng rng(a.seed, "diag/random-encoder");
    tae = make_tae(tae.x_dim, tae.y_dim,
                   {tae.latent_dim, tae.feature.layers.front().weight.cols(),
                    static_cast<int>(tae.feature.layers.size()) - 1},
                   rng);
  }
  const Split split = split_from_string(a.split);
  std::vector<TaskSpec> tasks;
  if (split == Split::train)
    for (const auto& d : data.train) tasks.push_back(d.spec);
  else
    tasks = data.test_specs;
  const RepDiagnostics d = one_shot_diagnostics(ac, tae, tasks, a.resamples, a.seed);
  fs::create_directories(a.out);
  export_reps(rep_rows(d, split), fs::path(a.out) / "reps.csv");
  write_json_file(fs::path(a.out) / "diag.json", {{"split", a.split},
                                                  {"knn_accuracy", d.knn_accuracy},
                                                  {"k", kKnnNeighbours},
                                                  {"resamples", a.resamples},
                                                  {"random_encoder", a.random_encoder},
                                                  {"projection_degenerate", d.projection.degenerate}});
  RunManifest m;
  m.subcommand = "diag";
  m.seed = a.seed;
  m.config = {{"policy", a.policy}, {"encoder", a.encoder}, {"data", a.data},         {"split", a.split},
              {"resamples", a.resamples}, {"random_encoder", a.random_encoder}, {"seed", a.seed}};
  m.artifacts = {"reps.csv", "diag.json"};
  write_manifest(a.out, m, clock);
  std::cout << "knn_accuracy = " << d.knn_accuracy << '\n';
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Offline meta-RL with task auto-encoders and relabeling"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all", "Help for every subcommand");

  GenDataArgs gen;
  auto* gen_cmd = app.add_subcommand("gen-data", "Collect scripted-policy datasets for a task family");
  gen_cmd->add_option("--family", gen.family, "point_robot | point_mass_params")->capture_default_str();
  gen_cmd->add_option("--quality", gen.quality, "expert | medium | mixed")->capture_default_str();
  gen_cmd->add_option("--n-train-tasks,--train-tasks", gen.n_train, "Training tasks")->capture_default_str();
  gen_cmd->add_option("--n-test-tasks,--test-tasks", gen.n_test, "Held-out test tasks")->capture_default_str();
  gen_cmd->add_option("--n-traj,--trajectories", gen.n_traj, "Trajectories per training task")->capture_default_str();
  gen_cmd->add_option("--seed", gen.seed, "Root seed")->capture_default_str();
  gen_cmd->add_option("--out", gen.out, "Output root")->capture_default_str();

  PretrainArgs pre;
  auto* pre_cmd = app.add_subcommand("pretrain", "Train one dynamics ensemble per training task");
  pre_cmd->add_option("--data", pre.data, "Dataset directory")->required();
  pre_cmd->add_option("--out", pre.out, "Model directory")->capture_default_str();
  pre_cmd->add_option("--seed", pre.seed, "Root seed")->capture_default_str();
  pre_cmd->add_option("--members", pre.members, "Ensemble size (default 7)");
  pre_cmd->add_option("--patience", pre.patience, "Early-stopping patience (default 5)");
  pre_cmd->add_option("--max-epochs", pre.max_epochs, "Epoch cap (default 500)");
  pre_cmd->add_option("--holdout", pre.holdout, "Holdout fraction (default 0.2)");

  TrainArgs tr;
  auto* tr_cmd = app.add_subcommand("train", "Meta-train encoder and policy");
  tr_cmd->add_option("--config", tr.config, "Flat JSON config")->required();
  tr_cmd->add_option("--data", tr.data, "Dataset directory")->required();
  tr_cmd->add_option("--models", tr.models, "Model directory (not needed for no_relabel or oracle_model)");
  tr_cmd->add_option("--out", tr.out, "Run directory")->capture_default_str();
  auto* tr_seed = tr_cmd->add_option("--seed", tr.seed, "Root seed (overrides the config)");
  tr_cmd->add_option("--set", tr.overrides, "Config override key=value (repeatable)");

  EvalArgs ev;
  auto* ev_cmd = app.add_subcommand("eval", "Evaluate a trained policy and encoder");
  ev_cmd->add_option("--policy", ev.policy, "Actor snapshot (actor.bin)")->required();
  ev_cmd->add_option("--encoder", ev.encoder, "Encoder snapshot (encoder.bin)")->required();
  ev_cmd->add_option("--data", ev.data, "Dataset directory")->required();
  ev_cmd->add_option("--protocol", ev.protocol, "given | oneshot")->capture_default_str();
  ev_cmd->add_option("--split", ev.split, "train | test")->capture_default_str();
  ev_cmd->add_option("--episodes", ev.episodes, "Episodes per task")->capture_default_str();
  ev_cmd->add_option("--pool", ev.pool, "Expert pool trajectories (given protocol)")->capture_default_str();
  ev_cmd->add_option("--seed", ev.seed, "Evaluation seed")->capture_default_str();
  ev_cmd->add_option("--out", ev.out, "Output directory")->capture_default_str();

  AblateArgs ab;
  auto* ab_cmd = app.add_subcommand("ablate", "Run a named sweep of train+eval points");
  ab_cmd->add_option("--config", ab.config, "Base config")->required();
  ab_cmd->add_option("--sweep", ab.sweep, "ratio | task-count | diversity | variant")->required();
  ab_cmd->add_option("--seeds", ab.seeds, "Seeds per sweep point")->capture_default_str();
  ab_cmd->add_option("--n-train-tasks,--train-tasks", ab.n_train, "Training tasks")->capture_default_str();
  ab_cmd->add_option("--n-test-tasks,--test-tasks", ab.n_test, "Test tasks")->capture_default_str();
  ab_cmd->add_option("--n-traj,--trajectories", ab.n_traj, "Trajectories per task")->capture_default_str();
  ab_cmd->add_option("--episodes", ab.episodes, "Evaluation episodes per task")->capture_default_str();
  auto* ab_seed = ab_cmd->add_option("--seed", ab.seed, "Root seed (overrides the config)");
  ab_cmd->add_option("--out", ab.out, "Output directory")->capture_default_str();
  ab_cmd->add_option("--set", ab.overrides, "Config override key=value (repeatable)");

  DiagArgs dg;
  auto* dg_cmd = app.add_subcommand("diag", "Representation diagnostics: k-NN task identification and PCA");
  dg_cmd->add_option("--policy", dg.policy, "Actor snapshot used to collect one-shot contexts")->required();
  dg_cmd->add_option("--encoder", dg.encoder, "Encoder snapshot")->required();
  dg_cmd->add_option("--data", dg.data, "Dataset directory")->required();
  dg_cmd->add_option("--split", dg.split, "train | test")->capture_default_str();
  dg_cmd->add_option("--resamples", dg.resamples, "Contexts per task")->capture_default_str();
  dg_cmd->add_flag("--random-encoder", dg.random_encoder, "Replace the encoder by a fresh random one");
  dg_cmd->add_option("--seed", dg.seed, "Seed")->capture_default_str();
  dg_cmd->add_option("--out", dg.out, "Output directory")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kConfig;
  }

  try {
    if (*gen_cmd) return cmd_gen_data(gen);
    if (*pre_cmd) return cmd_pretrain(pre);
    if (*tr_cmd) return cmd_train(tr, tr_seed->count() > 0);
    if (*ev_cmd) return cmd_eval(ev);
    if (*ab_cmd) return cmd_ablate(ab, ab_seed->count() > 0);
    if (*dg_cmd) return cmd_diag(dg);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kConfig;
  } catch (const MissingInputError& e) {
    std::cerr << "missing input: " << e.what() << '\n';
    return kMissing;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kRuntime;
  }
  return kRuntime;
}
