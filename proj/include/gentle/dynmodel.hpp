#pragma once

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <limits>
#include <numeric>
#include <string>
#include <vector>

#include "gentle/datagen.hpp"
#include "gentle/env.hpp"
#include "gentle/numkit/adam.hpp"
#include "gentle/numkit/snapshot.hpp"

namespace gentle {

struct ModelTrainConfig {
  double holdout_fraction = 0.2;
  int patience = 5;
  double learning_rate = 1e-3;
  int batch_size = 256;
  int max_epochs = 500;
  Index width = 64;
  int depth = 3;  // linear layers
  int members = 7;

  void validate() const {
    if (!(holdout_fraction > 0.0 && holdout_fraction < 1.0)) throw ConfigError("holdout fraction must be in (0,1)");
    if (patience < 1) throw ConfigError("patience must be >= 1");
    if (batch_size < 1 || max_epochs < 1 || width < 1 || depth < 1 || members < 1)
      throw ConfigError("model train config: counts must be >= 1");
  }
};

inline ModelTrainConfig model_train_config(Family f) {
  ModelTrainConfig c;
  if (f == Family::point_mass_params) {
    c.width = 64;
    c.depth = 4;
  }
  return c;
}

/// Per-dimension affine normalization with a floor on the scale.
struct Normalizer {
  Vector mean;
  Vector std;

  static Normalizer fit(const Matrix& data) {
    Normalizer n;
    n.mean = data.colwise().mean().transpose();
    n.std.resize(data.cols());
    for (Index c = 0; c < data.cols(); ++c) {
      const double var = (data.col(c).array() - n.mean[c]).square().mean();
      n.std[c] = std::max(std::sqrt(var), 1e-8);
    }
    return n;
  }

  [[nodiscard]] Matrix normalize(const Matrix& x) const {
    Matrix out = x;
    for (Index c = 0; c < x.cols(); ++c) out.col(c) = (x.col(c).array() - mean[c]) / std[c];
    return out;
  }

  [[nodiscard]] Matrix denormalize(const Matrix& x) const {
    Matrix out = x;
    for (Index c = 0; c < x.cols(); ++c) out.col(c) = x.col(c).array() * std[c] + mean[c];
    return out;
  }
};

/// Counts consecutive non-improving evaluations.
class EarlyStopper {
 public:
  explicit EarlyStopper(int patience) : patience_(patience) {}

  /// Returns true when training should stop after this evaluation.
  bool update(double error) {
    ++epoch_;
    if (error < best_) {
      best_ = error;
      best_epoch_ = epoch_;
      stale_ = 0;
      improved_ = true;
    } else {
      ++stale_;
      improved_ = false;
    }
    return stale_ >= patience_;
  }

  [[nodiscard]] bool improved() const { return improved_; }
  [[nodiscard]] int epoch() const { return epoch_; }
  [[nodiscard]] int best_epoch() const { return best_epoch_; }
  [[nodiscard]] double best() const { return best_; }

 private:
  int patience_;
  int epoch_ = 0;
  int best_epoch_ = 0;
  int stale_ = 0;
  bool improved_ = false;
  double best_ = std::numeric_limits<double>::infinity();
};

struct MemberReport {
  int epochs = 0;
  int best_epoch = 0;
  double best_holdout_mse = 0.0;
};

/// M_hat_i: ensemble of regressors from (s, a) to y = (s', r) or r.
struct EnsembleModel {
  int task_id = 0;
  Family family = Family::point_robot;
  bool reward_only = true;
  std::vector<nk::MlpParams> members;
  Normalizer input_norm;
  Normalizer output_norm;
  std::vector<MemberReport> reports;
  std::size_t train_size = 0;
  std::size_t holdout_size = 0;

  // Oracle mode bypasses the networks and answers with the true model.
  bool oracle = false;
  TaskSpec spec;

  [[nodiscard]] Index input_dim() const { return state_dim(family) + kActionDim; }
  [[nodiscard]] Index output_dim() const { return label_dim(family); }
};

inline Matrix model_inputs(const TaskDataset& d) {
  const Index ds = state_dim(d.spec.family);
  Matrix x(static_cast<Index>(d.size()), ds + kActionDim);
  for (std::size_t i = 0; i < d.size(); ++i) {
    const auto& t = d.transitions[i];
    x.row(static_cast<Index>(i)) << t.s.transpose(), t.a.transpose();
  }
  return x;
}

inline Matrix model_targets(const TaskDataset& d) {
  const Family f = d.spec.family;
  const Index yd = label_dim(f);
  Matrix y(static_cast<Index>(d.size()), yd);
  for (std::size_t i = 0; i < d.size(); ++i) {
    const auto& t = d.transitions[i];
    if (env_config(f).reward_only)
      y(static_cast<Index>(i), 0) = t.r;
    else
      y.row(static_cast<Index>(i)) << t.s_next.transpose(), t.r;
  }
  return y;
}

inline Matrix gather_rows(const Matrix& m, const std::vector<Index>& idx, std::size_t begin, std::size_t end) {
  Matrix out(static_cast<Index>(end - begin), m.cols());
  for (std::size_t i = begin; i < end; ++i) out.row(static_cast<Index>(i - begin)) = m.row(idx[i]);
  return out;
}

template <class T>
void shuffle(std::vector<T>& v, nk::Rng& rng) {
  for (std::size_t i = v.size(); i > 1; --i) std::swap(v[i - 1], v[rng.below(i)]);
}

inline double mse(const Matrix& a, const Matrix& b) { return (a - b).squaredNorm() / static_cast<double>(a.size()); }

/// Mean over rows of the squared prediction error; accumulates parameter
/// gradients into `grads` when given.
inline double regression_loss(const nk::MlpParams& net, const Matrix& x, const Matrix& y, nk::MlpGrads* grads) {
  if (grads == nullptr) return (nk::mlp_forward(net, x) - y).squaredNorm() / static_cast<double>(x.rows());
  return nk::mlp_gradient(
      net, x,
      [&](const Matrix& out, Matrix& d_out) {
        const double scale = 1.0 / static_cast<double>(out.rows());
        d_out = 2.0 * scale * (out - y);
        return scale * (out - y).squaredNorm();
      },
      *grads);
}

/// Trains one regression member on normalized data with early stopping on
/// the holdout split; returns the best-holdout snapshot.
inline nk::MlpParams train_member(const Matrix& x_train, const Matrix& y_train, const Matrix& x_hold,
                                  const Matrix& y_hold, const ModelTrainConfig& cfg, nk::Rng& rng,
                                  MemberReport& report) {
  auto dims = nk::mlp_dims(x_train.cols(), cfg.width, cfg.depth, y_train.cols());
  nk::MlpParams net = nk::make_mlp(dims, nk::Activation::relu, nk::Activation::identity, rng);
  nk::AdamState opt(net, {cfg.learning_rate});
  nk::MlpParams best = net;
  EarlyStopper stopper(cfg.patience);
  std::vector<Index> order(static_cast<std::size_t>(x_train.rows()));
  std::iota(order.begin(), order.end(), Index{0});
  auto grads = nk::MlpGrads::zeros_like(net);
  const auto bs = static_cast<std::size_t>(cfg.batch_size);
  for (int epoch = 0; epoch < cfg.max_epochs; ++epoch) {
    shuffle(order, rng);
    for (std::size_t b = 0; b + bs <= order.size(); b += bs) {
      const Matrix xb = gather_rows(x_train, order, b, b + bs);
      const Matrix yb = gather_rows(y_train, order, b, b + bs);
      grads.set_zero();
      regression_loss(net, xb, yb, &grads);
      nk::adam_step(opt, net, grads);
    }
    const bool stop = stopper.update(mse(nk::mlp_forward(net, x_hold), y_hold));
    if (stopper.improved()) best = net;
    if (stop) break;
  }
  report.epochs = stopper.epoch();
  report.best_epoch = stopper.best_epoch();
  report.best_holdout_mse = stopper.best();
  return best;
}

/// Holdout size used for a dataset of `n` rows.
inline std::size_t holdout_count(std::size_t n, double fraction) {
  return static_cast<std::size_t>(std::llround(fraction * static_cast<double>(n)));
}

inline EnsembleModel train_task_model(const TaskDataset& d, const ModelTrainConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  if (d.transitions.empty()) throw ConfigError("train_task_model: empty dataset");
  const Matrix x = model_inputs(d);
  const Matrix y = model_targets(d);
  const std::size_t n = d.size();
  const std::size_t n_hold = holdout_count(n, cfg.holdout_fraction);
  const std::size_t n_train = n - n_hold;
  if (n_hold < 1 || n_train < static_cast<std::size_t>(cfg.batch_size))
    throw ConfigError("train_task_model: dataset of " + std::to_string(n) + " rows is smaller than one batch of " +
                      std::to_string(cfg.batch_size) + " after the holdout split");

  std::vector<Index> idx(n);
  std::iota(idx.begin(), idx.end(), Index{0});
  nk::Rng split_rng(seed, "holdout");
  shuffle(idx, split_rng);

  EnsembleModel m;
  m.task_id = d.task_id;
  m.family = d.spec.family;
  m.reward_only = env_config(m.family).reward_only;
  m.spec = d.spec;
  m.train_size = n_train;
  m.holdout_size = n_hold;
  const Matrix x_train = gather_rows(x, idx, 0, n_train);
  const Matrix y_train = gather_rows(y, idx, 0, n_train);
  m.input_norm = Normalizer::fit(x_train);
  m.output_norm = Normalizer::fit(y_train);
  const Matrix xn_train = m.input_norm.normalize(x_train);
  const Matrix yn_train = m.output_norm.normalize(y_train);
  const Matrix xn_hold = m.input_norm.normalize(gather_rows(x, idx, n_train, n));
  const Matrix yn_hold = m.output_norm.normalize(gather_rows(y, idx, n_train, n));

  nk::Rng member_root(seed, "members");
  for (int k = 0; k < cfg.members; ++k) {
    nk::Rng rng = member_root.split(static_cast<std::uint64_t>(k));
    MemberReport rep;
    m.members.push_back(train_member(xn_train, yn_train, xn_hold, yn_hold, cfg, rng, rep));
    m.reports.push_back(rep);
  }
  return m;
}

/// Predictions of each member, de-normalized; rows follow `x`.
inline std::vector<Matrix> member_predictions(const EnsembleModel& m, const Matrix& x) {
  const Matrix xn = m.input_norm.normalize(x);
  std::vector<Matrix> out;
  for (const auto& net : m.members) out.push_back(m.output_norm.denormalize(nk::mlp_forward(net, xn)));
  return out;
}

/// Ensemble-mean prediction for a batch of (s, a) rows.
inline Matrix model_predict(const EnsembleModel& m, const Matrix& x) {
  if (x.cols() != m.input_dim()) throw ConfigError("model_predict: input dimension mismatch");
  if (m.oracle) {
    const EnvConfig cfg = env_config(m.family);
    const Index ds = state_dim(m.family);
    Matrix y(x.rows(), m.output_dim());
    for (Index i = 0; i < x.rows(); ++i) {
      const Vector s = x.row(i).head(ds).transpose();
      const Vector a = x.row(i).tail(kActionDim).transpose();
      y.row(i) = true_model(m.spec, cfg, s, a).transpose();
    }
    return y;
  }
  if (m.members.empty()) throw ConfigError("model_predict: ensemble has no members");
  const Matrix xn = m.input_norm.normalize(x);
  Matrix sum = Matrix::Zero(x.rows(), m.output_dim());
  for (const auto& net : m.members) sum += nk::mlp_forward(net, xn);
  return m.output_norm.denormalize(sum / static_cast<double>(m.members.size()));
}

inline Vector model_predict(const EnsembleModel& m, const Vector& s, const Vector& a) {
  Matrix x(1, s.size() + a.size());
  x << s.transpose(), a.transpose();
  return model_predict(m, x).row(0).transpose();
}

inline EnsembleModel make_oracle_model(const TaskSpec& spec, int task_id) {
  EnsembleModel m;
  m.task_id = task_id;
  m.family = spec.family;
  m.reward_only = env_config(spec.family).reward_only;
  m.oracle = true;
  m.spec = spec;
  return m;
}

// ---------------------------------------------------------------------------
// Persistence: <dir>/task_XXX/member_K.bin + model.json

inline std::vector<double> to_std(const Vector& v) { return {v.data(), v.data() + v.size()}; }

inline Vector from_std(const std::vector<double>& v) {
  return Eigen::Map<const Vector>(v.data(), static_cast<Index>(v.size()));
}

inline std::string model_dir_name(int task_id) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "task_%03d", task_id);
  return buf;
}

inline void save_model(const EnsembleModel& m, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  nlohmann::json reports = nlohmann::json::array();
  for (const auto& r : m.reports)
    reports.push_back({{"epochs", r.epochs}, {"best_epoch", r.best_epoch}, {"best_holdout_mse", r.best_holdout_mse}});
  nlohmann::json j{{"task_id", m.task_id},
                   {"family", to_string(m.family)},
                   {"mode", m.reward_only ? "reward_only" : "dynamics_reward"},
                   {"members", m.members.size()},
                   {"input_mean", to_std(m.input_norm.mean)},
                   {"input_std", to_std(m.input_norm.std)},
                   {"output_mean", to_std(m.output_norm.mean)},
                   {"output_std", to_std(m.output_norm.std)},
                   {"train_size", m.train_size},
                   {"holdout_size", m.holdout_size},
                   {"spec", to_json(m.spec)},
                   {"reports", reports}};
  for (std::size_t k = 0; k < m.members.size(); ++k)
    nk::save_snapshot(m.members[k], dir / ("member_" + std::to_string(k) + ".bin"));
  write_json_file(dir / "model.json", j);
}

inline EnsembleModel load_model(const std::filesystem::path& dir) {
  const auto j = read_json_file(dir / "model.json");
  EnsembleModel m;
  try {
    m.task_id = j.at("task_id").get<int>();
    m.family = family_from_string(j.at("family").get<std::string>());
    m.reward_only = j.at("mode").get<std::string>() == "reward_only";
    m.input_norm.mean = from_std(j.at("input_mean").get<std::vector<double>>());
    m.input_norm.std = from_std(j.at("input_std").get<std::vector<double>>());
    m.output_norm.mean = from_std(j.at("output_mean").get<std::vector<double>>());
    m.output_norm.std = from_std(j.at("output_std").get<std::vector<double>>());
    m.train_size = j.at("train_size").get<std::size_t>();
    m.holdout_size = j.at("holdout_size").get<std::size_t>();
    m.spec = task_from_json(j.at("spec"));
    for (const auto& r : j.at("reports"))
      m.reports.push_back({r.at("epochs").get<int>(), r.at("best_epoch").get<int>(),
                           r.at("best_holdout_mse").get<double>()});
    const auto count = j.at("members").get<std::size_t>();
    for (std::size_t k = 0; k < count; ++k)
      m.members.push_back(nk::load_snapshot(dir / ("member_" + std::to_string(k) + ".bin")));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(dir.string() + "/model.json: " + e.what());
  }
  return m;
}

}  // namespace gentle
