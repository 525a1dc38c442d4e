#pragma once

#include <Eigen/Dense>

#include <cassert>
#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "gentle/errors.hpp"
#include "gentle/numkit/rng.hpp"

namespace gentle::nk {

using Index = Eigen::Index;
using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using RowVector = Eigen::RowVectorXd;
using Vector = Eigen::VectorXd;

enum class Activation : std::uint32_t { identity = 0, relu = 1, tanh = 2 };

/// Fully connected layer computing act(x * weight + bias) on row-major batches.
/// `weight` is (in x out).
struct Layer {
  Matrix weight;
  RowVector bias;
  Activation activation = Activation::identity;
};

struct MlpParams {
  std::vector<Layer> layers;

  [[nodiscard]] Index in_dim() const { return layers.empty() ? 0 : layers.front().weight.rows(); }
  [[nodiscard]] Index out_dim() const { return layers.empty() ? 0 : layers.back().weight.cols(); }

  [[nodiscard]] std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& l : layers) n += static_cast<std::size_t>(l.weight.size() + l.bias.size());
    return n;
  }

  void validate() const {
    if (layers.empty()) throw ConfigError("mlp has no layers");
    for (std::size_t k = 0; k < layers.size(); ++k) {
      if (layers[k].bias.size() != layers[k].weight.cols())
        throw ConfigError("mlp layer " + std::to_string(k) + ": bias length != out dim");
      if (k + 1 < layers.size() && layers[k].weight.cols() != layers[k + 1].weight.rows())
        throw ConfigError("mlp layer " + std::to_string(k) + ": out dim does not chain");
    }
  }

  friend bool operator==(const MlpParams& a, const MlpParams& b) {
    if (a.layers.size() != b.layers.size()) return false;
    for (std::size_t k = 0; k < a.layers.size(); ++k) {
      const auto& x = a.layers[k];
      const auto& y = b.layers[k];
      if (x.activation != y.activation || x.weight.rows() != y.weight.rows() ||
          x.weight.cols() != y.weight.cols() || x.weight != y.weight || x.bias != y.bias)
        return false;
    }
    return true;
  }
};

/// Builds an MLP with layer widths `dims` = {in, hidden..., out}. Weights are
/// uniform in +-sqrt(6 / (fan_in + fan_out)), biases zero.
inline MlpParams make_mlp(std::span<const Index> dims, Activation hidden, Activation output, Rng& rng) {
  if (dims.size() < 2) throw ConfigError("mlp needs at least input and output dims");
  MlpParams p;
  for (std::size_t k = 0; k + 1 < dims.size(); ++k) {
    const Index in = dims[k];
    const Index out = dims[k + 1];
    if (in < 1 || out < 1) throw ConfigError("mlp dims must be positive");
    Layer l;
    const double limit = std::sqrt(6.0 / static_cast<double>(in + out));
    l.weight.resize(in, out);
    for (Index i = 0; i < l.weight.size(); ++i) l.weight.data()[i] = rng.uniform(-limit, limit);
    l.bias = RowVector::Zero(out);
    l.activation = (k + 2 == dims.size()) ? output : hidden;
    p.layers.push_back(std::move(l));
  }
  return p;
}

inline MlpParams make_mlp(std::initializer_list<Index> dims, Activation hidden, Activation output, Rng& rng) {
  std::vector<Index> v(dims);
  return make_mlp(std::span<const Index>(v), hidden, output, rng);
}

/// Widths {in, hidden x (depth - 1), out}; depth counts linear layers.
inline std::vector<Index> mlp_dims(Index in, Index width, int depth, Index out) {
  if (depth < 1) throw ConfigError("mlp depth must be >= 1");
  std::vector<Index> d{in};
  for (int k = 0; k + 1 < depth; ++k) d.push_back(width);
  d.push_back(out);
  return d;
}

namespace detail {

inline void apply_activation(Matrix& m, Activation a) {
  switch (a) {
    case Activation::identity: break;
    case Activation::relu: m = m.cwiseMax(0.0); break;
    case Activation::tanh: m = m.array().tanh().matrix(); break;
  }
}

// Multiplies `grad` in place by the activation derivative, given the layer output.
inline void apply_activation_grad(Matrix& grad, const Matrix& out, Activation a) {
  switch (a) {
    case Activation::identity: break;
    case Activation::relu: grad = (out.array() > 0.0).select(grad, 0.0); break;
    case Activation::tanh: grad.array() *= (1.0 - out.array().square()); break;
  }
}

}  // namespace detail

/// activations[0] is the input batch, activations[k + 1] is the output of layer k.
struct MlpCache {
  std::vector<Matrix> activations;
};

inline Matrix mlp_forward(const MlpParams& p, const Matrix& input, MlpCache& cache) {
  if (input.cols() != p.in_dim())
    throw ConfigError("mlp_forward: input has " + std::to_string(input.cols()) + " columns, expected " +
                      std::to_string(p.in_dim()));
  cache.activations.resize(p.layers.size() + 1);
  cache.activations[0] = input;
  for (std::size_t k = 0; k < p.layers.size(); ++k) {
    const Layer& l = p.layers[k];
    Matrix& out = cache.activations[k + 1];
    out.noalias() = cache.activations[k] * l.weight;
    out.rowwise() += l.bias;
    detail::apply_activation(out, l.activation);
  }
  return cache.activations.back();
}

inline Matrix mlp_forward(const MlpParams& p, const Matrix& input) {
  if (input.cols() != p.in_dim())
    throw ConfigError("mlp_forward: input has " + std::to_string(input.cols()) + " columns, expected " +
                      std::to_string(p.in_dim()));
  Matrix x = input;
  for (const Layer& l : p.layers) {
    Matrix out = x * l.weight;
    out.rowwise() += l.bias;
    detail::apply_activation(out, l.activation);
    x = std::move(out);
  }
  return x;
}

inline Vector mlp_forward(const MlpParams& p, const Vector& input) {
  Matrix row = input.transpose();
  return mlp_forward(p, row).row(0).transpose();
}

/// Gradient buffers shaped like an MlpParams.
struct MlpGrads {
  std::vector<Matrix> weight;
  std::vector<RowVector> bias;

  static MlpGrads zeros_like(const MlpParams& p) {
    MlpGrads g;
    for (const auto& l : p.layers) {
      g.weight.push_back(Matrix::Zero(l.weight.rows(), l.weight.cols()));
      g.bias.push_back(RowVector::Zero(l.bias.size()));
    }
    return g;
  }

  void set_zero() {
    for (auto& w : weight) w.setZero();
    for (auto& b : bias) b.setZero();
  }

  MlpGrads& operator+=(const MlpGrads& o) {
    for (std::size_t k = 0; k < weight.size(); ++k) {
      weight[k] += o.weight[k];
      bias[k] += o.bias[k];
    }
    return *this;
  }

  MlpGrads& operator*=(double s) {
    for (auto& w : weight) w *= s;
    for (auto& b : bias) b *= s;
    return *this;
  }

  [[nodiscard]] double max_abs() const {
    double m = 0.0;
    for (const auto& w : weight) m = std::max(m, w.cwiseAbs().maxCoeff());
    for (const auto& b : bias) m = std::max(m, b.cwiseAbs().maxCoeff());
    return m;
  }
};

/// Backpropagates `grad_output` (dL/d output, same shape as the forward
/// output) through the cached forward pass. Parameter gradients are
/// accumulated into `grads` when non-null. Returns dL/d input.
inline Matrix mlp_backward(const MlpParams& p, const MlpCache& cache, const Matrix& grad_output, MlpGrads* grads) {
  assert(cache.activations.size() == p.layers.size() + 1);
  Matrix delta = grad_output;
  for (std::size_t k = p.layers.size(); k-- > 0;) {
    const Layer& l = p.layers[k];
    detail::apply_activation_grad(delta, cache.activations[k + 1], l.activation);
    if (grads != nullptr) {
      grads->weight[k].noalias() += cache.activations[k].transpose() * delta;
      grads->bias[k] += delta.colwise().sum();
    }
    Matrix prev = delta * l.weight.transpose();
    delta = std::move(prev);
  }
  return delta;
}

/// Runs forward, asks `loss_grad(outputs, d_outputs)` for the batch loss and
/// its derivative, and accumulates exact parameter gradients into `grads`.
template <class LossGrad>
double mlp_gradient(const MlpParams& p, const Matrix& inputs, LossGrad&& loss_grad, MlpGrads& grads) {
  MlpCache cache;
  const Matrix out = mlp_forward(p, inputs, cache);
  Matrix d_out = Matrix::Zero(out.rows(), out.cols());
  const double loss = loss_grad(out, d_out);
  mlp_backward(p, cache, d_out, &grads);
  return loss;
}

/// Visits every scalar parameter in a fixed order (layer, weight row-major, bias).
template <class F>
void for_each_parameter(MlpParams& p, F&& f) {
  for (auto& l : p.layers) {
    for (Index i = 0; i < l.weight.size(); ++i) f(l.weight.data()[i]);
    for (Index i = 0; i < l.bias.size(); ++i) f(l.bias.data()[i]);
  }
}

template <class F>
void for_each_gradient(const MlpGrads& g, F&& f) {
  for (std::size_t k = 0; k < g.weight.size(); ++k) {
    for (Index i = 0; i < g.weight[k].size(); ++i) f(g.weight[k].data()[i]);
    for (Index i = 0; i < g.bias[k].size(); ++i) f(g.bias[k].data()[i]);
  }
}

inline bool all_finite(const MlpParams& p) {
  for (const auto& l : p.layers)
    if (!l.weight.allFinite() || !l.bias.allFinite()) return false;
  return true;
}

/// target <- (1 - tau) * target + tau * online, per parameter.
inline void soft_update(MlpParams& target, const MlpParams& online, double tau) {
  for (std::size_t k = 0; k < target.layers.size(); ++k) {
    auto& t = target.layers[k];
    const auto& o = online.layers[k];
    for (Index i = 0; i < t.weight.size(); ++i)
      t.weight.data()[i] = (1.0 - tau) * t.weight.data()[i] + tau * o.weight.data()[i];
    for (Index i = 0; i < t.bias.size(); ++i) t.bias.data()[i] = (1.0 - tau) * t.bias.data()[i] + tau * o.bias.data()[i];
  }
}

}  // namespace gentle::nk
