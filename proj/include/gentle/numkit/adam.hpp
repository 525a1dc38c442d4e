#pragma once

#include <cmath>
#include <cstdint>

#include "gentle/numkit/mlp.hpp"

namespace gentle::nk {

struct AdamConfig {
  double learning_rate = 3e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

struct AdamState {
  AdamConfig config;
  MlpGrads first_moment;
  MlpGrads second_moment;
  std::uint64_t step = 0;

  AdamState() = default;
  AdamState(const MlpParams& p, AdamConfig cfg)
      : config(cfg), first_moment(MlpGrads::zeros_like(p)), second_moment(MlpGrads::zeros_like(p)) {}
};

/// Bias-corrected Adam update applied in place.
inline void adam_step(AdamState& st, MlpParams& p, const MlpGrads& g) {
  ++st.step;
  const AdamConfig& c = st.config;
  const double t = static_cast<double>(st.step);
  const double bc1 = 1.0 - std::pow(c.beta1, t);
  const double bc2 = 1.0 - std::pow(c.beta2, t);
  for (std::size_t k = 0; k < p.layers.size(); ++k) {
    auto update = [&](double* param, const double* grad, double* m, double* v, Index n) {
      for (Index i = 0; i < n; ++i) {
        m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * grad[i];
        v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * grad[i] * grad[i];
        const double m_hat = m[i] / bc1;
        const double v_hat = v[i] / bc2;
        param[i] -= c.learning_rate * m_hat / (std::sqrt(v_hat) + c.epsilon);
      }
    };
    Layer& l = p.layers[k];
    update(l.weight.data(), g.weight[k].data(), st.first_moment.weight[k].data(), st.second_moment.weight[k].data(),
           l.weight.size());
    update(l.bias.data(), g.bias[k].data(), st.first_moment.bias[k].data(), st.second_moment.bias[k].data(),
           l.bias.size());
  }
  assert(all_finite(p));
}

}  // namespace gentle::nk
