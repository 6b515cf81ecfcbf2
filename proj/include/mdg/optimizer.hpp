#pragma once

#include <cmath>
#include <cstdint>

#include "mdg/denoiser.hpp"

namespace mdg {

struct AdamConfig {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  double clip_norm = 1.0;  ///< global gradient-norm ceiling; <= 0 disables clipping
  double weight_decay = 0.0;

  friend bool operator==(const AdamConfig&, const AdamConfig&) = default;
};

template <typename Scalar>
struct OptimizerState {
  AdamConfig hp;
  std::int64_t step = 0;
  Parameters<Scalar> m;
  Parameters<Scalar> v;

  static OptimizerState fresh(const ModelConfig& cfg, AdamConfig hp = {}) {
    return {hp, 0, Parameters<Scalar>::zeros(cfg), Parameters<Scalar>::zeros(cfg)};
  }
};

struct StepStats {
  double grad_norm = 0;  ///< before clipping
  double clip_scale = 1;
};

template <typename Scalar>
double global_norm(const Parameters<Scalar>& grads) {
  double sq = 0;
  grads.for_each([&](const std::string&, const Matrix<Scalar>& g) { sq += g.template cast<double>().squaredNorm(); });
  return std::sqrt(sq);
}

/// Bias-corrected Adam update with global-norm clipping. `lr_scale` multiplies the base learning
/// rate (warmup / decay). Throws NumericError naming the first non-finite gradient tensor.
template <typename Scalar>
StepStats optimizer_step(Parameters<Scalar>& params, Parameters<Scalar>& grads, OptimizerState<Scalar>& state,
                         double lr_scale = 1.0) {
  grads.for_each([](const std::string& name, const Matrix<Scalar>& g) {
    if (!g.allFinite()) throw NumericError("non-finite gradient in " + name);
  });
  StepStats stats;
  stats.grad_norm = global_norm(grads);
  if (state.hp.clip_norm > 0 && stats.grad_norm > state.hp.clip_norm) stats.clip_scale = state.hp.clip_norm / stats.grad_norm;

  ++state.step;
  const auto& hp = state.hp;
  const double bc1 = 1.0 - std::pow(hp.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(hp.beta2, static_cast<double>(state.step));
  const auto lr = static_cast<Scalar>(hp.learning_rate * lr_scale);
  const auto b1 = static_cast<Scalar>(hp.beta1), b2 = static_cast<Scalar>(hp.beta2);
  const auto clip = static_cast<Scalar>(stats.clip_scale);
  const auto eps = static_cast<Scalar>(hp.epsilon);
  const auto inv_bc1 = static_cast<Scalar>(1.0 / bc1);
  const auto inv_sqrt_bc2 = static_cast<Scalar>(1.0 / std::sqrt(bc2));
  const auto decay = static_cast<Scalar>(hp.weight_decay);

  auto p = params.tensor_list();
  auto g = grads.tensor_list();
  auto m = state.m.tensor_list();
  auto v = state.v.tensor_list();
  for (std::size_t i = 0; i < p.size(); ++i) {
    auto ga = (g[i]->array() * clip).eval();
    m[i]->array() = b1 * m[i]->array() + (Scalar(1) - b1) * ga;
    v[i]->array() = b2 * v[i]->array() + (Scalar(1) - b2) * ga.square();
    p[i]->array() -= lr * ((m[i]->array() * inv_bc1) / ((v[i]->array().sqrt() * inv_sqrt_bc2) + eps));
    if (decay != Scalar(0)) p[i]->array() -= lr * decay * p[i]->array();
  }
  return stats;
}

}  // namespace mdg
