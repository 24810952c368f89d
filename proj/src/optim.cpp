#include "pral/optim.hpp"

#include <algorithm>
#include <cmath>

namespace pral {

double scheduled_learning_rate(const AdamWConfig& cfg, std::size_t step) {
  const double s = static_cast<double>(step);
  if (cfg.warmup_steps > 0 && step < cfg.warmup_steps) {
    return cfg.learning_rate * s / static_cast<double>(cfg.warmup_steps);
  }
  if (cfg.schedule == LrSchedule::LinearDecay && cfg.total_steps > cfg.warmup_steps) {
    const double span = static_cast<double>(cfg.total_steps - cfg.warmup_steps);
    const double left = static_cast<double>(cfg.total_steps) - s;
    return cfg.learning_rate * std::clamp(left / span, 0.0, 1.0);
  }
  return cfg.learning_rate;
}

template <typename T>
OptimizerState<T> make_optimizer_state(const AdamWConfig& cfg, std::span<const Var<T>> params) {
  OptimizerState<T> state;
  state.config = cfg;
  for (const auto& p : params) {
    state.first_moment.emplace_back(p->value.shape());
    state.second_moment.emplace_back(p->value.shape());
  }
  return state;
}

template <typename T>
double optimizer_step(std::span<const Var<T>> params, std::span<const Tensor<T>> grads,
                      OptimizerState<T>& state) {
  if (params.size() != grads.size() || params.size() != state.first_moment.size()) {
    throw DimensionError("optimizer_step: " + std::to_string(params.size()) + " parameters, " +
                         std::to_string(grads.size()) + " gradients, " +
                         std::to_string(state.first_moment.size()) + " moment slots");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (grads[i].empty()) continue;
    if (grads[i].shape() != params[i]->value.shape()) {
      throw DimensionError("optimizer_step: gradient " + shape_string(grads[i].shape()) +
                           " for parameter " + params[i]->name + " " +
                           shape_string(params[i]->value.shape()));
    }
    if (!grads[i].all_finite()) throw NonFiniteError(params[i]->name);
  }

  const AdamWConfig& cfg = state.config;
  const std::size_t t = ++state.step;
  const double lr = scheduled_learning_rate(cfg, t);
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(t));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(t));
  const T b1 = static_cast<T>(cfg.beta1);
  const T b2 = static_cast<T>(cfg.beta2);
  const T decay = static_cast<T>(lr * cfg.weight_decay);
  const T step_size = static_cast<T>(lr / bc1);
  const T inv_sqrt_bc2 = static_cast<T>(1.0 / std::sqrt(bc2));
  const T eps = static_cast<T>(cfg.epsilon);

  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor<T>& w = params[i]->value;
    Tensor<T>& m = state.first_moment[i];
    Tensor<T>& v = state.second_moment[i];
    const bool has_grad = !grads[i].empty();
    for (std::size_t j = 0; j < w.size(); ++j) {
      const T g = has_grad ? grads[i][j] : T{0};
      w[j] -= decay * w[j];
      m[j] = b1 * m[j] + (T(1) - b1) * g;
      v[j] = b2 * v[j] + (T(1) - b2) * g * g;
      w[j] -= step_size * m[j] / (std::sqrt(v[j]) * inv_sqrt_bc2 + eps);
    }
  }
  return lr;
}

template <typename T>
double optimizer_step(std::span<const Var<T>> params, OptimizerState<T>& state) {
  std::vector<Tensor<T>> grads;
  grads.reserve(params.size());
  for (const auto& p : params) grads.push_back(p->has_grad() ? p->grad : Tensor<T>());
  return optimizer_step<T>(params, std::span<const Tensor<T>>(grads), state);
}

template OptimizerState<float> make_optimizer_state(const AdamWConfig&, std::span<const Var<float>>);
template OptimizerState<double> make_optimizer_state(const AdamWConfig&, std::span<const Var<double>>);
template double optimizer_step(std::span<const Var<float>>, std::span<const Tensor<float>>, OptimizerState<float>&);
template double optimizer_step(std::span<const Var<double>>, std::span<const Tensor<double>>, OptimizerState<double>&);
template double optimizer_step(std::span<const Var<float>>, OptimizerState<float>&);
template double optimizer_step(std::span<const Var<double>>, OptimizerState<double>&);

}  // namespace pral
