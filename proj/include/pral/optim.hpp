#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "pral/autograd.hpp"

namespace pral {

enum class LrSchedule { Constant, LinearDecay };

struct AdamWConfig {
  double learning_rate = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  double weight_decay = 0.01;
  std::size_t warmup_steps = 0;
  // Only consulted by LinearDecay, which reaches 0 at total_steps.
  std::size_t total_steps = 0;
  LrSchedule schedule = LrSchedule::Constant;
};

// Effective learning rate for 1-based step `step`:
// lr * min(1, step / warmup) during warmup, then constant or linear decay.
double scheduled_learning_rate(const AdamWConfig& cfg, std::size_t step);

template <typename T>
struct OptimizerState {
  AdamWConfig config;
  std::size_t step = 0;  // number of updates applied so far
  std::vector<Tensor<T>> first_moment;
  std::vector<Tensor<T>> second_moment;
};

template <typename T>
OptimizerState<T> make_optimizer_state(const AdamWConfig& cfg, std::span<const Var<T>> params);

// One AdamW update with decoupled weight decay. `grads[i]` belongs to
// `params[i]`; an empty gradient counts as zero. Throws NonFiniteError naming
// the parameter if any gradient entry is not finite (parameters untouched).
// Returns the learning rate used.
template <typename T>
double optimizer_step(std::span<const Var<T>> params, std::span<const Tensor<T>> grads,
                      OptimizerState<T>& state);

// Convenience overload reading each parameter's accumulated gradient.
template <typename T>
double optimizer_step(std::span<const Var<T>> params, OptimizerState<T>& state);

}  // namespace pral
