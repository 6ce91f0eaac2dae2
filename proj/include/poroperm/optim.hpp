#pragma once

#include <cstdint>

#include "poroperm/parameters.hpp"

namespace poroperm {

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

template <typename T>
struct AdamState {
  AdamConfig config;
  ParameterSet<T> m;
  ParameterSet<T> v;
  std::uint64_t t = 0;

  static AdamState fresh(const ParameterSet<T>& params, AdamConfig config = {}) {
    return {config, params.zeros_like(), params.zeros_like(), 0};
  }
};

/// One bias-corrected Adam update; increments `state.t`.
template <typename T>
void adam_step(ParameterSet<T>& params, const ParameterSet<T>& grads, AdamState<T>& state);

/// Plain gradient descent, p -= lr * g.
template <typename T>
void sgd_step(ParameterSet<T>& params, const ParameterSet<T>& grads, double lr);

}  // namespace poroperm
