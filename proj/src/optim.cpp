#include "poroperm/optim.hpp"

#include <cmath>
#include <string>

namespace poroperm {

namespace {

template <typename T>
void check_conformal(const ParameterSet<T>& params, const ParameterSet<T>& other, const char* what) {
  if (params.size() != other.size()) fail(ErrorCode::ShapeMismatch, std::string(what) + " count differs from parameters");
  for (std::size_t i = 0; i < params.size(); ++i)
    if (params[i].tensor.shape() != other[i].tensor.shape())
      fail(ErrorCode::ShapeMismatch, std::string(what) + " shape differs for '" + params[i].name + "'");
}

}  // namespace

template <typename T>
void adam_step(ParameterSet<T>& params, const ParameterSet<T>& grads, AdamState<T>& state) {
  const AdamConfig& c = state.config;
  if (!(c.lr > 0.0)) fail(ErrorCode::NegativeLearningRate, "learning rate must be positive");
  check_conformal(params, grads, "gradient");
  check_conformal(params, state.m, "first moment");
  check_conformal(params, state.v, "second moment");

  state.t += 1;
  const double bc1 = 1.0 - std::pow(c.beta1, static_cast<double>(state.t));
  const double bc2 = 1.0 - std::pow(c.beta2, static_cast<double>(state.t));
  const T b1 = static_cast<T>(c.beta1), b2 = static_cast<T>(c.beta2);
  const T step = static_cast<T>(c.lr / bc1);
  const T inv_bc2 = static_cast<T>(1.0 / bc2);
  const T eps = static_cast<T>(c.eps);
  for (std::size_t k = 0; k < params.size(); ++k) {
    T* p = params[k].tensor.raw();
    const T* g = grads[k].tensor.raw();
    T* m = state.m[k].tensor.raw();
    T* v = state.v[k].tensor.raw();
    const std::size_t n = params[k].tensor.size();
    for (std::size_t i = 0; i < n; ++i) {
      m[i] = b1 * m[i] + (T{1} - b1) * g[i];
      v[i] = b2 * v[i] + (T{1} - b2) * g[i] * g[i];
      p[i] -= step * m[i] / (std::sqrt(v[i] * inv_bc2) + eps);
    }
  }
}

template <typename T>
void sgd_step(ParameterSet<T>& params, const ParameterSet<T>& grads, double lr) {
  if (!(lr > 0.0)) fail(ErrorCode::NegativeLearningRate, "learning rate must be positive");
  check_conformal(params, grads, "gradient");
  const T s = static_cast<T>(lr);
  for (std::size_t k = 0; k < params.size(); ++k) {
    T* p = params[k].tensor.raw();
    const T* g = grads[k].tensor.raw();
    for (std::size_t i = 0; i < params[k].tensor.size(); ++i) p[i] -= s * g[i];
  }
}

template void adam_step<float>(ParameterSet<float>&, const ParameterSet<float>&, AdamState<float>&);
template void adam_step<double>(ParameterSet<double>&, const ParameterSet<double>&, AdamState<double>&);
template void sgd_step<float>(ParameterSet<float>&, const ParameterSet<float>&, double);
template void sgd_step<double>(ParameterSet<double>&, const ParameterSet<double>&, double);

}  // namespace poroperm
