#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <vector>

#include "kubert/nn/graph.hpp"

namespace kubert::nn {

template <typename T>
struct AdamState {
  double lr = 1e-5;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  uint64_t step_count = 0;
  std::vector<Tensor<T>> m;  // one per parameter, registration order
  std::vector<Tensor<T>> v;
};

// One bias-corrected Adam update on every trainable parameter, then all
// gradients are zeroed.
template <typename T>
void adam_step(ParameterSet<T>& params, AdamState<T>& state) {
  if (state.m.empty()) {
    for (const auto& p : params) {
      state.m.emplace_back(p->value.shape());
      state.v.emplace_back(p->value.shape());
    }
  }
  if (state.m.size() != params.size()) {
    throw std::invalid_argument("adam state tracks " + std::to_string(state.m.size()) +
                                " parameters, model has " + std::to_string(params.size()));
  }
  ++state.step_count;
  const auto t = static_cast<double>(state.step_count);
  const T b1 = T(state.beta1), b2 = T(state.beta2);
  const T c1 = T(1.0 / (1.0 - std::pow(state.beta1, t)));
  const T c2 = T(1.0 / (1.0 - std::pow(state.beta2, t)));
  const T lr = T(state.lr), eps = T(state.eps);
  for (size_t i = 0; i < params.size(); ++i) {
    Parameter<T>& p = params[i];
    if (p.trainable) {
      T* w = p.value.data();
      const T* g = p.grad.data();
      T* m = state.m[i].data();
      T* v = state.v[i].data();
      const size_t n = p.value.size();
      for (size_t j = 0; j < n; ++j) {
        m[j] = b1 * m[j] + (T(1) - b1) * g[j];
        v[j] = b2 * v[j] + (T(1) - b2) * g[j] * g[j];
        w[j] -= lr * (m[j] * c1) / (std::sqrt(v[j] * c2) + eps);
      }
    }
    p.zero_grad();
  }
}

}  // namespace kubert::nn
