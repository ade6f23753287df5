#pragma once

// Adam with decoupled multiplicative weight decay.

#include <cmath>
#include <stdexcept>
#include <vector>

#include "vglab/tensor.hpp"

namespace vg {

template <typename T>
struct AdamState {
  std::vector<std::vector<T>> m, v;
  long long t = 0;

  void init_for(const std::vector<Tensor<T>*>& params) {
    m.clear();
    v.clear();
    for (Tensor<T>* p : params) {
      m.emplace_back(p->numel(), T(0));
      v.emplace_back(p->numel(), T(0));
    }
    t = 0;
  }
};

template <typename T>
void adam_step(const std::vector<Tensor<T>*>& params, AdamState<T>& state, double lr,
               double weight_decay, double beta1 = 0.9, double beta2 = 0.999,
               double eps = 1e-8) {
  if (state.m.size() != params.size())
    throw std::invalid_argument("adam_step: state not initialized for this parameter set");
  ++state.t;
  const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(state.t));
  const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(state.t));
  const T decay_mult = static_cast<T>(1.0 - lr * weight_decay);
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    Tensor<T>& p = *params[pi];
    if (!p.grad) throw std::invalid_argument("adam_step: parameter has no gradient buffer");
    std::vector<T>& m = state.m[pi];
    std::vector<T>& v = state.v[pi];
    for (int i = 0; i < p.numel(); ++i) {
      const T g = (*p.grad)[i];
      if (!std::isfinite(static_cast<double>(g)))
        throw std::runtime_error("adam_step: non-finite gradient");
      m[i] = static_cast<T>(beta1) * m[i] + static_cast<T>(1.0 - beta1) * g;
      v[i] = static_cast<T>(beta2) * v[i] + static_cast<T>(1.0 - beta2) * g * g;
      const double mhat = static_cast<double>(m[i]) / bc1;
      const double vhat = static_cast<double>(v[i]) / bc2;
      T w = (*p.data)[i] * decay_mult;
      w -= static_cast<T>(lr * mhat / (std::sqrt(vhat) + eps));
      (*p.data)[i] = w;
    }
  }
}

// global L2 norm clip over all parameter gradients; returns the pre-clip norm
template <typename T>
double clip_grad_norm(const std::vector<Tensor<T>*>& params, double max_norm) {
  double sq = 0.0;
  for (Tensor<T>* p : params)
    for (T g : *p->grad) sq += static_cast<double>(g) * static_cast<double>(g);
  const double norm = std::sqrt(sq);
  if (max_norm > 0.0 && norm > max_norm) {
    const T s = static_cast<T>(max_norm / norm);
    for (Tensor<T>* p : params)
      for (T& g : *p->grad) g *= s;
  }
  return norm;
}

}  // namespace vg
