#pragma once

#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "vtn/errors.hpp"
#include "vtn/tensor.hpp"

namespace vtn::nn {

template <class T>
struct AdamState {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::size_t step = 0;
  std::vector<std::vector<T>> m;
  std::vector<std::vector<T>> v;
};

// One Adam update with bias correction. Gradients are read from the
// parameters' accumulated gradient buffers; parameters without a gradient
// count as having a zero gradient.
template <class T>
void adam_step(std::span<Tensor<T>> params, AdamState<T>& state, double lr) {
  if (state.m.empty()) {
    for (const auto& p : params) {
      state.m.emplace_back(p.size(), T(0));
      state.v.emplace_back(p.size(), T(0));
    }
  }
  if (state.m.size() != params.size()) {
    throw ShapeError("adam state holds " + std::to_string(state.m.size()) +
                     " accumulators for " + std::to_string(params.size()) + " parameters");
  }
  ++state.step;
  const double c1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step));
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto& p = params[k];
    auto& m = state.m[k];
    auto& v = state.v[k];
    if (m.size() != p.size()) throw ShapeError("adam accumulator shape differs from parameter");
    if (!p.has_grad()) {
      // Zero gradient: moments decay, parameter moves only by residual momentum.
      for (std::size_t i = 0; i < m.size(); ++i) {
        m[i] = static_cast<T>(state.beta1 * m[i]);
        v[i] = static_cast<T>(state.beta2 * v[i]);
      }
    } else {
      const auto g = p.grad();
      for (std::size_t i = 0; i < m.size(); ++i) {
        m[i] = static_cast<T>(state.beta1 * m[i] + (1.0 - state.beta1) * g[i]);
        v[i] = static_cast<T>(state.beta2 * v[i] + (1.0 - state.beta2) * g[i] * g[i]);
      }
    }
    auto w = p.values();
    for (std::size_t i = 0; i < m.size(); ++i) {
      const double mhat = m[i] / c1;
      const double vhat = v[i] / c2;
      w[i] = static_cast<T>(w[i] - lr * mhat / (std::sqrt(vhat) + state.eps));
    }
  }
}

template <class T>
double global_grad_norm(std::span<const Tensor<T>> params) {
  double sq = 0.0;
  for (const auto& p : params) {
    if (!p.has_grad()) continue;
    for (T g : p.grad()) sq += static_cast<double>(g) * g;
  }
  return std::sqrt(sq);
}

// Rescales all gradients so their joint L2 norm is at most max_norm.
// Returns the norm before clipping.
template <class T>
double clip_grad_norm(std::span<Tensor<T>> params, double max_norm) {
  const double norm = global_grad_norm(std::span<const Tensor<T>>(params.data(), params.size()));
  if (norm > max_norm && norm > 0.0) {
    const T s = static_cast<T>(max_norm / norm);
    for (auto& p : params) {
      if (!p.has_grad()) continue;
      for (auto& g : p.mutable_grad()) g *= s;
    }
  }
  return norm;
}

template <class T>
void zero_grads(std::span<Tensor<T>> params) {
  for (auto& p : params) p.zero_grad();
}

}  // namespace vtn::nn
