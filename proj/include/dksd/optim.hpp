#pragma once

// AdamW with decoupled weight decay, and global-norm gradient clipping.

#include <cmath>
#include <vector>

#include "dksd/model.hpp"

namespace dksd {

struct AdamWOptions {
  double lr = 1e-4;
  double weight_decay = 0.4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

template <class S>
struct AdamWState {
  std::vector<Matrix<S>> m;
  std::vector<Matrix<S>> v;
  long step = 0;
};

/// One update. Decay multiplies weights by (1 - lr*decay) before the moment
/// step and is skipped for bias parameters.
template <class S>
void adamw_step(ParameterTable<S>& params, const std::vector<Matrix<S>>& grads, AdamWState<S>& state,
                const AdamWOptions& opt) {
  if (grads.size() != params.size()) throw ShapeError("adamw_step: gradient count does not match parameters");
  if (state.m.empty()) {
    for (std::size_t i = 0; i < params.size(); ++i) {
      state.m.push_back(Matrix<S>::Zero(params.value(i).rows(), params.value(i).cols()));
      state.v.push_back(Matrix<S>::Zero(params.value(i).rows(), params.value(i).cols()));
    }
  }
  state.step += 1;
  const double bc1 = 1.0 - std::pow(opt.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(opt.beta2, static_cast<double>(state.step));
  const S b1 = static_cast<S>(opt.beta1), b2 = static_cast<S>(opt.beta2);
  const S step_size = static_cast<S>(opt.lr / bc1);
  const S inv_sqrt_bc2 = static_cast<S>(1.0 / std::sqrt(bc2));
  const S eps = static_cast<S>(opt.eps);
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& p = params.value(i);
    const auto& g = grads[i];
    if (g.rows() != p.rows() || g.cols() != p.cols()) {
      throw ShapeError("adamw_step: gradient shape mismatch for " + params.name(i));
    }
    if (!params.is_bias(i) && opt.weight_decay != 0.0) p *= static_cast<S>(1.0 - opt.lr * opt.weight_decay);
    state.m[i] = b1 * state.m[i] + (S(1) - b1) * g;
    state.v[i] = b2 * state.v[i] + (S(1) - b2) * g.cwiseProduct(g);
    p.array() -= step_size * state.m[i].array() / (state.v[i].array().sqrt() * inv_sqrt_bc2 + eps);
  }
}

/// Scales all gradients so their joint L2 norm is at most max_norm. Returns
/// the norm before clipping.
template <class S>
double clip_global_norm(std::vector<Matrix<S>>& grads, double max_norm) {
  double sq = 0.0;
  for (const auto& g : grads) sq += g.template cast<double>().squaredNorm();
  const double norm = std::sqrt(sq);
  if (max_norm > 0.0 && norm > max_norm) {
    const S f = static_cast<S>(max_norm / (norm + 1e-6));
    for (auto& g : grads) g *= f;
  }
  return norm;
}

}  // namespace dksd
