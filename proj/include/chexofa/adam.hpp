#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "chexofa/tensor.hpp"

namespace cxo {

struct AdamConfig {
  double lr = 3e-4;
  double beta1 = 0.9;
  double beta2 = 0.98;
  double eps = 1e-9;
};

template <typename Scalar>
struct BasicAdamState {
  AdamConfig config;
  std::vector<MatrixX<Scalar>> m;
  std::vector<MatrixX<Scalar>> v;
  std::uint64_t step = 0;
};

using AdamState = BasicAdamState<double>;

/// Bias-corrected Adam update applied in place. `lr_scale` multiplies the
/// configured learning rate (warmup schedules).
template <typename Scalar>
void adam_step(std::vector<BasicTensor<Scalar>*> params, const std::vector<const MatrixX<Scalar>*>& grads,
               BasicAdamState<Scalar>& state, Scalar lr_scale = Scalar(1)) {
  if (params.size() != grads.size()) {
    throw ShapeError("adam_step: " + std::to_string(params.size()) + " params vs " + std::to_string(grads.size()) + " grads");
  }
  if (state.m.empty()) {
    for (const auto* p : params) {
      state.m.push_back(MatrixX<Scalar>::Zero(p->matrix().rows(), p->matrix().cols()));
      state.v.push_back(MatrixX<Scalar>::Zero(p->matrix().rows(), p->matrix().cols()));
    }
  }
  if (state.m.size() != params.size()) throw ShapeError("adam_step: state tracks a different parameter count");
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& p = params[i]->matrix();
    const auto& g = *grads[i];
    if (g.rows() != p.rows() || g.cols() != p.cols() || state.m[i].rows() != p.rows() || state.m[i].cols() != p.cols()) {
      throw ShapeError("adam_step: shape mismatch at parameter " + std::to_string(i));
    }
  }
  ++state.step;
  const auto& c = state.config;
  const Scalar t = static_cast<Scalar>(state.step);
  const Scalar bc1 = Scalar(1) - std::pow(Scalar(c.beta1), t);
  const Scalar bc2 = Scalar(1) - std::pow(Scalar(c.beta2), t);
  const Scalar lr = Scalar(c.lr) * lr_scale;
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& m = state.m[i];
    auto& v = state.v[i];
    const auto& g = *grads[i];
    m = Scalar(c.beta1) * m + (Scalar(1) - Scalar(c.beta1)) * g;
    v = Scalar(c.beta2) * v + (Scalar(1) - Scalar(c.beta2)) * g.cwiseProduct(g);
    params[i]->matrix().array() -= lr * (m.array() / bc1) / ((v.array() / bc2).sqrt() + Scalar(c.eps));
  }
}

}  // namespace cxo
