#pragma once

#include <cmath>
#include <cstddef>
#include <vector>

#include "fmp/tape.hpp"

namespace fmp {

struct AdamHyper {
  double lr = 1e-2;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

template <Tensor T>
struct AdamState {
  std::vector<T> m;
  std::vector<T> v;
  std::size_t step = 0;
};

// One Adam update over a list of tensors. Written once for Matrix and Var so the unrolled
// (differentiable) trajectory performs exactly the same arithmetic as the plain one.
template <Tensor T>
void adam_step(std::vector<T>& params, const std::vector<T>& grads, AdamState<T>& state, const AdamHyper& h) {
  if (params.size() != grads.size()) throw ShapeError("adam_step: params/grads count mismatch");
  if (state.m.empty()) {
    for (const T& p : params) {
      const Matrix& pv = value_of(p);
      state.m.push_back(lift_like(p, Matrix(pv.rows(), pv.cols())));
      state.v.push_back(lift_like(p, Matrix(pv.rows(), pv.cols())));
    }
  }
  if (state.m.size() != params.size()) throw ShapeError("adam_step: state does not match params");
  ++state.step;
  const double bc1 = 1.0 - std::pow(h.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(h.beta2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    require_same_shape(value_of(params[i]), value_of(grads[i]), "adam_step");
    state.m[i] = add(scale(state.m[i], h.beta1), scale(grads[i], 1.0 - h.beta1));
    state.v[i] = add(scale(state.v[i], h.beta2), scale(hadamard(grads[i], grads[i]), 1.0 - h.beta2));
    const T m_hat = scale(state.m[i], 1.0 / bc1);
    const T v_hat = scale(state.v[i], 1.0 / bc2);
    const T update = divide(m_hat, add_scalar(sqrt(v_hat), h.eps));
    params[i] = sub(params[i], scale(update, h.lr));
  }
}

}  // namespace fmp
