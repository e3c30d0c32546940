#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "svrec/diffcore/mlp.hpp"
#include "svrec/error.hpp"

namespace svrec::diffcore {

struct AdamState {
  std::vector<double> m;
  std::vector<double> v;
  std::uint64_t t = 0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;

  AdamState() = default;
  explicit AdamState(std::size_t n) : m(n, 0.0), v(n, 0.0) {}
};

// One bias-corrected Adam update in place. Moments are kept in double even
// for single-precision parameters. A non-finite gradient refuses the step and
// leaves both params and state untouched.
template <typename Scalar, typename GradScalar>
void adam_step(ParamSet<Scalar>& params, std::span<const GradScalar> grads, AdamState& state, double lr) {
  const std::size_t n = params.values.size();
  if (grads.size() != n || state.m.size() != n || state.v.size() != n)
    throw ShapeError("adam_step: parameter, gradient and state sizes disagree");
  if (!(lr > 0.0)) throw RangeError("adam_step: learning rate must be positive");
  for (const auto g : grads)
    if (!std::isfinite(static_cast<double>(g))) throw NumericError("adam_step: non-finite gradient, step refused");

  state.t += 1;
  const double c1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.t));
  const double c2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.t));
  for (std::size_t i = 0; i < n; ++i) {
    const double g = static_cast<double>(grads[i]);
    state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * g;
    state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * g * g;
    const double m_hat = state.m[i] / c1;
    const double v_hat = state.v[i] / c2;
    params.values[i] = static_cast<Scalar>(static_cast<double>(params.values[i]) - lr * m_hat / (std::sqrt(v_hat) + state.eps));
  }
  params.generation += 1;
}

template <typename Scalar, typename GradScalar>
void adam_step(ParamSet<Scalar>& params, const std::vector<GradScalar>& grads, AdamState& state, double lr) {
  adam_step(params, std::span<const GradScalar>(grads), state, lr);
}

}  // namespace svrec::diffcore
