#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <set>
#include <type_traits>
#include <utility>
#include <vector>

#include "svrec/diffcore/mlp.hpp"
#include "svrec/error.hpp"
#include "svrec/geometry.hpp"

namespace svrec::model {

namespace dc = diffcore;

// Normalized (stack, slice) code of one slice, both in [-1, 1].
struct SliceEncoding {
  double stack = 0.0;
  double slice = 0.0;

  friend auto operator<=>(const SliceEncoding&, const SliceEncoding&) = default;
};

inline double normalized_index(std::size_t idx, std::size_t count) {
  if (count == 1) return 0.0;
  return -1.0 + 2.0 * static_cast<double>(idx) / static_cast<double>(count - 1);
}

inline SliceEncoding encode_slice(std::size_t stack_idx, std::size_t n_stacks, std::size_t slice_idx,
                                  std::size_t n_slices_in_stack) {
  if (n_stacks == 0 || n_slices_in_stack == 0) throw RangeError("encode_slice: counts must be positive");
  if (stack_idx >= n_stacks || slice_idx >= n_slices_in_stack) throw RangeError("encode_slice: index out of range");
  return {normalized_index(stack_idx, n_stacks), normalized_index(slice_idx, n_slices_in_stack)};
}

struct SliceState {
  geometry::RigidParams psi;  // motion correction, radians / mm
  double sigma = 1.0;         // intensity scale
  double omega = 1.0;         // loss weight
};

// Output scaling of the motion head: network units -> radians / mm.
struct MotionScale {
  double rotation = 0.6;
  double translation = 40.0;

  double channel(std::size_t k) const { return k < 3 ? rotation : translation; }
};

inline constexpr std::size_t kMotionOutputs = 6;
inline constexpr std::size_t kOutlierOutputs = 2;  // sigma logit, omega logit

inline dc::MlpSpec sr_module_spec(std::vector<std::size_t> hidden = std::vector<std::size_t>(6, 330),
                                  dc::Activation activation = dc::Activation::sine(30.0)) {
  dc::MlpSpec spec;
  spec.layer_widths.push_back(3);
  spec.layer_widths.insert(spec.layer_widths.end(), hidden.begin(), hidden.end());
  spec.layer_widths.push_back(1);
  spec.activation = activation;
  spec.validate();
  return spec;
}

inline dc::MlpSpec slice_module_spec(std::vector<std::size_t> hidden = {256, 256},
                                     dc::Activation activation = dc::Activation::sine(30.0)) {
  dc::MlpSpec spec;
  spec.layer_widths.push_back(2);
  spec.layer_widths.insert(spec.layer_widths.end(), hidden.begin(), hidden.end());
  spec.layer_widths.push_back(kMotionOutputs + kOutlierOutputs);
  spec.activation = activation;
  spec.heads = {{0, kMotionOutputs, dc::HeadActivation::identity},
                {kMotionOutputs, kOutlierOutputs, dc::HeadActivation::identity}};
  spec.validate();
  return spec;
}

// Which parts of the Slice Module feed the reconstruction.
struct SliceModuleOptions {
  MotionScale scale;
  bool motion = true;   // false: psi frozen at 0
  bool outlier = true;  // false: sigma = omega = 1
};

template <typename Scalar>
struct SliceModulePass {
  std::vector<SliceState> states;
  dc::ForwardResult<Scalar> forward;
};

// sigma = N * softmax(sigma logits), omega = N * softmax(omega logits) over
// the full slice population, so both average exactly one.
inline std::vector<double> population_softmax(const std::vector<double>& logits) {
  const double hi = *std::max_element(logits.begin(), logits.end());
  std::vector<double> out(logits.size());
  double sum = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    out[i] = std::exp(logits[i] - hi);
    sum += out[i];
  }
  const double n = static_cast<double>(logits.size());
  for (auto& v : out) v = n * v / sum;
  return out;
}

template <typename Scalar>
dc::Batch<Scalar> encodings_batch(const std::vector<SliceEncoding>& encodings) {
  std::set<SliceEncoding> seen(encodings.begin(), encodings.end());
  if (seen.size() != encodings.size()) throw ContractError("slice module: duplicate slice encodings");
  if (encodings.empty()) throw ContractError("slice module: no slices");
  dc::Batch<Scalar> x(2, static_cast<Eigen::Index>(encodings.size()));
  for (std::size_t i = 0; i < encodings.size(); ++i) {
    x(0, static_cast<Eigen::Index>(i)) = static_cast<Scalar>(encodings[i].stack);
    x(1, static_cast<Eigen::Index>(i)) = static_cast<Scalar>(encodings[i].slice);
  }
  return x;
}

template <typename Scalar>
SliceModulePass<Scalar> slice_module_forward(const dc::ParamSet<Scalar>& params, const std::vector<SliceEncoding>& encodings,
                                             const SliceModuleOptions& opt = {}) {
  SliceModulePass<Scalar> pass;
  pass.forward = dc::forward(params, encodings_batch<Scalar>(encodings));
  const auto& out = pass.forward.outputs;
  const std::size_t n = encodings.size();
  std::vector<double> sigma_logits(n), omega_logits(n);
  pass.states.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    const auto col = static_cast<Eigen::Index>(i);
    if (opt.motion)
      for (std::size_t k = 0; k < kMotionOutputs; ++k)
        pass.states[i].psi.v[k] = opt.scale.channel(k) * static_cast<double>(out(static_cast<Eigen::Index>(k), col));
    sigma_logits[i] = static_cast<double>(out(kMotionOutputs, col));
    omega_logits[i] = static_cast<double>(out(kMotionOutputs + 1, col));
  }
  if (opt.outlier) {
    const auto sigma = population_softmax(sigma_logits);
    const auto omega = population_softmax(omega_logits);
    for (std::size_t i = 0; i < n; ++i) {
      pass.states[i].sigma = sigma[i];
      pass.states[i].omega = omega[i];
    }
  }
  for (const auto& s : pass.states)
    if (!s.psi.finite() || !std::isfinite(s.sigma) || !std::isfinite(s.omega))
      throw NumericError("slice module: non-finite slice state");
  return pass;
}

template <typename Scalar>
std::vector<SliceState> slice_module_eval(const dc::ParamSet<Scalar>& params, const std::vector<SliceEncoding>& encodings,
                                          const SliceModuleOptions& opt = {}) {
  return slice_module_forward(params, encodings, opt).states;
}

// Upstream gradients of a scalar loss w.r.t. each slice state.
struct SliceStateGradients {
  std::vector<std::array<double, kMotionOutputs>> psi;
  std::vector<double> sigma;
  std::vector<double> omega;

  explicit SliceStateGradients(std::size_t n = 0)
      : psi(n, std::array<double, kMotionOutputs>{}), sigma(n, 0.0), omega(n, 0.0) {}
};

// Pulls state gradients back through the motion scaling and the population
// softmax into Slice Module parameter gradients.
template <typename Scalar>
std::vector<Scalar> slice_module_backward(const dc::ParamSet<Scalar>& params, const SliceModulePass<Scalar>& pass,
                                          const SliceStateGradients& g, const SliceModuleOptions& opt = {}) {
  const std::size_t n = pass.states.size();
  if (g.psi.size() != n || g.sigma.size() != n || g.omega.size() != n)
    throw ShapeError("slice_module_backward: gradient count does not match slice count");
  dc::Batch<Scalar> cot = dc::Batch<Scalar>::Zero(static_cast<Eigen::Index>(kMotionOutputs + kOutlierOutputs),
                                                  static_cast<Eigen::Index>(n));
  if (opt.motion)
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t k = 0; k < kMotionOutputs; ++k)
        cot(static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(i)) = static_cast<Scalar>(g.psi[i][k] * opt.scale.channel(k));
  if (opt.outlier) {
    // y = N softmax(z): dL/dz_k = y_k (g_k - (1/N) sum_j g_j y_j)
    double dot_sigma = 0.0, dot_omega = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      dot_sigma += g.sigma[i] * pass.states[i].sigma;
      dot_omega += g.omega[i] * pass.states[i].omega;
    }
    const double inv_n = 1.0 / static_cast<double>(n);
    for (std::size_t i = 0; i < n; ++i) {
      const auto col = static_cast<Eigen::Index>(i);
      cot(kMotionOutputs, col) = static_cast<Scalar>(pass.states[i].sigma * (g.sigma[i] - inv_n * dot_sigma));
      cot(kMotionOutputs + 1, col) = static_cast<Scalar>(pass.states[i].omega * (g.omega[i] - inv_n * dot_omega));
    }
  }
  return dc::backward(params, pass.forward.tape, cot).params;
}

// Maps world mm into the [-1, 1]^3 frame the SR Module is trained in.
struct NormalizedFrame {
  Eigen::Vector3d center = Eigen::Vector3d::Zero();
  Eigen::Vector3d half = Eigen::Vector3d::Ones();

  Eigen::Vector3d to_normalized(const Eigen::Vector3d& world) const { return (world - center).cwiseQuotient(half); }
  Eigen::Vector3d to_world(const Eigen::Vector3d& n) const { return center + n.cwiseProduct(half); }
};

// SR Module evaluation on normalized coordinates (3 x B).
template <typename Scalar>
dc::Batch<Scalar> sr_eval(const dc::ParamSet<Scalar>& params, const std::type_identity_t<dc::Batch<Scalar>>& points) {
  if (points.rows() != 3) throw ShapeError("sr_eval: points must be 3 x B");
  return dc::evaluate(params, points);
}

}  // namespace svrec::model
