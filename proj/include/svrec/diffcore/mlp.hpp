#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <string>
#include <type_traits>
#include <utility>
#include <vector>

#include "svrec/error.hpp"
#include "svrec/rng.hpp"

namespace svrec::diffcore {

template <typename Scalar>
using Batch = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;  // features x samples

enum class ActivationKind { sine, relu, linear };

struct Activation {
  ActivationKind kind = ActivationKind::sine;
  double w0 = 30.0;  // only meaningful for sine

  static Activation sine(double w0 = 30.0) { return {ActivationKind::sine, w0}; }
  static Activation relu() { return {ActivationKind::relu, 1.0}; }
  static Activation linear() { return {ActivationKind::linear, 1.0}; }

  friend bool operator==(const Activation&, const Activation&) = default;
};

enum class HeadActivation { identity, tanh, sigmoid };

struct HeadSplit {
  std::size_t offset = 0;
  std::size_t width = 0;
  HeadActivation final_activation = HeadActivation::identity;

  friend bool operator==(const HeadSplit&, const HeadSplit&) = default;
};

// Fully connected network description. Hidden layers use `activation`; the
// output layer is affine, followed by the per-head final activation.
struct MlpSpec {
  std::vector<std::size_t> layer_widths;  // input, hidden..., output
  Activation activation;
  std::vector<HeadSplit> heads;  // empty: single identity head

  std::size_t input_width() const { return layer_widths.front(); }
  std::size_t output_width() const { return layer_widths.back(); }
  std::size_t layer_count() const { return layer_widths.size() - 1; }

  void validate() const {
    if (layer_widths.size() < 2) throw ConfigError("MlpSpec: need at least input and output widths");
    for (auto w : layer_widths)
      if (w == 0) throw ConfigError("MlpSpec: layer widths must be positive");
    if (activation.kind == ActivationKind::sine && !(activation.w0 > 0.0))
      throw ConfigError("MlpSpec: sine frequency w0 must be positive");
    if (!heads.empty()) {
      std::size_t expected = 0, total = 0;
      for (const auto& h : heads) {
        if (h.offset != expected || h.width == 0)
          throw ConfigError("MlpSpec: heads must tile the output contiguously");
        expected += h.width;
        total += h.width;
      }
      if (total != output_width()) throw ConfigError("MlpSpec: head widths must sum to the output width");
    }
  }

  friend bool operator==(const MlpSpec&, const MlpSpec&) = default;
};

// Flat parameter layout: for each layer, the weight matrix (rows = fan-out,
// cols = fan-in, column-major) followed by the bias vector.
struct LayerSlot {
  std::size_t weights = 0;
  std::size_t bias = 0;
  std::size_t rows = 0;
  std::size_t cols = 0;
};

class ParamLayout {
 public:
  ParamLayout() = default;
  explicit ParamLayout(const MlpSpec& spec) {
    spec.validate();
    std::size_t offset = 0;
    for (std::size_t l = 0; l < spec.layer_count(); ++l) {
      LayerSlot s;
      s.cols = spec.layer_widths[l];
      s.rows = spec.layer_widths[l + 1];
      s.weights = offset;
      offset += s.rows * s.cols;
      s.bias = offset;
      offset += s.rows;
      slots_.push_back(s);
    }
    size_ = offset;
  }

  std::size_t size() const { return size_; }
  std::size_t layer_count() const { return slots_.size(); }
  const LayerSlot& layer(std::size_t l) const { return slots_.at(l); }

  std::size_t weight_index(std::size_t l, std::size_t row, std::size_t col) const {
    const auto& s = slots_.at(l);
    if (row >= s.rows || col >= s.cols) throw RangeError("ParamLayout: weight index out of range");
    return s.weights + col * s.rows + row;
  }
  std::size_t bias_index(std::size_t l, std::size_t row) const {
    const auto& s = slots_.at(l);
    if (row >= s.rows) throw RangeError("ParamLayout: bias index out of range");
    return s.bias + row;
  }

 private:
  std::vector<LayerSlot> slots_;
  std::size_t size_ = 0;
};

inline std::size_t parameter_count(const MlpSpec& spec) { return ParamLayout(spec).size(); }

template <typename Scalar>
struct ParamSet {
  MlpSpec spec;
  std::vector<Scalar> values;
  std::uint64_t seed = 0;
  // Bumped on every in-place update so stale tapes can be detected.
  std::uint64_t generation = 0;

  ParamSet() = default;
  ParamSet(MlpSpec s, std::vector<Scalar> v, std::uint64_t seed_ = 0)
      : spec(std::move(s)), values(std::move(v)), seed(seed_) {
    if (values.size() != parameter_count(spec)) throw ShapeError("ParamSet: value count does not match spec");
  }

  static ParamSet zeros(const MlpSpec& s) { return ParamSet(s, std::vector<Scalar>(parameter_count(s), Scalar(0))); }

  ParamLayout layout() const { return ParamLayout(spec); }
  std::size_t size() const { return values.size(); }

  template <typename Other>
  ParamSet<Other> cast() const {
    ParamSet<Other> out;
    out.spec = spec;
    out.seed = seed;
    out.values.assign(values.begin(), values.end());
    return out;
  }
};

// SIREN initialization: first layer U(-1/n, 1/n), deeper layers
// U(-sqrt(6/n)/w0, sqrt(6/n)/w0) with n the fan-in; biases zero.
template <typename Scalar = double>
ParamSet<Scalar> init_siren(const MlpSpec& spec, std::uint64_t seed) {
  spec.validate();
  if (spec.activation.kind != ActivationKind::sine) throw ConfigError("init_siren: spec activation is not sine");
  const ParamLayout layout(spec);
  std::vector<Scalar> values(layout.size(), Scalar(0));
  const CounterRng rng(seed, 0x51e1);
  const double w0 = spec.activation.w0;
  for (std::size_t l = 0; l < layout.layer_count(); ++l) {
    const auto& s = layout.layer(l);
    const double n = static_cast<double>(s.cols);
    const double bound = l == 0 ? 1.0 / n : std::sqrt(6.0 / n) / w0;
    const CounterRng layer_rng = rng.derive(l);
    for (std::size_t k = 0; k < s.rows * s.cols; ++k)
      values[s.weights + k] = static_cast<Scalar>(layer_rng.uniform(k, -bound, bound));
  }
  return ParamSet<Scalar>(spec, std::move(values), seed);
}

// Initialization for any activation: SIREN for sine, He-uniform for relu,
// Glorot-uniform for linear. Biases zero.
template <typename Scalar = double>
ParamSet<Scalar> init_params(const MlpSpec& spec, std::uint64_t seed) {
  if (spec.activation.kind == ActivationKind::sine) return init_siren<Scalar>(spec, seed);
  spec.validate();
  const ParamLayout layout(spec);
  std::vector<Scalar> values(layout.size(), Scalar(0));
  const CounterRng rng(seed, 0x1e1u);
  for (std::size_t l = 0; l < layout.layer_count(); ++l) {
    const auto& s = layout.layer(l);
    const double fan_in = static_cast<double>(s.cols), fan_out = static_cast<double>(s.rows);
    const double bound = spec.activation.kind == ActivationKind::relu ? std::sqrt(6.0 / fan_in)
                                                                       : std::sqrt(6.0 / (fan_in + fan_out));
    const CounterRng layer_rng = rng.derive(l);
    for (std::size_t k = 0; k < s.rows * s.cols; ++k)
      values[s.weights + k] = static_cast<Scalar>(layer_rng.uniform(k, -bound, bound));
  }
  return ParamSet<Scalar>(spec, std::move(values), seed);
}

// Intermediate state of one forward pass, consumed by backward().
template <typename Scalar>
struct Tape {
  const ParamSet<Scalar>* params = nullptr;
  std::uint64_t generation = 0;
  std::vector<Batch<Scalar>> layer_inputs;  // input to layer l
  std::vector<Batch<Scalar>> derivatives;   // d(activation)/d(preactivation) per layer
  std::size_t batch_size = 0;
  bool valid = false;
};

template <typename Scalar>
struct ForwardResult {
  Batch<Scalar> outputs;
  Tape<Scalar> tape;
};

template <typename Scalar>
struct Gradients {
  std::vector<Scalar> params;
  Batch<Scalar> inputs;
};

namespace detail {

template <typename Scalar>
using ConstMatrixMap = Eigen::Map<const Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>>;
template <typename Scalar>
using ConstVectorMap = Eigen::Map<const Eigen::Matrix<Scalar, Eigen::Dynamic, 1>>;
template <typename Scalar>
using MatrixMap = Eigen::Map<Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>>;
template <typename Scalar>
using VectorMap = Eigen::Map<Eigen::Matrix<Scalar, Eigen::Dynamic, 1>>;

template <typename Scalar>
void check_params(const ParamSet<Scalar>& params) {
  if (params.values.size() != parameter_count(params.spec))
    throw ShapeError("ParamSet does not match its spec");
}

template <typename Scalar>
void check_inputs(const MlpSpec& spec, const Batch<Scalar>& inputs) {
  if (static_cast<std::size_t>(inputs.rows()) != spec.input_width())
    throw ShapeError("forward: input width " + std::to_string(inputs.rows()) + " does not match spec width " +
                     std::to_string(spec.input_width()));
  if (!inputs.allFinite()) throw NumericError("forward: non-finite input");
}

// Applies the hidden activation in place; optionally stores its derivative.
template <typename Scalar>
void activate_hidden(const Activation& act, Batch<Scalar>& z, Batch<Scalar>* derivative) {
  switch (act.kind) {
    case ActivationKind::sine: {
      const Scalar w0 = static_cast<Scalar>(act.w0);
      z *= w0;
      if (derivative) *derivative = w0 * z.array().cos();
      z = z.array().sin();
      break;
    }
    case ActivationKind::relu:
      if (derivative) *derivative = (z.array() > Scalar(0)).template cast<Scalar>();
      z = z.array().max(Scalar(0));
      break;
    case ActivationKind::linear:
      if (derivative) derivative->setOnes(z.rows(), z.cols());
      break;
  }
}

template <typename Scalar>
void activate_heads(const MlpSpec& spec, Batch<Scalar>& z, Batch<Scalar>* derivative) {
  if (derivative) derivative->setOnes(z.rows(), z.cols());
  for (const auto& h : spec.heads) {
    auto block = z.middleRows(h.offset, h.width);
    switch (h.final_activation) {
      case HeadActivation::identity:
        break;
      case HeadActivation::tanh:
        block = block.array().tanh();
        if (derivative) derivative->middleRows(h.offset, h.width) = Scalar(1) - block.array().square();
        break;
      case HeadActivation::sigmoid:
        block = (Scalar(1) + (-block.array()).exp()).inverse();
        if (derivative)
          derivative->middleRows(h.offset, h.width) = block.array() * (Scalar(1) - block.array());
        break;
    }
  }
}

template <typename Scalar>
Batch<Scalar> run_forward(const ParamSet<Scalar>& params, const Batch<Scalar>& inputs, Tape<Scalar>* tape) {
  const MlpSpec& spec = params.spec;
  check_params(params);
  check_inputs(spec, inputs);
  const ParamLayout layout(spec);
  const std::size_t layers = layout.layer_count();
  if (tape) {
    tape->layer_inputs.resize(layers);
    tape->derivatives.resize(layers);
  }
  Batch<Scalar> a = inputs;
  for (std::size_t l = 0; l < layers; ++l) {
    const auto& s = layout.layer(l);
    // Owned copy: products on a Map take alignment-dependent code paths, so
    // results would depend on where the vector happened to be allocated.
    const Batch<Scalar> w = ConstMatrixMap<Scalar>(params.values.data() + s.weights, s.rows, s.cols);
    ConstVectorMap<Scalar> b(params.values.data() + s.bias, s.rows);
    Batch<Scalar> z(s.rows, a.cols());
    z.noalias() = w * a;
    z.colwise() += b;
    Batch<Scalar>* deriv = tape ? &tape->derivatives[l] : nullptr;
    if (l + 1 < layers)
      activate_hidden(spec.activation, z, deriv);
    else
      activate_heads(spec, z, deriv);
    if (tape)
      tape->layer_inputs[l] = std::move(a);
    a = std::move(z);
  }
  if (tape) {
    tape->params = &params;
    tape->generation = params.generation;
    tape->batch_size = static_cast<std::size_t>(inputs.cols());
    tape->valid = true;
  }
  return a;
}

}  // namespace detail

// Forward pass over a batch (one sample per column), recording a tape.
template <typename Scalar>
ForwardResult<Scalar> forward(const ParamSet<Scalar>& params, const std::type_identity_t<Batch<Scalar>>& inputs) {
  ForwardResult<Scalar> result;
  result.outputs = detail::run_forward(params, inputs, &result.tape);
  return result;
}

// Forward pass without recording (inference).
template <typename Scalar>
Batch<Scalar> evaluate(const ParamSet<Scalar>& params, const std::type_identity_t<Batch<Scalar>>& inputs) {
  return detail::run_forward<Scalar>(params, inputs, nullptr);
}

// Reverse pass: gradients of <cotangents, outputs> w.r.t. parameters and
// inputs. The tape must come from forward() on the same, unmodified params.
template <typename Scalar>
Gradients<Scalar> backward(const ParamSet<Scalar>& params, const Tape<Scalar>& tape,
                           const std::type_identity_t<Batch<Scalar>>& cotangents) {
  if (!tape.valid || tape.params != &params || tape.generation != params.generation)
    throw StateError("backward: tape does not belong to these parameters (stale or mismatched)");
  const MlpSpec& spec = params.spec;
  const ParamLayout layout(spec);
  if (static_cast<std::size_t>(cotangents.rows()) != spec.output_width() ||
      static_cast<std::size_t>(cotangents.cols()) != tape.batch_size)
    throw ShapeError("backward: cotangent batch does not match the forward outputs");

  Gradients<Scalar> grads;
  grads.params.assign(layout.size(), Scalar(0));
  Batch<Scalar> delta = cotangents.cwiseProduct(tape.derivatives.back());
  for (std::size_t l = layout.layer_count(); l-- > 0;) {
    const auto& s = layout.layer(l);
    // owned temporaries for the same alignment reason as in the forward pass
    const Batch<Scalar> w = detail::ConstMatrixMap<Scalar>(params.values.data() + s.weights, s.rows, s.cols);
    Batch<Scalar> gw(s.rows, s.cols);
    gw.noalias() = delta * tape.layer_inputs[l].transpose();
    const Eigen::Matrix<Scalar, Eigen::Dynamic, 1> gb = delta.rowwise().sum();
    detail::MatrixMap<Scalar>(grads.params.data() + s.weights, s.rows, s.cols) = gw;
    detail::VectorMap<Scalar>(grads.params.data() + s.bias, s.rows) = gb;
    Batch<Scalar> upstream(s.cols, delta.cols());
    upstream.noalias() = w.transpose() * delta;
    if (l > 0)
      delta = upstream.cwiseProduct(tape.derivatives[l - 1]);
    else
      grads.inputs = std::move(upstream);
  }
  return grads;
}

}  // namespace svrec::diffcore
