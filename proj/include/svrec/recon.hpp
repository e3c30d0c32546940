#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <array>
#include <chrono>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "svrec/diffcore/adam.hpp"
#include "svrec/diffcore/mlp.hpp"
#include "svrec/diffcore/schedule.hpp"
#include "svrec/error.hpp"
#include "svrec/geometry.hpp"
#include "svrec/model.hpp"
#include "svrec/parallel.hpp"
#include "svrec/rng.hpp"
#include "svrec/stack.hpp"
#include "svrec/volume.hpp"

namespace svrec::recon {

namespace dc = diffcore;
using geometry::Mat3;
using geometry::Vec3;

struct ReconConfig {
  std::vector<std::size_t> sr_hidden = std::vector<std::size_t>(6, 330);
  std::vector<std::size_t> slice_hidden = {256, 256};
  double w0 = 30.0;        // SR Module sine frequency
  double slice_w0 = 30.0;  // Slice Module sine frequency
  dc::ActivationKind sr_activation = dc::ActivationKind::sine;
  dc::ActivationKind slice_activation = dc::ActivationKind::sine;
  double lr_sr = 5e-5;
  double lr_slice = 5e-4;
  double lr_min = 2.5e-5;
  std::size_t batch_size = 12000;
  double alpha = 125.0;       // iteration budget factor, standard initialization
  double alpha_meta = 50.0;   // iteration budget factor, meta-learned initialization
  long k_cap = 64;
  std::uint64_t seed = 0;
  model::MotionScale motion_scale;
  bool motion = true;
  bool outlier = true;
  // Quadratic prior lambda * mean((omega - 1)^2) added to the training loss.
  // Without it the softmax-constrained weights drift to a single slice (the
  // weighted MAE is minimized by putting all weight on the best-fit slice).
  // 0 gives the bare weighted MAE.
  double omega_prior = 0.01;
  double sigma_prior = 0.5;  // same form for sigma; keeps per-slice scales from trading off against the volume
  bool zero_slice_heads = true;  // start from psi = 0, sigma = omega = 1
  double motion_warmup = 0.0;     // fraction of the budget before motion receives gradients
  double bbox_margin = 5.0;         // mm added around the union of stack masks
  std::size_t chunk_points = 8192;  // SR evaluations per work unit
  std::size_t eval_pixels = 8192;   // fixed pixel sample for the deterministic loss
  long eval_k = 16;                 // PSF samples per pixel in the deterministic loss

  dc::MlpSpec sr_spec() const {
    return model::sr_module_spec(sr_hidden, sr_activation == dc::ActivationKind::sine ? dc::Activation::sine(w0)
                                            : sr_activation == dc::ActivationKind::relu ? dc::Activation::relu()
                                                                                        : dc::Activation::linear());
  }
  dc::MlpSpec slice_spec() const {
    return model::slice_module_spec(slice_hidden, slice_activation == dc::ActivationKind::sine ? dc::Activation::sine(slice_w0)
                                                  : slice_activation == dc::ActivationKind::relu ? dc::Activation::relu()
                                                                                                 : dc::Activation::linear());
  }
  model::SliceModuleOptions slice_options() const { return {motion_scale, motion, outlier}; }

  void validate() const {
    if (!(lr_sr > 0.0) || !(lr_slice > 0.0) || !(lr_min > 0.0)) throw ConfigError("learning rates must be positive");
    if (lr_sr < lr_min || lr_slice < lr_min) throw ConfigError("learning rates must not be below lr_min");
    if (batch_size == 0 || !(alpha > 0.0) || !(alpha_meta > 0.0) || k_cap < 1 || chunk_points == 0)
      throw ConfigError("batch size, alpha and k_cap must be positive");
    if (!(w0 > 0.0) || !(slice_w0 > 0.0) || !(bbox_margin >= 0.0)) throw ConfigError("w0 must be positive and bbox_margin non-negative");
    if (eval_pixels == 0 || eval_k < 1) throw ConfigError("evaluation sample must be non-empty");
    if (!(omega_prior >= 0.0) || !(sigma_prior >= 0.0)) throw ConfigError("omega_prior and sigma_prior must be non-negative");
    if (!(motion_warmup >= 0.0 && motion_warmup < 1.0)) throw ConfigError("motion_warmup must lie in [0, 1)");
  }
};

// ceil(alpha * sum |X_i| / batch_size), |X_i| = unmasked pixels of slice i.
inline long iteration_budget(const std::vector<SliceStack>& stacks, std::size_t batch_size, double alpha) {
  if (stacks.empty()) throw ContractError("iteration_budget: no stacks");
  if (batch_size == 0 || !(alpha > 0.0)) throw ConfigError("iteration_budget: batch size and alpha must be positive");
  std::size_t pixels = 0;
  for (const auto& s : stacks) pixels += s.masked_count();
  if (pixels == 0) throw ContractError("iteration_budget: no unmasked pixels");
  const double exact = alpha * static_cast<double>(pixels) / static_cast<double>(batch_size);
  return static_cast<long>(std::ceil(exact - 1e-9 * exact));
}

inline long iteration_budget(const std::vector<SliceStack>& stacks, const ReconConfig& cfg, bool meta_init = false) {
  return iteration_budget(stacks, cfg.batch_size, meta_init ? cfg.alpha_meta : cfg.alpha);
}

template <typename Scalar>
struct ModelParams {
  dc::ParamSet<Scalar> sr;
  dc::ParamSet<Scalar> slice;
};

// Slice metadata flattened across stacks; slice i of the task.
struct SliceInfo {
  std::size_t stack = 0;
  std::size_t index_in_stack = 0;
  geometry::Mat4 pose = geometry::Mat4::Identity();
  Vec3 pivot = Vec3::Zero();
  geometry::PsfSpec psf;
  std::size_t pixel_count = 0;
  model::SliceEncoding encoding;
};

struct Pixel {
  std::uint32_t slice = 0;
  float lx = 0.0f, ly = 0.0f;  // slice-local mm
  float value = 0.0f;
};

// Flattened, read-only view of a task's acquisitions.
struct TaskData {
  std::vector<SliceInfo> slices;
  std::vector<Pixel> pixels;
  model::NormalizedFrame frame;

  std::vector<model::SliceEncoding> encodings() const {
    std::vector<model::SliceEncoding> e;
    e.reserve(slices.size());
    for (const auto& s : slices) e.push_back(s.encoding);
    return e;
  }
};

// Bounding box of all masked pixel centres, grown by `margin` mm.
inline model::NormalizedFrame frame_for(const std::vector<SliceStack>& stacks, double margin) {
  Vec3 lo = Vec3::Constant(1e300), hi = Vec3::Constant(-1e300);
  for (const auto& st : stacks)
    for (std::size_t s = 0; s < st.n_slices; ++s)
      for (std::size_t iy = 0; iy < st.ny; ++iy)
        for (std::size_t ix = 0; ix < st.nx; ++ix) {
          if (!st.mask[st.index(s, iy, ix)]) continue;
          const Vec3 p = st.poses[s](st.local_position(ix, iy));
          lo = lo.cwiseMin(p);
          hi = hi.cwiseMax(p);
        }
  if (lo.x() > hi.x()) throw ContractError("frame_for: no unmasked pixels");
  model::NormalizedFrame f;
  f.center = 0.5 * (lo + hi);
  f.half = (0.5 * (hi - lo)).array() + margin;
  f.half = f.half.cwiseMax(Vec3::Constant(1e-3));
  return f;
}

inline TaskData flatten(const std::vector<SliceStack>& stacks, double margin) {
  if (stacks.empty()) throw ContractError("reconstruct: need at least one stack");
  TaskData data;
  data.frame = frame_for(stacks, margin);
  for (std::size_t k = 0; k < stacks.size(); ++k) {
    const auto& st = stacks[k];
    st.validate();
    const auto psf = geometry::psf_covariance(st.rx, st.ry, st.rz);
    for (std::size_t s = 0; s < st.n_slices; ++s) {
      SliceInfo info;
      info.stack = k;
      info.index_in_stack = s;
      info.pose = st.poses[s].m;
      info.pivot = st.pivot;
      info.psf = psf;
      info.pixel_count = st.masked_count(s);
      info.encoding = model::encode_slice(k, stacks.size(), s, st.n_slices);
      const auto slice_id = static_cast<std::uint32_t>(data.slices.size());
      for (std::size_t iy = 0; iy < st.ny; ++iy)
        for (std::size_t ix = 0; ix < st.nx; ++ix) {
          const std::size_t idx = st.index(s, iy, ix);
          if (!st.mask[idx]) continue;
          const Vec3 local = st.local_position(ix, iy);
          data.pixels.push_back({slice_id, static_cast<float>(local.x()), static_cast<float>(local.y()), st.pixels[idx]});
        }
      data.slices.push_back(info);
    }
  }
  return data;
}

// Total correction T_i = to_matrix_about(psi_i, pivot_i) * nominal pose.
inline geometry::RigidTransform slice_transform(const SliceInfo& info, const geometry::RigidParams& psi) {
  geometry::RigidTransform nominal;
  nominal.m = info.pose;
  geometry::RigidTransform out;
  out.m = geometry::to_matrix_about(psi, info.pivot).m * nominal.m;
  return out;
}

// Monte-Carlo forward model for a single pixel at slice-local position
// `local`: (sigma / K) * sum_k V(T (local + u_k)).
template <typename Scalar>
double simulate_pixel(const dc::ParamSet<Scalar>& sr, const model::NormalizedFrame& frame, const SliceInfo& info,
                      const model::SliceState& state, const std::vector<Vec3>& offsets, const Vec3& local) {
  if (offsets.empty()) throw RangeError("simulate_pixel: K must be at least 1");
  const auto t = slice_transform(info, state.psi);
  dc::Batch<Scalar> pts(3, static_cast<Eigen::Index>(offsets.size()));
  for (std::size_t k = 0; k < offsets.size(); ++k)
    pts.col(static_cast<Eigen::Index>(k)) = frame.to_normalized(t(local + offsets[k])).template cast<Scalar>();
  const auto v = model::sr_eval(sr, pts);
  double acc = 0.0;
  for (Eigen::Index k = 0; k < v.cols(); ++k) acc += static_cast<double>(v(0, k));
  return state.sigma * acc / static_cast<double>(offsets.size());
}

// Batch estimate of the outlier-weighted MAE, normalized by the slice count:
//   L = (1/N) sum_i (omega_i / |X_i|) sum_{x in X_i} |I_i(x) - I^_i(x)|,
// estimated from uniformly sampled pixels with importance weights
// omega_i * P / (N |X_i| B), P = total pixel count. `simulated` already
// carries sigma_i (it is applied inside simulate_pixel).
inline double loss_batch(const std::vector<double>& acquired, const std::vector<double>& simulated,
                         const std::vector<std::size_t>& slice_of_pixel, const std::vector<model::SliceState>& states,
                         const std::vector<std::size_t>& pixel_counts, std::size_t total_pixels) {
  if (acquired.size() != simulated.size() || acquired.size() != slice_of_pixel.size())
    throw ShapeError("loss_batch: batch arrays disagree in length");
  if (states.size() != pixel_counts.size()) throw ShapeError("loss_batch: one state and pixel count per slice");
  if (acquired.empty()) return 0.0;
  const double n = static_cast<double>(states.size());
  const double b = static_cast<double>(acquired.size());
  double loss = 0.0;
  for (std::size_t j = 0; j < acquired.size(); ++j) {
    const std::size_t i = slice_of_pixel[j];
    if (i >= states.size()) throw ContractError("loss_batch: unknown slice tag");
    const double w = states[i].omega * static_cast<double>(total_pixels) / (n * static_cast<double>(pixel_counts[i]) * b);
    loss += w * std::abs(acquired[j] - simulated[j]);
  }
  return loss;
}

struct TraceRow {
  long iteration = 0;
  double loss = 0.0;
  double lr_sr = 0.0;
  double lr_slice = 0.0;
  long k = 0;
};

template <typename Scalar>
struct ReconResult {
  ModelParams<Scalar> params;
  model::NormalizedFrame frame;
  std::vector<model::SliceState> states;
  std::vector<TraceRow> trace;
  std::vector<std::pair<long, double>> eval_trace;  // (iteration, deterministic loss)
  double final_loss = 0.0;                          // deterministic loss after training
  double seconds = 0.0;
  long iterations = 0;
};

template <typename Scalar>
struct Objective {
  double loss = 0.0;
  std::vector<double> sr_grad;
  std::vector<double> slice_grad;
  std::vector<model::SliceState> states;
};

// Random initialization of both modules for `cfg` (seeded by cfg.seed).
template <typename Scalar>
ModelParams<Scalar> initial_params(const ReconConfig& cfg) {
  ModelParams<Scalar> p;
  const CounterRng seeds(cfg.seed, 0x1417);
  p.sr = dc::init_params<Scalar>(cfg.sr_spec(), seeds.bits(0));
  p.slice = dc::init_params<Scalar>(cfg.slice_spec(), seeds.bits(1));
  if (cfg.zero_slice_heads) {
    const auto layout = p.slice.layout();
    const auto& last = layout.layer(layout.layer_count() - 1);
    std::fill(p.slice.values.begin() + static_cast<std::ptrdiff_t>(last.weights),
              p.slice.values.begin() + static_cast<std::ptrdiff_t>(last.weights + last.rows * last.cols), Scalar(0));
  }
  return p;
}

// Which pixels and PSF draws one objective evaluation uses.
struct SampleSpec {
  CounterRng rng;
  std::size_t batch = 0;  // 0: every pixel once, in order
  long k = 1;
  bool motion_gradients = true;
};

// Joint optimization of the SR Module and the Slice Module on one task.
template <typename Scalar = float>
class Reconstructor {
 public:
  Reconstructor(const std::vector<SliceStack>& stacks, ReconConfig cfg, const ModelParams<Scalar>* init = nullptr)
      : cfg_(std::move(cfg)), data_(flatten(stacks, cfg_.bbox_margin)) {
    cfg_.validate();
    const auto sr_spec = cfg_.sr_spec();
    const auto slice_spec = cfg_.slice_spec();
    if (init) {
      if (!(init->sr.spec == sr_spec) || !(init->slice.spec == slice_spec))
        throw ContractError("reconstruct: initialization does not match the configured network specs");
      params_ = *init;
      params_.sr.generation = params_.slice.generation = 0;
    } else {
      params_ = initial_params<Scalar>(cfg_);
    }
    adam_sr_ = dc::AdamState(params_.sr.size());
    adam_slice_ = dc::AdamState(params_.slice.size());
    budget_ = iteration_budget(stacks, cfg_, init != nullptr);
    for (const auto& s : data_.slices) pixel_counts_.push_back(s.pixel_count);
  }

  const ReconConfig& config() const { return cfg_; }
  const TaskData& data() const { return data_; }
  const ModelParams<Scalar>& params() const { return params_; }
  ModelParams<Scalar>& mutable_params() { return params_; }
  long budget() const { return budget_; }
  void set_budget(long iterations) {
    if (iterations < 0) throw RangeError("iteration budget must be non-negative");
    budget_ = iterations;
  }
  long iteration() const { return iteration_; }

  std::vector<model::SliceState> slice_states() const {
    return model::slice_module_eval(params_.slice, data_.encodings(), cfg_.slice_options());
  }

  // Sample used by training step `it`: batch_size uniform pixels, K from the
  // quadratic schedule, all draws keyed on (seed, it).
  SampleSpec training_sample(long it) const {
    SampleSpec s;
    s.rng = CounterRng(cfg_.seed, 0x7a1).derive(static_cast<std::uint64_t>(it));
    s.batch = cfg_.batch_size;
    s.k = geometry::k_schedule(std::min(it, budget_), std::max<long>(budget_, 1), cfg_.k_cap);
    s.motion_gradients = static_cast<double>(it) >= cfg_.motion_warmup * static_cast<double>(budget_);
    return s;
  }

  // Fixed sample for the deterministic loss used in validation and
  // convergence comparisons.
  SampleSpec evaluation_sample() const {
    SampleSpec s;
    s.rng = CounterRng(cfg_.seed, 0xe7a1);
    s.batch = std::min(cfg_.eval_pixels, data_.pixels.size());
    s.k = cfg_.eval_k;
    if (s.batch == data_.pixels.size()) s.batch = 0;
    return s;
  }

  // Loss (and optionally gradients w.r.t. both modules) for a sample.
  Objective<Scalar> evaluate(const ModelParams<Scalar>& params, const SampleSpec& sample, bool gradients) const;

  double evaluation_loss() const { return evaluate(params_, evaluation_sample(), false).loss; }

  // One optimization step; returns the trace row.
  TraceRow step() {
    const long it = iteration_;
    const long horizon = std::max<long>(budget_, 1);
    const long sched_it = std::min(it, horizon);
    const SampleSpec sample = training_sample(it);
    auto obj = evaluate(params_, sample, true);
    if (!std::isfinite(obj.loss)) {
      std::ostringstream msg;
      msg << "reconstruct: loss diverged at iteration " << it << " (loss " << obj.loss << ")";
      const std::size_t from = trace_.size() > 5 ? trace_.size() - 5 : 0;
      for (std::size_t r = from; r < trace_.size(); ++r)
        msg << "\n  it " << trace_[r].iteration << " loss " << trace_[r].loss << " K " << trace_[r].k;
      throw NumericError(msg.str());
    }
    check_mean_one(obj.states);
    TraceRow row;
    row.iteration = it;
    row.loss = obj.loss;
    row.k = sample.k;
    row.lr_sr = dc::cosine_anneal(cfg_.lr_sr, cfg_.lr_min, sched_it, horizon);
    row.lr_slice = dc::cosine_anneal(cfg_.lr_slice, cfg_.lr_min, sched_it, horizon);
    dc::adam_step(params_.sr, obj.sr_grad, adam_sr_, row.lr_sr);
    dc::adam_step(params_.slice, obj.slice_grad, adam_slice_, row.lr_slice);
    trace_.push_back(row);
    ++iteration_;
    return row;
  }

  // Runs until the budget is spent. `eval_every` > 0 records the
  // deterministic loss along the way (iteration 0 included).
  ReconResult<Scalar> run(long eval_every = 0) {
    const auto t0 = std::chrono::steady_clock::now();
    ReconResult<Scalar> result;
    while (iteration_ < budget_) {
      if (eval_every > 0 && iteration_ % eval_every == 0) result.eval_trace.emplace_back(iteration_, evaluation_loss());
      step();
    }
    result.final_loss = evaluation_loss();
    if (!std::isfinite(result.final_loss)) throw NumericError("reconstruct: final loss is not finite");
    if (eval_every > 0) result.eval_trace.emplace_back(iteration_, result.final_loss);
    result.params = params_;
    result.frame = data_.frame;
    result.states = slice_states();
    result.trace = trace_;
    result.iterations = iteration_;
    result.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return result;
  }

 private:
  static void check_mean_one(const std::vector<model::SliceState>& states) {
    double ms = 0.0, mw = 0.0;
    for (const auto& s : states) {
      ms += s.sigma;
      mw += s.omega;
    }
    ms /= static_cast<double>(states.size());
    mw /= static_cast<double>(states.size());
    if (std::abs(ms - 1.0) > 1e-6 || std::abs(mw - 1.0) > 1e-6)
      throw NumericError("slice weights or scales violate the mean-one constraint");
  }

  ReconConfig cfg_;
  TaskData data_;
  ModelParams<Scalar> params_;
  dc::AdamState adam_sr_, adam_slice_;
  std::vector<std::size_t> pixel_counts_;
  std::vector<TraceRow> trace_;
  long budget_ = 0;
  long iteration_ = 0;
};

namespace detail {

// Per-work-unit partial sums, reduced in unit order.
struct UnitAccumulator {
  double loss = 0.0;
  std::vector<double> sr_grad;
  std::vector<Mat3> rot_moment;  // sum g_q (p - c)^T per slice
  std::vector<Vec3> trans_grad;  // sum g_q per slice
  std::vector<double> sigma_grad, omega_grad;
};

}  // namespace detail

template <typename Scalar>
Objective<Scalar> Reconstructor<Scalar>::evaluate(const ModelParams<Scalar>& params, const SampleSpec& sample,
                                                  bool gradients) const {
  const std::size_t n_slices = data_.slices.size();
  const auto opts = cfg_.slice_options();
  auto pass = model::slice_module_forward(params.slice, data_.encodings(), opts);
  const auto& states = pass.states;

  std::vector<geometry::Mat4> transforms(n_slices);
  for (std::size_t i = 0; i < n_slices; ++i) transforms[i] = slice_transform(data_.slices[i], states[i].psi).m;

  const std::size_t total_pixels = data_.pixels.size();
  const std::size_t batch = sample.batch == 0 ? total_pixels : sample.batch;
  const std::size_t k = static_cast<std::size_t>(sample.k);
  const std::size_t unit_pixels = std::max<std::size_t>(1, cfg_.chunk_points / k);
  const std::size_t units = (batch + unit_pixels - 1) / unit_pixels;
  const double n = static_cast<double>(n_slices);
  const Vec3 inv_half = data_.frame.half.cwiseInverse();

  std::vector<detail::UnitAccumulator> acc(units);
  parallel_tasks(units, [&](std::size_t u) {
    auto& a = acc[u];
    const std::size_t first = u * unit_pixels;
    const std::size_t count = std::min(unit_pixels, batch - first);
    std::vector<std::size_t> pix(count);
    for (std::size_t j = 0; j < count; ++j)
      pix[j] = sample.batch == 0 ? first + j : static_cast<std::size_t>(sample.rng.index(first + j, total_pixels));

    dc::Batch<Scalar> pts(3, static_cast<Eigen::Index>(count * k));
    std::vector<Vec3> rel(count * k);  // nominal world point minus pivot
    const CounterRng psf_rng = sample.rng.derive(0x9f5);
    for (std::size_t j = 0; j < count; ++j) {
      const Pixel& px = data_.pixels[pix[j]];
      const SliceInfo& info = data_.slices[px.slice];
      const auto& t = transforms[px.slice];
      const Vec3 local(px.lx, px.ly, 0.0);
      for (std::size_t s = 0; s < k; ++s) {
        const Vec3 offset = geometry::psf_offset(info.psf, psf_rng, (first + j) * k + s);
        const Vec3 p_local = local + offset;
        const Vec3 nominal = info.pose.topLeftCorner<3, 3>() * p_local + info.pose.topRightCorner<3, 1>();
        rel[j * k + s] = nominal - info.pivot;
        const Vec3 q = t.topLeftCorner<3, 3>() * p_local + t.topRightCorner<3, 1>();
        pts.col(static_cast<Eigen::Index>(j * k + s)) = data_.frame.to_normalized(q).template cast<Scalar>();
      }
    }

    std::optional<dc::ForwardResult<Scalar>> fwd;
    dc::Batch<Scalar> values;
    if (gradients) {
      fwd = dc::forward(params.sr, pts);
      values = fwd->outputs;
    } else {
      values = dc::evaluate(params.sr, pts);
    }

    if (gradients) {
      a.rot_moment.assign(n_slices, Mat3::Zero());
      a.trans_grad.assign(n_slices, Vec3::Zero());
      a.sigma_grad.assign(n_slices, 0.0);
      a.omega_grad.assign(n_slices, 0.0);
    }
    dc::Batch<Scalar> cot(1, static_cast<Eigen::Index>(count * k));
    for (std::size_t j = 0; j < count; ++j) {
      const Pixel& px = data_.pixels[pix[j]];
      const std::size_t i = px.slice;
      double mean_v = 0.0;
      for (std::size_t s = 0; s < k; ++s) mean_v += static_cast<double>(values(0, static_cast<Eigen::Index>(j * k + s)));
      mean_v /= static_cast<double>(k);
      const double simulated = states[i].sigma * mean_v;
      const double residual = static_cast<double>(px.value) - simulated;
      const double base = static_cast<double>(total_pixels) /
                          (n * static_cast<double>(data_.slices[i].pixel_count) * static_cast<double>(batch));
      const double weight = states[i].omega * base;
      a.loss += weight * std::abs(residual);
      if (!gradients) continue;
      const double sign = residual > 0.0 ? 1.0 : (residual < 0.0 ? -1.0 : 0.0);
      const double d_sim = -weight * sign;  // dL / d simulated
      a.sigma_grad[i] += d_sim * mean_v;
      a.omega_grad[i] += base * std::abs(residual);
      const double d_value = d_sim * states[i].sigma / static_cast<double>(k);
      for (std::size_t s = 0; s < k; ++s) cot(0, static_cast<Eigen::Index>(j * k + s)) = static_cast<Scalar>(d_value);
    }
    if (!gradients) return;

    auto g = dc::backward(params.sr, fwd->tape, cot);
    a.sr_grad.assign(g.params.begin(), g.params.end());
    if (!opts.motion || !sample.motion_gradients) return;
    for (std::size_t j = 0; j < count; ++j) {
      const std::size_t i = data_.pixels[pix[j]].slice;
      for (std::size_t s = 0; s < k; ++s) {
        const auto col = static_cast<Eigen::Index>(j * k + s);
        const Vec3 g_q = g.inputs.col(col).template cast<double>().cwiseProduct(inv_half);
        a.trans_grad[i] += g_q;
        a.rot_moment[i] += g_q * rel[j * k + s].transpose();
      }
    }
  });

  Objective<Scalar> obj;
  obj.states = states;
  for (const auto& a : acc) obj.loss += a.loss;
  const bool prior = opts.outlier && (cfg_.omega_prior > 0.0 || cfg_.sigma_prior > 0.0);
  if (prior)
    for (const auto& st : states)
      obj.loss += (cfg_.omega_prior * (st.omega - 1.0) * (st.omega - 1.0) + cfg_.sigma_prior * (st.sigma - 1.0) * (st.sigma - 1.0)) / n;
  if (!gradients) return obj;

  obj.sr_grad.assign(params.sr.size(), 0.0);
  model::SliceStateGradients sg(n_slices);
  for (const auto& a : acc) {
    for (std::size_t p = 0; p < a.sr_grad.size(); ++p) obj.sr_grad[p] += a.sr_grad[p];
    for (std::size_t i = 0; i < n_slices; ++i) {
      sg.sigma[i] += a.sigma_grad[i];
      sg.omega[i] += a.omega_grad[i];
    }
  }
  if (prior)
    for (std::size_t i = 0; i < n_slices; ++i) {
      sg.omega[i] += 2.0 * cfg_.omega_prior * (states[i].omega - 1.0) / n;
      sg.sigma[i] += 2.0 * cfg_.sigma_prior * (states[i].sigma - 1.0) / n;
    }
  if (opts.motion && sample.motion_gradients) {
    for (std::size_t i = 0; i < n_slices; ++i) {
      Mat3 moment = Mat3::Zero();
      Vec3 trans = Vec3::Zero();
      for (const auto& a : acc) {
        moment += a.rot_moment[i];
        trans += a.trans_grad[i];
      }
      const auto& psi = states[i].psi;
      const auto jac = geometry::rotation_jacobian(psi.rot(0), psi.rot(1), psi.rot(2));
      for (std::size_t axis = 0; axis < 3; ++axis) sg.psi[i][axis] = jac[axis].cwiseProduct(moment).sum();
      for (std::size_t axis = 0; axis < 3; ++axis) sg.psi[i][3 + axis] = trans[static_cast<Eigen::Index>(axis)];
    }
  }
  auto slice_grad = model::slice_module_backward(params.slice, pass, sg, opts);
  obj.slice_grad.assign(slice_grad.begin(), slice_grad.end());
  return obj;
}

// Isotropic grid over the data extent of a frame (its box minus `margin`),
// centred on the frame centre.
inline Volume render_grid(const model::NormalizedFrame& frame, double margin, double spacing) {
  if (!(spacing > 0.0) || !std::isfinite(spacing)) throw RangeError("render: spacing must be positive");
  std::array<std::size_t, 3> shape{};
  Vec3 origin;
  for (int a = 0; a < 3; ++a) {
    const double extent = std::max(frame.half[a] - margin, spacing);
    shape[static_cast<std::size_t>(a)] = static_cast<std::size_t>(std::floor(2.0 * extent / spacing + 1e-9)) + 1;
    origin[a] = frame.center[a] - 0.5 * static_cast<double>(shape[static_cast<std::size_t>(a)] - 1) * spacing;
  }
  return Volume(shape, Vec3::Constant(spacing), origin);
}

// Dense evaluation of the SR Module on the centres of `grid`, clamped to [0, 1].
template <typename Scalar>
Volume render(const dc::ParamSet<Scalar>& sr, const model::NormalizedFrame& frame, Volume grid) {
  grid.validate();
  if (grid.size() == 0) throw RangeError("render: degenerate grid");
  const std::size_t chunk = 16384;
  const std::size_t units = (grid.size() + chunk - 1) / chunk;
  parallel_tasks(units, [&](std::size_t u) {
    const std::size_t first = u * chunk;
    const std::size_t count = std::min(chunk, grid.size() - first);
    dc::Batch<Scalar> pts(3, static_cast<Eigen::Index>(count));
    for (std::size_t j = 0; j < count; ++j)
      pts.col(static_cast<Eigen::Index>(j)) = frame.to_normalized(grid.world_of(first + j)).template cast<Scalar>();
    const auto v = model::sr_eval(sr, pts);
    for (std::size_t j = 0; j < count; ++j)
      grid.data[first + j] = std::clamp(static_cast<float>(v(0, static_cast<Eigen::Index>(j))), 0.0f, 1.0f);
  });
  return grid;
}

template <typename Scalar = float>
ReconResult<Scalar> reconstruct(const std::vector<SliceStack>& stacks, const ReconConfig& cfg,
                                const ModelParams<Scalar>* init = nullptr, long eval_every = 0) {
  Reconstructor<Scalar> r(stacks, cfg, init);
  return r.run(eval_every);
}

}  // namespace svrec::recon
