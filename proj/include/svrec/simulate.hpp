#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numeric>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "svrec/error.hpp"
#include "svrec/filter.hpp"
#include "svrec/geometry.hpp"
#include "svrec/parallel.hpp"
#include "svrec/rng.hpp"
#include "svrec/stack.hpp"
#include "svrec/volume.hpp"

namespace svrec::simulate {

using geometry::Mat3;
using geometry::Vec3;

struct Phantom {
  Volume volume;
  Volume mask;  // 1 inside the (dilated) head, 0 outside
  std::uint64_t seed = 0;
  nlohmann::json structure;
};

namespace detail {

inline double smoothstep(double edge0, double edge1, double x) {
  const double t = std::clamp((x - edge0) / (edge1 - edge0), 0.0, 1.0);
  return t * t * (3.0 - 2.0 * t);
}

// 1 well inside the boundary at `edge`, 0 well outside, smooth over `width`.
inline double inside(double rho, double edge, double width) { return 1.0 - smoothstep(edge - width, edge + width, rho); }

struct Ellipsoid {
  Vec3 center;
  Vec3 radii;
  Mat3 rotation = Mat3::Identity();

  double rho(const Vec3& p) const { return (rotation.transpose() * (p - center)).cwiseQuotient(radii).norm(); }
};

// Smooth lattice noise in [-1, 1]: random values on a lattice of spacing
// `cell`, blended with smoothstep weights.
inline double value_noise(const CounterRng& rng, const Vec3& p, double cell) {
  const Vec3 g = p / cell;
  const Eigen::Vector3d fl(std::floor(g.x()), std::floor(g.y()), std::floor(g.z()));
  const Vec3 f = g - fl;
  double acc = 0.0;
  for (int dz = 0; dz < 2; ++dz)
    for (int dy = 0; dy < 2; ++dy)
      for (int dx = 0; dx < 2; ++dx) {
        const auto ix = static_cast<std::int64_t>(fl.x()) + dx + 1024;
        const auto iy = static_cast<std::int64_t>(fl.y()) + dy + 1024;
        const auto iz = static_cast<std::int64_t>(fl.z()) + dz + 1024;
        const auto key = static_cast<std::uint64_t>((iz * 4096 + iy) * 4096 + ix);
        const double value = rng.uniform(key, -1.0, 1.0);
        const double wx = dx ? smoothstep(0, 1, f.x()) : 1.0 - smoothstep(0, 1, f.x());
        const double wy = dy ? smoothstep(0, 1, f.y()) : 1.0 - smoothstep(0, 1, f.y());
        const double wz = dz ? smoothstep(0, 1, f.z()) : 1.0 - smoothstep(0, 1, f.z());
        acc += wx * wy * wz * value;
      }
  return acc;
}

inline Mat3 small_rotation(const CounterRng& rng, std::uint64_t base, double max_rad) {
  return geometry::rotation_matrix(rng.uniform(base, -max_rad, max_rad), rng.uniform(base + 1, -max_rad, max_rad),
                                   rng.uniform(base + 2, -max_rad, max_rad));
}

}  // namespace detail

// Procedural brain-like phantom: nested smooth ellipsoidal shells (fluid,
// cortex-like band, white matter), bright ventricles, darker nuclei and a
// low-frequency texture, Gaussian-smoothed and normalized to [0, 1]. All
// structure sizes scale with the field of view, so different grid sizes give
// the same anatomy. With a non-identity `warp` the anatomy is evaluated at
// warp(x), i.e. the grid holds the phantom moved by warp^-1 without any
// resampling of the finished volume.
inline Phantom make_phantom(std::uint64_t seed, std::size_t size, double spacing_mm,
                            const geometry::RigidTransform& warp = geometry::RigidTransform::identity()) {
  if (size < 16) throw RangeError("make_phantom: size must be at least 16^3");
  if (!(spacing_mm > 0.0)) throw RangeError("make_phantom: spacing must be positive");
  const CounterRng rng(seed, 0xfa47);
  const double half = 0.5 * static_cast<double>(size - 1) * spacing_mm;
  auto jitter = [&](std::uint64_t k, double amount) { return 1.0 + rng.uniform(k, -amount, amount); };

  detail::Ellipsoid head;
  head.radii = half * Vec3(0.72 * jitter(0, 0.06), 0.62 * jitter(1, 0.06), 0.54 * jitter(2, 0.06));
  head.center = half * Vec3(rng.uniform(3, -0.03, 0.03), rng.uniform(4, -0.03, 0.03), rng.uniform(5, -0.03, 0.03));
  head.rotation = detail::small_rotation(rng, 6, 10.0 * geometry::kDegree);

  auto in_head = [&](const Vec3& rel) { return head.center + head.rotation * head.radii.cwiseProduct(rel); };
  std::vector<detail::Ellipsoid> ventricles, nuclei;
  for (int side = -1; side <= 1; side += 2) {
    detail::Ellipsoid v;
    v.center = in_head(Vec3(side * 0.17 * jitter(20 + side, 0.15), 0.06 * jitter(22 + side, 0.5), 0.12));
    v.radii = head.radii.cwiseProduct(Vec3(0.09, 0.34, 0.15) * jitter(24 + side, 0.15));
    v.rotation = head.rotation * detail::small_rotation(rng, 30 + 3 * static_cast<std::uint64_t>(side + 1), 8.0 * geometry::kDegree);
    ventricles.push_back(v);
    detail::Ellipsoid n;
    n.center = in_head(Vec3(side * 0.32 * jitter(40 + side, 0.1), -0.18, -0.12));
    n.radii = head.radii.cwiseProduct(Vec3(0.12, 0.16, 0.14) * jitter(42 + side, 0.15));
    n.rotation = head.rotation;
    nuclei.push_back(n);
  }
  const double fold_freq = 5.0 + 2.0 * rng.uniform(50);
  const double fold_phase0 = rng.uniform(51, 0.0, 6.283), fold_phase1 = rng.uniform(52, 0.0, 6.283);
  const double fluid = 0.80, cortex = 0.32, white = 0.56, ventricle = 0.96, nucleus = 0.42;
  const double edge = 1.2 * spacing_mm / head.radii.minCoeff();  // shell transition half-width in rho units
  const CounterRng texture_rng = rng.derive(99);
  const double texture_cell = half / 3.0;

  Volume vol = Volume::centered({size, size, size}, Vec3::Constant(spacing_mm));
  Volume mask = vol;
  const double mask_rho = 1.0 + 4.0 / head.radii.minCoeff();
  for (std::size_t flat = 0; flat < vol.size(); ++flat) {
    const Vec3 p = warp(vol.world_of(flat));
    const Vec3 q = head.rotation.transpose() * (p - head.center);
    const double rho = q.cwiseQuotient(head.radii).norm();
    const Vec3 dir = q.cwiseQuotient(head.radii) / std::max(rho, 1e-9);
    const double folds = 0.035 * std::sin(fold_freq * dir.x() + fold_phase0) * std::sin(fold_freq * dir.y() + fold_phase1);
    double v = fluid;
    v += (cortex - v) * detail::inside(rho, 0.88 + folds, edge);
    v += (white - v) * detail::inside(rho, 0.72 + folds, edge);
    v += 0.07 * detail::value_noise(texture_rng, p, texture_cell) * detail::inside(rho, 0.72, edge);
    for (const auto& n : nuclei) v += (nucleus - v) * detail::inside(n.rho(p), 1.0, edge * head.radii.minCoeff() / n.radii.minCoeff());
    for (const auto& ve : ventricles) v += (ventricle - v) * detail::inside(ve.rho(p), 1.0, edge * head.radii.minCoeff() / ve.radii.minCoeff());
    v *= detail::inside(rho, 1.0, edge);
    vol.data[flat] = static_cast<float>(v);
    mask.data[flat] = rho <= mask_rho ? 1.0f : 0.0f;
  }
  vol = gaussian_blur(vol, 1.2);
  float hi = 0.0f;
  for (float& v : vol.data) {
    v = std::max(v, 0.0f);
    hi = std::max(hi, v);
  }
  for (float& v : vol.data) v = std::clamp(v / hi, 0.0f, 1.0f);

  Phantom ph;
  ph.volume = std::move(vol);
  ph.mask = std::move(mask);
  ph.seed = seed;
  ph.structure = {{"size", size},
                  {"spacing_mm", spacing_mm},
                  {"head_radii_mm", {head.radii.x(), head.radii.y(), head.radii.z()}},
                  {"head_center_mm", {head.center.x(), head.center.y(), head.center.z()}},
                  {"fold_frequency", fold_freq}};
  return ph;
}

// Placement of a stack: `orientation` columns are the slice x axis, slice y
// axis and slice normal in world coordinates.
struct StackGeometry {
  Mat3 orientation = Mat3::Identity();
  Vec3 center = Vec3::Zero();
  std::size_t nx = 0, ny = 0, n_slices = 0;
  double rx = 1.125, ry = 1.125, rz = 3.3, gap = 0.0;

  geometry::RigidTransform slice_pose(std::size_t s) const {
    geometry::RigidTransform t;
    t.m.topLeftCorner<3, 3>() = orientation;
    const double offset = (static_cast<double>(s) - 0.5 * static_cast<double>(n_slices - 1)) * (rz + gap);
    t.m.topRightCorner<3, 1>() = center + orientation.col(2) * offset;
    return t;
  }
};

// Axis-aligned acquisition planes: 0 axial, 1 coronal, 2 sagittal.
inline Mat3 orthogonal_orientation(std::size_t which) {
  Mat3 m;
  switch (which % 3) {
    case 0: m.col(0) = Vec3::UnitX(); m.col(1) = Vec3::UnitY(); m.col(2) = Vec3::UnitZ(); break;
    case 1: m.col(0) = Vec3::UnitX(); m.col(1) = Vec3::UnitZ(); m.col(2) = -Vec3::UnitY(); break;
    default: m.col(0) = Vec3::UnitY(); m.col(1) = Vec3::UnitZ(); m.col(2) = Vec3::UnitX(); break;
  }
  return m;
}

// Smallest stack in `orientation` whose pixels cover the phantom mask.
inline StackGeometry stack_geometry_for(const Phantom& ph, const Mat3& orientation, double rx, double ry, double rz,
                                        double gap) {
  Vec3 lo = Vec3::Constant(1e300), hi = Vec3::Constant(-1e300);
  for (std::size_t flat = 0; flat < ph.mask.size(); ++flat) {
    if (ph.mask.data[flat] < 0.5f) continue;
    const Vec3 q = orientation.transpose() * ph.mask.world_of(flat);
    lo = lo.cwiseMin(q);
    hi = hi.cwiseMax(q);
  }
  if (lo.x() > hi.x()) throw ContractError("stack_geometry_for: phantom mask is empty");
  StackGeometry g;
  g.orientation = orientation;
  g.center = orientation * (0.5 * (lo + hi));
  g.rx = rx;
  g.ry = ry;
  g.rz = rz;
  g.gap = gap;
  g.nx = static_cast<std::size_t>(std::ceil((hi.x() - lo.x()) / rx)) + 1;
  g.ny = static_cast<std::size_t>(std::ceil((hi.y() - lo.y()) / ry)) + 1;
  g.n_slices = static_cast<std::size_t>(std::ceil((hi.z() - lo.z()) / (rz + gap))) + 1;
  return g;
}

inline constexpr int kSimulationPsfSamples = 128;

// Renders a stack through the Gaussian PSF: each pixel is the mean of
// `psf_samples` trilinear phantom samples at pose * (pixel + u), u ~ N(0, Sigma).
// Slices that do not touch the phantom mask are dropped.
inline SliceStack extract_stack(const Phantom& ph, const StackGeometry& g, std::size_t stack_idx, const CounterRng& rng,
                                int psf_samples = kSimulationPsfSamples) {
  if (g.nx == 0 || g.ny == 0 || g.n_slices == 0) throw ShapeError("extract_stack: empty stack geometry");
  const double radius = 0.5 * (ph.volume.extent_max() - ph.volume.extent_min()).norm() + 1e-9;
  const Vec3 grid_center = 0.5 * (ph.volume.extent_max() + ph.volume.extent_min());
  const geometry::PsfSpec psf = geometry::psf_covariance(g.rx, g.ry, g.rz);

  SliceStack full;
  full.stack_idx = stack_idx;
  full.n_slices = g.n_slices;
  full.nx = g.nx;
  full.ny = g.ny;
  full.rx = g.rx;
  full.ry = g.ry;
  full.rz = g.rz;
  full.gap = g.gap;
  full.pixels.assign(g.n_slices * g.nx * g.ny, 0.0f);
  full.mask.assign(full.pixels.size(), 0);
  for (std::size_t s = 0; s < g.n_slices; ++s) full.poses.push_back(g.slice_pose(s));

  for (std::size_t s = 0; s < g.n_slices; ++s)
    for (std::size_t iy = 0; iy < g.ny; ++iy)
      for (std::size_t ix = 0; ix < g.nx; ++ix)
        if ((full.poses[s](full.local_position(ix, iy)) - grid_center).norm() > radius)
          throw RangeError("extract_stack: stack footprint leaves the phantom field of view");

  parallel_tasks(g.n_slices, [&](std::size_t s) {
    const CounterRng slice_rng = rng.derive(stack_idx * 100003 + s);
    const auto& pose = full.poses[s];
    for (std::size_t iy = 0; iy < g.ny; ++iy)
      for (std::size_t ix = 0; ix < g.nx; ++ix) {
        const Vec3 local = full.local_position(ix, iy);
        const std::size_t idx = full.index(s, iy, ix);
        double acc = 0.0;
        for (int k = 0; k < psf_samples; ++k) {
          const Vec3 u = geometry::psf_offset(psf, slice_rng, idx * static_cast<std::uint64_t>(psf_samples) + static_cast<std::uint64_t>(k));
          acc += ph.volume.sample(pose(local + u));
        }
        full.pixels[idx] = static_cast<float>(std::clamp(acc / psf_samples, 0.0, 1.0));
        full.mask[idx] = ph.mask.sample(pose(local)) > 0.5 ? 1 : 0;
      }
  });

  SliceStack out = full;
  out.pixels.clear();
  out.mask.clear();
  out.poses.clear();
  out.n_slices = 0;
  Vec3 centroid = Vec3::Zero();
  std::size_t count = 0;
  const std::size_t pps = full.pixels_per_slice();
  for (std::size_t s = 0; s < full.n_slices; ++s) {
    if (full.masked_count(s) == 0) continue;
    out.pixels.insert(out.pixels.end(), full.pixels.begin() + static_cast<std::ptrdiff_t>(s * pps),
                      full.pixels.begin() + static_cast<std::ptrdiff_t>((s + 1) * pps));
    out.mask.insert(out.mask.end(), full.mask.begin() + static_cast<std::ptrdiff_t>(s * pps),
                    full.mask.begin() + static_cast<std::ptrdiff_t>((s + 1) * pps));
    out.poses.push_back(full.poses[s]);
    for (std::size_t iy = 0; iy < g.ny; ++iy)
      for (std::size_t ix = 0; ix < g.nx; ++ix)
        if (full.mask[full.index(s, iy, ix)]) {
          centroid += full.poses[s](full.local_position(ix, iy));
          ++count;
        }
    ++out.n_slices;
  }
  if (out.n_slices == 0) throw ContractError("extract_stack: no slice intersects the phantom mask");
  out.pivot = centroid / static_cast<double>(count);
  return out;
}

struct MotionCorruption {
  SliceStack stack;
  std::vector<SliceTruth> truth;
};

// Independent rigid draw per slice about the stack pivot: rotations
// U(-6 mu, 6 mu) degrees, translations U(-4 mu, 4 mu) mm. The corrupted pose
// is perturbation * clean pose.
inline MotionCorruption corrupt_motion(const SliceStack& stack, double mu, const CounterRng& rng) {
  if (!(mu >= 0.0)) throw RangeError("corrupt_motion: mu must be non-negative");
  MotionCorruption out{stack, {}};
  const double max_rot = 6.0 * mu * geometry::kDegree;
  const double max_trans = 4.0 * mu;
  const CounterRng stack_rng = rng.derive(0xc0ffee + stack.stack_idx);
  for (std::size_t s = 0; s < stack.n_slices; ++s) {
    geometry::RigidParams p;
    const std::uint64_t base = 6 * s;
    for (std::size_t k = 0; k < 3; ++k) p.v[k] = max_rot * stack_rng.uniform(base + k, -1.0, 1.0);
    for (std::size_t k = 3; k < 6; ++k) p.v[k] = max_trans * stack_rng.uniform(base + k, -1.0, 1.0);
    SliceTruth t;
    t.stack_idx = stack.stack_idx;
    t.slice_idx = s;
    t.perturbation = geometry::to_matrix_about(p, stack.pivot);
    t.pivot = stack.pivot;
    t.center = stack.poses[s](Vec3::Zero());
    out.stack.poses[s] = geometry::compose(t.perturbation, stack.poses[s]);
    out.truth.push_back(std::move(t));
  }
  return out;
}

struct CorruptionSpec {
  double mu = 0.0;
  double noise_std = 0.0;
  double contrast_range = 0.0;  // per-slice gain drawn from U(1 - r, 1 + r)
  double ghost_prob = 0.0;
  long ghost_shift = 0;  // pixels along y; 0 means half the field of view
  double ghost_weight = 0.3;
  double blur_prob = 0.0;
  double blur_sigma = 1.5;  // pixels
  double dropout_prob = 0.0;
  double dropout_fraction = 0.3;  // fraction of rows zeroed

  // Default schedule: every artifact probability 0.05 mu, noise 0.01 mu,
  // contrast range 0.05 mu.
  static CorruptionSpec for_mu(double mu) {
    CorruptionSpec s;
    s.mu = mu;
    s.noise_std = 0.01 * mu;
    s.contrast_range = 0.05 * mu;
    s.ghost_prob = s.blur_prob = s.dropout_prob = std::min(1.0, 0.05 * mu);
    return s;
  }

  void validate() const {
    for (double p : {ghost_prob, blur_prob, dropout_prob})
      if (!(p >= 0.0 && p <= 1.0)) throw RangeError("CorruptionSpec: probabilities must lie in [0, 1]");
    if (!(mu >= 0.0) || !(noise_std >= 0.0) || !(contrast_range >= 0.0) || contrast_range >= 1.0)
      throw RangeError("CorruptionSpec: invalid magnitude");
    if (!(ghost_weight >= 0.0 && ghost_weight <= 1.0) || !(dropout_fraction >= 0.0 && dropout_fraction <= 1.0))
      throw RangeError("CorruptionSpec: invalid weight or fraction");
  }
};

struct ImageCorruption {
  SliceStack stack;
  std::vector<std::vector<std::string>> labels;  // artifacts applied per slice
};

// Per-slice in-plane artifacts, applied in the order blur, ghosting, dropout,
// contrast, noise; intensities are clamped back to [0, 1].
inline ImageCorruption corrupt_image(const SliceStack& stack, const CorruptionSpec& spec, const CounterRng& rng) {
  spec.validate();
  ImageCorruption out{stack, std::vector<std::vector<std::string>>(stack.n_slices)};
  const std::size_t nx = stack.nx, ny = stack.ny, pps = stack.pixels_per_slice();
  const CounterRng stack_rng = rng.derive(0x1a6e + stack.stack_idx);
  for (std::size_t s = 0; s < stack.n_slices; ++s) {
    const CounterRng r = stack_rng.derive(s);
    std::vector<float> img(stack.pixels.begin() + static_cast<std::ptrdiff_t>(s * pps),
                           stack.pixels.begin() + static_cast<std::ptrdiff_t>((s + 1) * pps));
    auto& labels = out.labels[s];
    if (spec.blur_prob > 0.0 && r.uniform(0) < spec.blur_prob) {
      img = gaussian_blur_2d(img, ny, nx, spec.blur_sigma);
      labels.push_back("blur");
    }
    if (spec.ghost_prob > 0.0 && r.uniform(1) < spec.ghost_prob) {
      const long shift = spec.ghost_shift != 0 ? spec.ghost_shift : static_cast<long>(ny / 2);
      std::vector<float> ghost(img.size());
      for (std::size_t y = 0; y < ny; ++y) {
        const auto src = static_cast<std::size_t>(((static_cast<long>(y) - shift) % static_cast<long>(ny) + static_cast<long>(ny)) %
                                                  static_cast<long>(ny));
        for (std::size_t x = 0; x < nx; ++x) ghost[y * nx + x] = img[src * nx + x];
      }
      const auto w = static_cast<float>(spec.ghost_weight);
      for (std::size_t i = 0; i < img.size(); ++i) img[i] = (1.0f - w) * img[i] + w * ghost[i];
      labels.push_back("ghosting");
    }
    if (spec.dropout_prob > 0.0 && r.uniform(2) < spec.dropout_prob) {
      const auto band = static_cast<std::size_t>(std::round(spec.dropout_fraction * static_cast<double>(ny)));
      const std::size_t start = band >= ny ? 0 : static_cast<std::size_t>(r.index(3, ny - band + 1));
      for (std::size_t y = start; y < std::min(ny, start + band); ++y)
        for (std::size_t x = 0; x < nx; ++x) img[y * nx + x] = 0.0f;
      labels.push_back("dropout");
    }
    if (spec.contrast_range > 0.0) {
      const auto gain = static_cast<float>(r.uniform(4, 1.0 - spec.contrast_range, 1.0 + spec.contrast_range));
      for (auto& v : img) v *= gain;
    }
    if (spec.noise_std > 0.0) {
      const CounterRng noise = r.derive(5);
      for (std::size_t i = 0; i < img.size(); ++i) img[i] += static_cast<float>(spec.noise_std * noise.normal(i));
    }
    for (std::size_t i = 0; i < img.size(); ++i) out.stack.pixels[s * pps + i] = std::clamp(img[i], 0.0f, 1.0f);
  }
  return out;
}

struct DatasetOptions {
  std::size_t phantom_size = 64;
  double phantom_spacing = 1.0;
  double rx = 1.125, ry = 1.125, rz = 3.3, gap = 0.0;
  bool image_artifacts = true;
  int psf_samples = kSimulationPsfSamples;
};

struct Case {
  Task task;
  GroundTruth truth;
  Phantom phantom;
};

// Ghosting plus dropout on round(fraction * n) slices of every stack, chosen
// by a seeded shuffle; all other slices are left untouched.
inline void corrupt_slice_fraction(Case& c, double fraction, const CounterRng& rng) {
  if (!(fraction >= 0.0 && fraction <= 1.0)) throw RangeError("corrupt_slice_fraction: fraction must lie in [0, 1]");
  CorruptionSpec spec;
  spec.ghost_prob = 1.0;
  spec.dropout_prob = 1.0;
  std::size_t offset = 0;
  for (auto& stack : c.task.stacks) {
    const auto hit = corrupt_image(stack, spec, rng.derive(stack.stack_idx));
    std::vector<std::size_t> order(stack.n_slices);
    std::iota(order.begin(), order.end(), std::size_t{0});
    const CounterRng pick = rng.derive(0x5e1 + stack.stack_idx);
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[pick.index(i, i)]);
    const auto count = static_cast<std::size_t>(std::lround(fraction * static_cast<double>(stack.n_slices)));
    const std::size_t pps = stack.pixels_per_slice();
    for (std::size_t j = 0; j < count; ++j) {
      const std::size_t s = order[j];
      std::copy_n(hit.stack.pixels.begin() + static_cast<std::ptrdiff_t>(s * pps), pps,
                  stack.pixels.begin() + static_cast<std::ptrdiff_t>(s * pps));
      auto& t = c.truth.slices[offset + s];
      t.artifacts.insert(t.artifacts.end(), hit.labels[s].begin(), hit.labels[s].end());
      t.corrupted = true;
    }
    offset += stack.n_slices;
  }
}

// Stack orientation for index k: three orthogonal planes, then random
// oblique frames.
inline Mat3 dataset_orientation(std::size_t k, const CounterRng& rng) {
  if (k < 3) return orthogonal_orientation(k);
  const CounterRng r = rng.derive(0x0b11 + k);
  return geometry::rotation_matrix(r.uniform(0, -0.5, 0.5), r.uniform(1, -0.5, 0.5), r.uniform(2, -3.14, 3.14)) *
         orthogonal_orientation(k % 3);
}

// Builds one case: phantom, stacks, motion and (optionally) image corruption.
inline Case make_case(std::uint64_t phantom_seed, double mu, std::size_t n_stacks, const CounterRng& rng,
                      const DatasetOptions& opt) {
  Case c;
  c.phantom = make_phantom(phantom_seed, opt.phantom_size, opt.phantom_spacing);
  c.truth.phantom_seed = phantom_seed;
  for (std::size_t k = 0; k < n_stacks; ++k) {
    const auto g = stack_geometry_for(c.phantom, dataset_orientation(k, rng), opt.rx, opt.ry, opt.rz, opt.gap);
    SliceStack stack = extract_stack(c.phantom, g, k, rng.derive(1), opt.psf_samples);
    auto moved = corrupt_motion(stack, mu, rng.derive(2));
    stack = std::move(moved.stack);
    if (opt.image_artifacts) {
      auto img = corrupt_image(stack, CorruptionSpec::for_mu(mu), rng.derive(3));
      stack = std::move(img.stack);
      for (std::size_t s = 0; s < stack.n_slices; ++s) {
        moved.truth[s].artifacts = img.labels[s];
        moved.truth[s].corrupted = !img.labels[s].empty();
      }
    }
    for (auto& t : moved.truth) c.truth.slices.push_back(std::move(t));
    c.task.stacks.push_back(std::move(stack));
  }
  return c;
}

inline std::vector<Case> make_dataset(std::size_t n_cases, double mu, std::size_t stacks_per_case, std::uint64_t seed,
                                      const DatasetOptions& opt = {}) {
  if (n_cases < 1) throw RangeError("make_dataset: need at least one case");
  if (stacks_per_case < 1) throw RangeError("make_dataset: need at least one stack per case");
  const CounterRng rng(seed, 0xda7a);
  std::vector<Case> cases;
  for (std::size_t i = 0; i < n_cases; ++i) {
    const std::uint64_t phantom_seed = rng.bits(i);
    Case c = make_case(phantom_seed, mu, stacks_per_case, rng.derive(1000 + i), opt);
    c.task.id = "case_" + std::to_string(i);
    cases.push_back(std::move(c));
  }
  return cases;
}

}  // namespace svrec::simulate
