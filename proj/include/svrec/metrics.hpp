#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <optional>
#include <vector>

#include <json.hpp>

#include "svrec/error.hpp"
#include "svrec/filter.hpp"
#include "svrec/geometry.hpp"
#include "svrec/model.hpp"
#include "svrec/parallel.hpp"
#include "svrec/stack.hpp"
#include "svrec/volume.hpp"

namespace svrec::metrics {

using geometry::Mat3;
using geometry::RigidTransform;
using geometry::Vec3;

namespace detail {

inline void require_same_grid(const Volume& a, const Volume& b, const char* what) {
  a.validate();
  b.validate();
  if (!a.same_grid(b)) throw ShapeError(std::string(what) + ": volumes are not on the same grid");
}

inline std::vector<std::size_t> voxels_in(const Volume& ref, const Volume* mask) {
  std::vector<std::size_t> idx;
  if (mask && !mask->same_grid(ref)) throw ShapeError("metrics: mask is not on the volume grid");
  idx.reserve(ref.size());
  for (std::size_t f = 0; f < ref.size(); ++f)
    if (!mask || mask->data[f] > 0.5f) idx.push_back(f);
  if (idx.empty()) throw ContractError("metrics: empty mask");
  return idx;
}

}  // namespace detail

// 10 log10(range^2 / MSE) over masked voxels; +inf when identical.
inline double psnr(const Volume& a, const Volume& b, const Volume* mask = nullptr, double data_range = 1.0) {
  detail::require_same_grid(a, b, "psnr");
  const auto idx = detail::voxels_in(a, mask);
  double se = 0.0;
  for (auto f : idx) {
    const double d = static_cast<double>(a.data[f]) - static_cast<double>(b.data[f]);
    se += d * d;
  }
  const double mse = se / static_cast<double>(idx.size());
  if (mse == 0.0) return std::numeric_limits<double>::infinity();
  return 10.0 * std::log10(data_range * data_range / mse);
}

struct SsimOptions {
  double sigma = 1.5;
  std::size_t window = 11;
  double k1 = 0.01, k2 = 0.03;
  double data_range = 1.0;
};

// Mean local SSIM over masked voxels, 3D Gaussian-weighted windows.
inline double ssim(const Volume& a, const Volume& b, const Volume* mask = nullptr, const SsimOptions& opt = {}) {
  detail::require_same_grid(a, b, "ssim");
  for (auto n : a.shape)
    if (n < opt.window) throw ShapeError("ssim: volume smaller than the window");
  const auto taps = gaussian_kernel(opt.sigma, opt.window / 2);
  const std::size_t n = a.size();
  std::vector<double> x(a.data.begin(), a.data.end()), y(b.data.begin(), b.data.end()), xx(n), yy(n), xy(n);
  for (std::size_t i = 0; i < n; ++i) {
    xx[i] = x[i] * x[i];
    yy[i] = y[i] * y[i];
    xy[i] = x[i] * y[i];
  }
  const auto mx = separable_filter(x, a.shape, taps);
  const auto my = separable_filter(y, a.shape, taps);
  const auto mxx = separable_filter(xx, a.shape, taps);
  const auto myy = separable_filter(yy, a.shape, taps);
  const auto mxy = separable_filter(xy, a.shape, taps);
  const double c1 = std::pow(opt.k1 * opt.data_range, 2), c2 = std::pow(opt.k2 * opt.data_range, 2);
  double acc = 0.0;
  const auto idx = detail::voxels_in(a, mask);
  for (auto f : idx) {
    const double vx = mxx[f] - mx[f] * mx[f], vy = myy[f] - my[f] * my[f], cov = mxy[f] - mx[f] * my[f];
    acc += ((2 * mx[f] * my[f] + c1) * (2 * cov + c2)) / ((mx[f] * mx[f] + my[f] * my[f] + c1) * (vx + vy + c2));
  }
  return std::clamp(acc / static_cast<double>(idx.size()), -1.0, 1.0);
}

// Pearson correlation over masked voxels.
inline double ncc(const Volume& a, const Volume& b, const Volume* mask = nullptr) {
  detail::require_same_grid(a, b, "ncc");
  const auto idx = detail::voxels_in(a, mask);
  double ma = 0.0, mb = 0.0;
  for (auto f : idx) {
    ma += a.data[f];
    mb += b.data[f];
  }
  ma /= static_cast<double>(idx.size());
  mb /= static_cast<double>(idx.size());
  double sab = 0.0, saa = 0.0, sbb = 0.0;
  for (auto f : idx) {
    const double da = a.data[f] - ma, db = b.data[f] - mb;
    sab += da * db;
    saa += da * da;
    sbb += db * db;
  }
  if (saa == 0.0 || sbb == 0.0) throw NumericError("ncc: zero variance");
  return std::clamp(sab / std::sqrt(saa * sbb), -1.0, 1.0);
}

struct RegistrationOptions {
  int levels = 3;
  double rotation_scale = 50.0;  // mm per radian when mixing rotation and translation steps
  double initial_step = 2.0;     // mm-equivalent
  double min_step = 0.005;
  int max_iterations = 200;      // per level
  std::size_t max_points = 60000;
};

struct Registration {
  RigidTransform transform;  // moving(transform(x)) ~ fixed(x)
  double ncc_before = 0.0;
  double ncc_after = 0.0;
  bool fallback = false;  // optimization did not improve on init
};

namespace detail {

struct SampledNcc {
  const Volume* moving = nullptr;
  std::vector<Vec3> points;
  std::vector<double> fixed;  // centred, unit norm
  Vec3 pivot = Vec3::Zero();

  SampledNcc(const Volume& moving_, const Volume& fixed_vol, const std::vector<std::size_t>& voxels, Vec3 pivot_)
      : moving(&moving_), pivot(pivot_) {
    for (auto f : voxels) {
      points.push_back(fixed_vol.world_of(f));
      fixed.push_back(fixed_vol.data[f]);
    }
    normalize(fixed);
  }

  static bool normalize(std::vector<double>& v) {
    double m = 0.0;
    for (double x : v) m += x;
    m /= static_cast<double>(v.size());
    double ss = 0.0;
    for (double& x : v) {
      x -= m;
      ss += x * x;
    }
    if (!(ss > 0.0)) return false;
    const double inv = 1.0 / std::sqrt(ss);
    for (double& x : v) x *= inv;
    return true;
  }

  double operator()(const RigidTransform& t) const {
    std::vector<double> mv(points.size());
    for (std::size_t i = 0; i < points.size(); ++i) mv[i] = moving->sample(t(points[i]));
    if (!normalize(mv)) return -1.0;
    double acc = 0.0;
    for (std::size_t i = 0; i < mv.size(); ++i) acc += mv[i] * fixed[i];
    return acc;
  }
};

}  // namespace detail

// Rigid alignment maximizing NCC: moving(G x) ~ fixed(x) over the fixed mask.
// Coarse-to-fine over 3 blur levels with normalized-gradient ascent (central
// differences) and an adaptive step.
inline Registration register_rigid(const Volume& moving, const Volume& fixed, const Volume* fixed_mask = nullptr,
                                   const RigidTransform& init = RigidTransform::identity(),
                                   const RegistrationOptions& opt = {}) {
  moving.validate();
  fixed.validate();
  if (!init.is_rigid(1e-6)) throw NumericError("register_rigid: init is not rigid");
  const auto all = detail::voxels_in(fixed, fixed_mask);
  Vec3 pivot = Vec3::Zero();
  for (auto f : all) pivot += fixed.world_of(f);
  pivot /= static_cast<double>(all.size());

  auto compose_with = [&](const geometry::RigidParams& p) {
    RigidTransform t;
    t.m = geometry::to_matrix_about(p, pivot).m * init.m;
    return t;
  };

  Registration out;
  geometry::RigidParams psi;
  {
    std::vector<std::size_t> pts;
    const std::size_t stride = std::max<std::size_t>(1, all.size() / opt.max_points + 1);
    for (std::size_t i = 0; i < all.size(); i += stride) pts.push_back(all[i]);
    const detail::SampledNcc full(moving, fixed, pts, pivot);
    out.ncc_before = full(init);
  }

  for (int level = opt.levels - 1; level >= 0; --level) {
    const double blur = level == 0 ? 0.0 : std::pow(2.0, level - 1);
    const Volume mv = blur > 0.0 ? gaussian_blur(moving, blur) : moving;
    const Volume fx = blur > 0.0 ? gaussian_blur(fixed, blur) : fixed;
    std::vector<std::size_t> pts;
    const std::size_t stride = std::max<std::size_t>(std::size_t{1} << level, all.size() / opt.max_points + 1);
    for (std::size_t i = 0; i < all.size(); i += stride) pts.push_back(all[i]);
    const detail::SampledNcc objective(mv, fx, pts, pivot);

    // BFGS on -NCC in mm-equivalent units u (rotations scaled by
    // rotation_scale); plain gradient ascent stalls along the flat rotation
    // directions of near-symmetric anatomy.
    using Vec6 = Eigen::Matrix<double, 6, 1>;
    const geometry::RigidParams base = psi;
    auto params_of = [&](const Vec6& u) {
      geometry::RigidParams q = base;
      for (int k = 0; k < 6; ++k) q.v[static_cast<std::size_t>(k)] += k < 3 ? u[k] / opt.rotation_scale : u[k];
      return q;
    };
    auto f = [&](const Vec6& u) { return -objective(compose_with(params_of(u))); };
    const double h = 0.05;
    auto grad = [&](const Vec6& u) {
      Vec6 g;
      for (int k = 0; k < 6; ++k) {
        Vec6 a = u, b = u;
        a[k] += h;
        b[k] -= h;
        g[k] = (f(a) - f(b)) / (2 * h);
      }
      return g;
    };
    const double step0 = opt.initial_step / std::pow(2.0, opt.levels - 1 - level);
    Vec6 u = Vec6::Zero();
    double fu = f(u);
    Vec6 g = grad(u);
    Eigen::Matrix<double, 6, 6> hinv = Eigen::Matrix<double, 6, 6>::Identity() * (step0 / std::max(g.norm(), 1e-12));
    for (int it = 0; it < opt.max_iterations; ++it) {
      if (!(g.norm() > 0.0)) break;
      Vec6 d = -hinv * g;
      if (!(d.dot(g) < 0.0)) {
        hinv = Eigen::Matrix<double, 6, 6>::Identity() * (step0 / g.norm());
        d = -hinv * g;
      }
      double t = 1.0, ft = f(u + d);
      while (ft > fu + 1e-4 * t * d.dot(g) && t * d.norm() > opt.min_step) {
        t *= 0.5;
        ft = f(u + t * d);
      }
      if (!(ft < fu)) break;
      const Vec6 sk = t * d;
      u += sk;
      fu = ft;
      const Vec6 gn = grad(u);
      const Vec6 yk = gn - g;
      g = gn;
      const double sy = sk.dot(yk);
      if (sy > 1e-12) {
        const Eigen::Matrix<double, 6, 6> eye = Eigen::Matrix<double, 6, 6>::Identity();
        hinv = (eye - sk * yk.transpose() / sy) * hinv * (eye - yk * sk.transpose() / sy) + sk * sk.transpose() / sy;
      }
      if (sk.norm() < opt.min_step) break;
    }
    psi = params_of(u);
  }

  std::vector<std::size_t> pts;
  const std::size_t stride = std::max<std::size_t>(1, all.size() / opt.max_points + 1);
  for (std::size_t i = 0; i < all.size(); i += stride) pts.push_back(all[i]);
  const detail::SampledNcc full(moving, fixed, pts, pivot);
  out.transform = compose_with(psi);
  out.ncc_after = full(out.transform);
  if (!(out.ncc_after >= out.ncc_before)) {
    out.transform = init;
    out.ncc_after = out.ncc_before;
    out.fallback = true;
  }
  return out;
}

struct MotionSummary {
  std::vector<double> rotation_deg;  // per slice
  std::vector<double> translation_mm;
  double mean_rotation_deg = 0.0, median_rotation_deg = 0.0, max_rotation_deg = 0.0;
  double mean_translation_mm = 0.0, median_translation_mm = 0.0, max_translation_mm = 0.0;
};

namespace detail {

inline void summarize(const std::vector<double>& v, double& mean, double& median, double& max) {
  std::vector<double> s = v;
  std::sort(s.begin(), s.end());
  mean = 0.0;
  for (double x : s) mean += x;
  mean /= static_cast<double>(s.size());
  const std::size_t n = s.size();
  median = n % 2 ? s[n / 2] : 0.5 * (s[n / 2 - 1] + s[n / 2]);
  max = s.back();
}

}  // namespace detail

// Residual of slice i after gauge removal: E_i = G^-1 T_i D_i, where D_i is the
// injected perturbation and T_i the estimated correction. Reported as the
// angle of E_i and the displacement of the clean slice centre.
inline MotionSummary motion_error(const std::vector<RigidTransform>& estimated, const GroundTruth& truth,
                                  const RigidTransform& gauge) {
  if (estimated.size() != truth.slices.size()) throw ContractError("motion_error: slice count mismatch");
  if (estimated.empty()) throw ContractError("motion_error: no slices");
  const RigidTransform g_inv = geometry::invert(gauge);
  MotionSummary out;
  for (std::size_t i = 0; i < estimated.size(); ++i) {
    const auto& t = truth.slices[i];
    RigidTransform e;
    e.m = g_inv.m * estimated[i].m * t.perturbation.m;
    out.rotation_deg.push_back(geometry::rotation_angle(e) / geometry::kDegree);
    out.translation_mm.push_back((e(t.center) - t.center).norm());
  }
  detail::summarize(out.rotation_deg, out.mean_rotation_deg, out.median_rotation_deg, out.max_rotation_deg);
  detail::summarize(out.translation_mm, out.mean_translation_mm, out.median_translation_mm, out.max_translation_mm);
  return out;
}

inline MotionSummary motion_error(const std::vector<model::SliceState>& estimated, const GroundTruth& truth,
                                  const RigidTransform& gauge) {
  if (estimated.size() != truth.slices.size()) throw ContractError("motion_error: slice count mismatch");
  std::vector<RigidTransform> t;
  for (std::size_t i = 0; i < estimated.size(); ++i)
    t.push_back(geometry::to_matrix_about(estimated[i].psi, truth.slices[i].pivot));
  return motion_error(t, truth, gauge);
}

// Trilinear upsampling of one stack onto `grid` using its recorded geometry
// (parallel, evenly spaced slices); voxels outside the stack are 0.
inline Volume stack_upsample(const SliceStack& st, Volume grid) {
  st.validate();
  const Mat3 r = st.poses.front().rotation();
  const Vec3 o = st.poses.front().translation();
  const double dz = st.rz + st.gap;
  auto pixel = [&](long s, long iy, long ix) -> double {
    return st.pixels[st.index(static_cast<std::size_t>(s), static_cast<std::size_t>(iy), static_cast<std::size_t>(ix))];
  };
  for (std::size_t f = 0; f < grid.size(); ++f) {
    const Vec3 q = r.transpose() * (grid.world_of(f) - o);
    const double c[3] = {q.x() / st.rx + 0.5 * static_cast<double>(st.nx - 1),
                         q.y() / st.ry + 0.5 * static_cast<double>(st.ny - 1), q.z() / dz};
    const double n[3] = {static_cast<double>(st.nx), static_cast<double>(st.ny), static_cast<double>(st.n_slices)};
    long b[3];
    double w[3];
    bool inside = true;
    for (int a = 0; a < 3; ++a) {
      if (!(c[a] >= 0.0) || c[a] > n[a] - 1.0) inside = false;
      b[a] = std::min(static_cast<long>(std::floor(c[a])), static_cast<long>(n[a]) - 2);
      b[a] = std::max(b[a], 0L);
      w[a] = c[a] - static_cast<double>(b[a]);
    }
    if (!inside) {
      grid.data[f] = 0.0f;
      continue;
    }
    double acc = 0.0;
    for (int dzs = 0; dzs < 2; ++dzs)
      for (int dy = 0; dy < 2; ++dy)
        for (int dx = 0; dx < 2; ++dx) {
          const long s = std::min<long>(b[2] + dzs, static_cast<long>(st.n_slices) - 1);
          const long iy = std::min<long>(b[1] + dy, static_cast<long>(st.ny) - 1);
          const long ix = std::min<long>(b[0] + dx, static_cast<long>(st.nx) - 1);
          const double wt = (dx ? w[0] : 1 - w[0]) * (dy ? w[1] : 1 - w[1]) * (dzs ? w[2] : 1 - w[2]);
          if (wt != 0.0) acc += wt * pixel(s, iy, ix);
        }
    grid.data[f] = static_cast<float>(acc);
  }
  return grid;
}

struct EvalReport {
  double psnr = 0.0;
  double ssim = 0.0;
  double ncc = 0.0;
  std::optional<MotionSummary> motion;
  RigidTransform registration;
  bool registration_fallback = false;
};

inline nlohmann::json number_or_sentinel(double v) {
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  return v;
}

inline nlohmann::json to_json(const EvalReport& r) {
  nlohmann::json j;
  j["psnr"] = number_or_sentinel(r.psnr);
  j["ssim"] = r.ssim;
  j["ncc"] = r.ncc;
  nlohmann::json m = nlohmann::json::array();
  for (int row = 0; row < 4; ++row)
    m.push_back({r.registration.m(row, 0), r.registration.m(row, 1), r.registration.m(row, 2), r.registration.m(row, 3)});
  j["registration"] = m;
  j["registration_fallback"] = r.registration_fallback;
  if (r.motion) {
    const auto& s = *r.motion;
    j["motion"] = {{"mean_rotation_deg", s.mean_rotation_deg},     {"median_rotation_deg", s.median_rotation_deg},
                   {"max_rotation_deg", s.max_rotation_deg},       {"mean_translation_mm", s.mean_translation_mm},
                   {"median_translation_mm", s.median_translation_mm}, {"max_translation_mm", s.max_translation_mm},
                   {"rotation_deg", s.rotation_deg},               {"translation_mm", s.translation_mm}};
  }
  return j;
}

// Registers `recon` onto `reference`, then scores the aligned volume inside
// the reference mask.
inline EvalReport evaluate(const Volume& recon, const Volume& reference, const Volume* mask,
                           const std::vector<model::SliceState>* states = nullptr, const GroundTruth* truth = nullptr,
                           bool register_first = true) {
  detail::require_same_grid(recon, reference, "evaluate");
  EvalReport r;
  Volume aligned = recon;
  if (register_first) {
    const auto reg = register_rigid(recon, reference, mask);
    r.registration = reg.transform;
    r.registration_fallback = reg.fallback;
    if (!reg.fallback)
      for (std::size_t f = 0; f < aligned.size(); ++f)
        aligned.data[f] = static_cast<float>(recon.sample(reg.transform(reference.world_of(f))));
  }
  r.psnr = psnr(aligned, reference, mask);
  r.ssim = ssim(aligned, reference, mask);
  r.ncc = ncc(aligned, reference, mask);
  if (states && truth) r.motion = motion_error(*states, *truth, r.registration);
  return r;
}

}  // namespace svrec::metrics
