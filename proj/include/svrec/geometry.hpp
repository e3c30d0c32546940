#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <vector>

#include "svrec/error.hpp"
#include "svrec/rng.hpp"

namespace svrec::geometry {

using Vec3 = Eigen::Vector3d;
using Vec4 = Eigen::Vector4d;
using Mat3 = Eigen::Matrix3d;
using Mat4 = Eigen::Matrix4d;

inline constexpr double kDegree = std::numbers::pi / 180.0;

// Six rigid-motion parameters: Euler angles (radians) about x, y, z followed
// by a translation in mm. The rotation is R = Rz(rot_z) * Ry(rot_y) * Rx(rot_x),
// i.e. intrinsic Z-Y-X.
struct RigidParams {
  std::array<double, 6> v{};

  double rot(int axis) const { return v[static_cast<std::size_t>(axis)]; }
  double trans(int axis) const { return v[3 + static_cast<std::size_t>(axis)]; }

  static RigidParams from(double rx, double ry, double rz, double tx, double ty, double tz) {
    return RigidParams{{rx, ry, rz, tx, ty, tz}};
  }
  bool finite() const {
    return std::all_of(v.begin(), v.end(), [](double x) { return std::isfinite(x); });
  }

  friend bool operator==(const RigidParams&, const RigidParams&) = default;
};

struct RigidTransform {
  Mat4 m = Mat4::Identity();

  static RigidTransform identity() { return {}; }
  Mat3 rotation() const { return m.topLeftCorner<3, 3>(); }
  Vec3 translation() const { return m.topRightCorner<3, 1>(); }

  // Bottom row (0,0,0,1), R^T R = I and det R = 1, all within tol.
  bool is_rigid(double tol = 1e-9) const {
    if (!m.allFinite()) return false;
    if (std::abs(m(3, 0)) > tol || std::abs(m(3, 1)) > tol || std::abs(m(3, 2)) > tol || std::abs(m(3, 3) - 1.0) > tol)
      return false;
    const Mat3 r = rotation();
    if ((r.transpose() * r - Mat3::Identity()).cwiseAbs().maxCoeff() > tol) return false;
    return std::abs(r.determinant() - 1.0) <= tol;
  }

  Vec3 operator()(const Vec3& p) const { return rotation() * p + translation(); }
};

inline Mat3 rotation_matrix(double rx, double ry, double rz) {
  const double cx = std::cos(rx), sx = std::sin(rx);
  const double cy = std::cos(ry), sy = std::sin(ry);
  const double cz = std::cos(rz), sz = std::sin(rz);
  Mat3 r;
  r << cz * cy, cz * sy * sx - sz * cx, cz * sy * cx + sz * sx,
       sz * cy, sz * sy * sx + cz * cx, sz * sy * cx - cz * sx,
       -sy,     cy * sx,                cy * cx;
  return r;
}

// d R / d rot_axis for axis = 0, 1, 2.
inline std::array<Mat3, 3> rotation_jacobian(double rx, double ry, double rz) {
  Mat3 rxm, rym, rzm, drx, dry, drz;
  const double cx = std::cos(rx), sx = std::sin(rx);
  const double cy = std::cos(ry), sy = std::sin(ry);
  const double cz = std::cos(rz), sz = std::sin(rz);
  rxm << 1, 0, 0, 0, cx, -sx, 0, sx, cx;
  rym << cy, 0, sy, 0, 1, 0, -sy, 0, cy;
  rzm << cz, -sz, 0, sz, cz, 0, 0, 0, 1;
  drx << 0, 0, 0, 0, -sx, -cx, 0, cx, -sx;
  dry << -sy, 0, cy, 0, 0, 0, -cy, 0, -sy;
  drz << -sz, -cz, 0, cz, -sz, 0, 0, 0, 0;
  return {rzm * rym * drx, rzm * dry * rxm, drz * rym * rxm};
}

inline RigidTransform to_matrix(const RigidParams& p) {
  if (!p.finite()) throw NumericError("to_matrix: non-finite rigid parameters");
  RigidTransform t;
  t.m.topLeftCorner<3, 3>() = rotation_matrix(p.rot(0), p.rot(1), p.rot(2));
  t.m.topRightCorner<3, 1>() = Vec3(p.trans(0), p.trans(1), p.trans(2));
  return t;
}

// Rotation about `pivot` followed by translation: x -> R (x - c) + c + t.
inline RigidTransform to_matrix_about(const RigidParams& p, const Vec3& pivot) {
  RigidTransform t = to_matrix(p);
  const Mat3 r = t.rotation();
  t.m.topRightCorner<3, 1>() = pivot - r * pivot + Vec3(p.trans(0), p.trans(1), p.trans(2));
  return t;
}

// Inverse of to_matrix (principal branch, rot_y in [-pi/2, pi/2]).
inline RigidParams to_params(const RigidTransform& t) {
  const Mat3 r = t.rotation();
  const double ry = std::asin(std::clamp(-r(2, 0), -1.0, 1.0));
  const double rx = std::atan2(r(2, 1), r(2, 2));
  const double rz = std::atan2(r(1, 0), r(0, 0));
  const Vec3 tr = t.translation();
  return RigidParams::from(rx, ry, rz, tr.x(), tr.y(), tr.z());
}

inline Vec4 apply(const RigidTransform& t, const Vec4& x) {
  if (std::abs(x(3) - 1.0) > 1e-12) throw ContractError("apply: homogeneous coordinate must be 1");
  Vec4 y = t.m * x;
  y(3) = 1.0;
  return y;
}

inline RigidTransform compose(const RigidTransform& a, const RigidTransform& b) {
  RigidTransform out;
  out.m = a.m * b.m;
  if (!out.is_rigid(1e-6)) throw NumericError("compose: result is not a rigid transform");
  return out;
}

inline RigidTransform invert(const RigidTransform& t) {
  if (!t.is_rigid(1e-6)) throw NumericError("invert: input is not a rigid transform");
  RigidTransform out;
  const Mat3 rt = t.rotation().transpose();
  out.m.topLeftCorner<3, 3>() = rt;
  out.m.topRightCorner<3, 1>() = -rt * t.translation();
  return out;
}

// Geodesic angle of the rotation part, radians in [0, pi].
inline double rotation_angle(const RigidTransform& t) {
  const Mat3 r = t.rotation();
  const double c = (r.trace() - 1.0) / 2.0;
  const double s = 0.5 * Vec3(r(2, 1) - r(1, 2), r(0, 2) - r(2, 0), r(1, 0) - r(0, 1)).norm();
  return std::atan2(s, c);  // acos alone loses precision near 0
}

// Diagonal Gaussian PSF covariance in the slice frame (mm^2).
struct PsfSpec {
  Vec3 variance = Vec3::Ones();

  Mat3 covariance() const { return variance.asDiagonal(); }
  Vec3 stddev() const { return variance.cwiseSqrt(); }
};

// In-plane FWHM 1.2 r, through-plane FWHM r_z; sigma = FWHM / 2.355.
inline PsfSpec psf_covariance(double rx, double ry, double rz) {
  if (!(rx > 0.0) || !(ry > 0.0) || !(rz > 0.0)) throw RangeError("psf_covariance: spacings must be positive");
  const double fwhm_to_sigma = 1.0 / 2.355;
  PsfSpec psf;
  psf.variance = Vec3(std::pow(1.2 * rx * fwhm_to_sigma, 2), std::pow(1.2 * ry * fwhm_to_sigma, 2),
                      std::pow(rz * fwhm_to_sigma, 2));
  return psf;
}

// Offset k drawn from N(0, Sigma) as a pure function of (rng, counter_base + k).
inline Vec3 psf_offset(const PsfSpec& psf, const CounterRng& rng, std::uint64_t counter) {
  double z0, z1, z2, z3;
  rng.normal_pair(2 * counter, z0, z1);
  rng.normal_pair(2 * counter + 1, z2, z3);
  const Vec3 s = psf.stddev();
  return {s.x() * z0, s.y() * z1, s.z() * z2};
}

inline std::vector<Vec3> sample_psf(const PsfSpec& psf, long k, const CounterRng& rng, std::uint64_t counter_base = 0) {
  if (k < 1) throw RangeError("sample_psf: K must be at least 1");
  std::vector<Vec3> out;
  out.reserve(static_cast<std::size_t>(k));
  for (long i = 0; i < k; ++i) out.push_back(psf_offset(psf, rng, counter_base + static_cast<std::uint64_t>(i)));
  return out;
}

// PSF sample count that grows quadratically with training progress:
// max(1, floor(k_cap * (it / it_max)^2)), computed in exact integer arithmetic.
inline long k_schedule(long it, long it_max, long k_cap = 64) {
  if (it < 0 || it_max <= 0 || it > it_max) throw RangeError("k_schedule: iteration outside [0, it_max]");
  if (k_cap < 1) throw RangeError("k_schedule: k_cap must be at least 1");
  const __int128 num = static_cast<__int128>(k_cap) * it * it;
  const __int128 den = static_cast<__int128>(it_max) * it_max;
  return std::max<long>(1, static_cast<long>(num / den));
}

}  // namespace svrec::geometry
