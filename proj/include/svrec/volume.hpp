#pragma once

#include <Eigen/Dense>

#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <vector>

#include "svrec/error.hpp"

namespace svrec {

// Dense scalar grid. Voxel (i, j, k) sits at origin + (i, j, k) * spacing (mm),
// storage is x-fastest.
struct Volume {
  std::array<std::size_t, 3> shape{0, 0, 0};
  Eigen::Vector3d spacing = Eigen::Vector3d::Ones();
  Eigen::Vector3d origin = Eigen::Vector3d::Zero();
  std::vector<float> data;

  Volume() = default;
  Volume(std::array<std::size_t, 3> shape_, Eigen::Vector3d spacing_, Eigen::Vector3d origin_, float fill = 0.0f)
      : shape(shape_), spacing(spacing_), origin(origin_), data(shape_[0] * shape_[1] * shape_[2], fill) {
    validate();
  }

  // Grid centred on the world origin.
  static Volume centered(std::array<std::size_t, 3> shape_, Eigen::Vector3d spacing_, float fill = 0.0f) {
    Eigen::Vector3d origin_;
    for (int a = 0; a < 3; ++a) origin_[a] = -0.5 * static_cast<double>(shape_[a] - 1) * spacing_[a];
    return Volume(shape_, spacing_, origin_, fill);
  }

  void validate() const {
    for (int a = 0; a < 3; ++a)
      if (!(spacing[a] > 0.0) || !std::isfinite(spacing[a])) throw RangeError("Volume: spacing must be positive");
    if (data.size() != shape[0] * shape[1] * shape[2]) throw ShapeError("Volume: data size does not match shape");
  }

  std::size_t size() const { return data.size(); }
  std::size_t index(std::size_t i, std::size_t j, std::size_t k) const { return i + shape[0] * (j + shape[1] * k); }
  float& at(std::size_t i, std::size_t j, std::size_t k) { return data[index(i, j, k)]; }
  float at(std::size_t i, std::size_t j, std::size_t k) const { return data[index(i, j, k)]; }

  Eigen::Vector3d world(std::size_t i, std::size_t j, std::size_t k) const {
    return origin + Eigen::Vector3d(static_cast<double>(i), static_cast<double>(j), static_cast<double>(k)).cwiseProduct(spacing);
  }
  Eigen::Vector3d world_of(std::size_t flat) const {
    const std::size_t i = flat % shape[0];
    const std::size_t j = (flat / shape[0]) % shape[1];
    const std::size_t k = flat / (shape[0] * shape[1]);
    return world(i, j, k);
  }
  Eigen::Vector3d continuous_index(const Eigen::Vector3d& p) const { return (p - origin).cwiseQuotient(spacing); }

  Eigen::Vector3d extent_min() const { return origin; }
  Eigen::Vector3d extent_max() const {
    Eigen::Vector3d e;
    for (int a = 0; a < 3; ++a) e[a] = origin[a] + static_cast<double>(shape[a] - 1) * spacing[a];
    return e;
  }

  bool same_grid(const Volume& o, double tol = 1e-9) const {
    return shape == o.shape && (spacing - o.spacing).cwiseAbs().maxCoeff() <= tol &&
           (origin - o.origin).cwiseAbs().maxCoeff() <= tol;
  }

  // Trilinear interpolation at a world point; `outside` beyond the grid.
  double sample(const Eigen::Vector3d& p, double outside = 0.0) const {
    const Eigen::Vector3d c = continuous_index(p);
    std::array<long, 3> base{};
    std::array<double, 3> frac{};
    for (int a = 0; a < 3; ++a) {
      const double n = static_cast<double>(shape[static_cast<std::size_t>(a)] - 1);
      if (!(c[a] >= 0.0) || c[a] > n) return outside;
      double fl = std::floor(c[a]);
      if (fl >= n) fl = n - 1.0;  // upper face
      if (fl < 0.0) fl = 0.0;
      base[static_cast<std::size_t>(a)] = static_cast<long>(fl);
      frac[static_cast<std::size_t>(a)] = c[a] - fl;
    }
    if (shape[0] == 1 || shape[1] == 1 || shape[2] == 1) return outside;
    double acc = 0.0;
    for (int dz = 0; dz < 2; ++dz)
      for (int dy = 0; dy < 2; ++dy)
        for (int dx = 0; dx < 2; ++dx) {
          const double w = (dx ? frac[0] : 1.0 - frac[0]) * (dy ? frac[1] : 1.0 - frac[1]) * (dz ? frac[2] : 1.0 - frac[2]);
          if (w == 0.0) continue;
          acc += w * at(static_cast<std::size_t>(base[0] + dx), static_cast<std::size_t>(base[1] + dy),
                        static_cast<std::size_t>(base[2] + dz));
        }
    return acc;
  }
};

}  // namespace svrec
