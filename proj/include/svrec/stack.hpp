#pragma once

#include <Eigen/Dense>

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "svrec/error.hpp"
#include "svrec/geometry.hpp"

namespace svrec {

// One acquisition stack of parallel 2D slices.
//
// Pixel (ix, iy) of slice s sits at slice-local position
// ((ix - (nx-1)/2) * rx, (iy - (ny-1)/2) * ry, 0) mm; poses[s] maps slice-local
// mm to world mm. Storage is slice-major, then y, then x (x fastest).
struct SliceStack {
  std::size_t stack_idx = 0;
  std::size_t n_slices = 0, ny = 0, nx = 0;
  double rx = 1.0, ry = 1.0, rz = 1.0, gap = 0.0;
  std::vector<float> pixels;
  std::vector<std::uint8_t> mask;
  std::vector<geometry::RigidTransform> poses;
  Eigen::Vector3d pivot = Eigen::Vector3d::Zero();  // rotation centre for motion parameters

  std::size_t pixels_per_slice() const { return nx * ny; }
  std::size_t index(std::size_t s, std::size_t iy, std::size_t ix) const { return (s * ny + iy) * nx + ix; }

  Eigen::Vector3d local_position(std::size_t ix, std::size_t iy) const {
    return {(static_cast<double>(ix) - 0.5 * static_cast<double>(nx - 1)) * rx,
            (static_cast<double>(iy) - 0.5 * static_cast<double>(ny - 1)) * ry, 0.0};
  }

  std::size_t masked_count(std::size_t s) const {
    std::size_t n = 0;
    for (std::size_t p = 0; p < pixels_per_slice(); ++p) n += mask[s * pixels_per_slice() + p] != 0;
    return n;
  }

  std::size_t masked_count() const {
    std::size_t n = 0;
    for (auto m : mask) n += m != 0;
    return n;
  }

  void validate() const {
    const std::size_t n = n_slices * ny * nx;
    if (n_slices == 0 || nx == 0 || ny == 0) throw ShapeError("SliceStack: empty shape");
    if (pixels.size() != n || mask.size() != n) throw ShapeError("SliceStack: payload size does not match shape");
    if (poses.size() != n_slices) throw ShapeError("SliceStack: one pose per slice required");
    if (!(rx > 0.0) || !(ry > 0.0) || !(rz > 0.0)) throw RangeError("SliceStack: spacing must be positive");
    for (float v : pixels)
      if (!(v >= 0.0f && v <= 1.0f)) throw RangeError("SliceStack: intensities must lie in [0, 1]");
    for (const auto& p : poses)
      if (!p.is_rigid(1e-6)) throw NumericError("SliceStack: slice pose is not rigid");
    for (std::size_t s = 0; s < n_slices; ++s)
      if (masked_count(s) == 0) throw ContractError("SliceStack: slice without unmasked pixels");
  }
};

// Per-slice simulator truth.
struct SliceTruth {
  std::size_t stack_idx = 0;
  std::size_t slice_idx = 0;
  geometry::RigidTransform perturbation;  // corrupted pose = perturbation * clean pose
  Eigen::Vector3d pivot = Eigen::Vector3d::Zero();
  Eigen::Vector3d center = Eigen::Vector3d::Zero();  // clean slice centre, world mm
  bool corrupted = false;
  std::vector<std::string> artifacts;
};

struct GroundTruth {
  std::uint64_t phantom_seed = 0;
  std::vector<SliceTruth> slices;
};

// One reconstruction problem: the stacks of a case plus optional config
// overrides (keys of the run-config file).
struct Task {
  std::string id;
  std::vector<SliceStack> stacks;
  nlohmann::json overrides = nlohmann::json::object();
};

}  // namespace svrec
