#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <vector>

#include "svrec/volume.hpp"

namespace svrec {

// Normalized 1D Gaussian taps of length 2*radius + 1.
inline std::vector<double> gaussian_kernel(double sigma, std::size_t radius) {
  std::vector<double> k(2 * radius + 1);
  double sum = 0.0;
  for (std::size_t i = 0; i < k.size(); ++i) {
    const double x = static_cast<double>(i) - static_cast<double>(radius);
    k[i] = std::exp(-0.5 * x * x / (sigma * sigma));
    sum += k[i];
  }
  for (auto& v : k) v /= sum;
  return k;
}

// Separable correlation of a 3D grid (x-fastest) with `taps` along each axis.
// Out-of-range samples are clamped to the edge.
inline std::vector<double> separable_filter(const std::vector<double>& in, std::array<std::size_t, 3> shape,
                                            const std::vector<double>& taps) {
  const long radius = static_cast<long>(taps.size() / 2);
  std::vector<double> a = in, b(in.size());
  const std::size_t stride[3] = {1, shape[0], shape[0] * shape[1]};
  for (int axis = 0; axis < 3; ++axis) {
    const long n = static_cast<long>(shape[static_cast<std::size_t>(axis)]);
    for (std::size_t flat = 0; flat < a.size(); ++flat) {
      const long pos = static_cast<long>((flat / stride[axis]) % static_cast<std::size_t>(n));
      const std::size_t base = flat - static_cast<std::size_t>(pos) * stride[axis];
      double acc = 0.0;
      for (long t = -radius; t <= radius; ++t) {
        long q = pos + t;
        q = q < 0 ? 0 : (q >= n ? n - 1 : q);
        acc += taps[static_cast<std::size_t>(t + radius)] * a[base + static_cast<std::size_t>(q) * stride[axis]];
      }
      b[flat] = acc;
    }
    std::swap(a, b);
  }
  return a;
}

inline Volume gaussian_blur(const Volume& v, double sigma_voxels) {
  const auto radius = static_cast<std::size_t>(std::ceil(3.0 * sigma_voxels));
  std::vector<double> in(v.data.begin(), v.data.end());
  auto out = separable_filter(in, v.shape, gaussian_kernel(sigma_voxels, radius));
  Volume r = v;
  for (std::size_t i = 0; i < out.size(); ++i) r.data[i] = static_cast<float>(out[i]);
  return r;
}

// 2D Gaussian blur of an ny x nx image (x fastest), edge clamped.
inline std::vector<float> gaussian_blur_2d(const std::vector<float>& img, std::size_t ny, std::size_t nx, double sigma) {
  const auto radius = static_cast<long>(std::ceil(3.0 * sigma));
  const auto taps = gaussian_kernel(sigma, static_cast<std::size_t>(radius));
  std::vector<double> tmp(img.size());
  std::vector<float> out(img.size());
  for (std::size_t y = 0; y < ny; ++y)
    for (std::size_t x = 0; x < nx; ++x) {
      double acc = 0.0;
      for (long t = -radius; t <= radius; ++t) {
        long q = static_cast<long>(x) + t;
        q = std::clamp<long>(q, 0, static_cast<long>(nx) - 1);
        acc += taps[static_cast<std::size_t>(t + radius)] * img[y * nx + static_cast<std::size_t>(q)];
      }
      tmp[y * nx + x] = acc;
    }
  for (std::size_t y = 0; y < ny; ++y)
    for (std::size_t x = 0; x < nx; ++x) {
      double acc = 0.0;
      for (long t = -radius; t <= radius; ++t) {
        long q = static_cast<long>(y) + t;
        q = std::clamp<long>(q, 0, static_cast<long>(ny) - 1);
        acc += taps[static_cast<std::size_t>(t + radius)] * tmp[static_cast<std::size_t>(q) * nx + x];
      }
      out[y * nx + x] = static_cast<float>(acc);
    }
  return out;
}

}  // namespace svrec
