#pragma once

#include <cmath>
#include <numbers>

#include "svrec/error.hpp"

namespace svrec::diffcore {

// Cosine annealing from lr0 at it = 0 down to lr_min at it = it_max.
inline double cosine_anneal(double lr0, double lr_min, long it, long it_max) {
  if (it < 0 || it_max < 0 || it > it_max) throw RangeError("cosine_anneal: iteration outside [0, it_max]");
  if (lr0 < lr_min) throw RangeError("cosine_anneal: lr0 below lr_min");
  if (it_max == 0) return lr0;
  const double phase = std::numbers::pi * static_cast<double>(it) / static_cast<double>(it_max);
  return lr_min + 0.5 * (lr0 - lr_min) * (1.0 + std::cos(phase));
}

}  // namespace svrec::diffcore
