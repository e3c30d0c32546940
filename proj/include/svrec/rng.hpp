#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>

namespace svrec {

// Counter-based random numbers: every draw is a pure function of
// (seed, stream, counter), so results never depend on evaluation order or
// on how work is split across threads.
class CounterRng {
 public:
  constexpr CounterRng() = default;
  constexpr explicit CounterRng(std::uint64_t seed, std::uint64_t stream = 0)
      : key_(mix(seed ^ 0x9e3779b97f4a7c15ULL) ^ mix(stream + 0x632be59bd9b4e019ULL)) {}

  // Child generator for an independent sub-stream (per slice, per case, ...).
  constexpr CounterRng derive(std::uint64_t stream) const {
    CounterRng child;
    child.key_ = mix(key_ ^ mix(stream * 0xd1b54a32d192ed03ULL + 1));
    return child;
  }

  constexpr std::uint64_t bits(std::uint64_t counter) const {
    return mix(key_ + mix(counter ^ 0xbf58476d1ce4e5b9ULL));
  }

  // Uniform in the open interval (0, 1).
  double uniform(std::uint64_t counter) const {
    return (static_cast<double>(bits(counter) >> 11) + 0.5) * 0x1.0p-53;
  }

  double uniform(std::uint64_t counter, double lo, double hi) const {
    return lo + (hi - lo) * uniform(counter);
  }

  // Uniform integer in [0, n).
  std::uint64_t index(std::uint64_t counter, std::uint64_t n) const {
    // Multiply-shift keeps the bias below 2^-64 * n.
    return static_cast<std::uint64_t>((static_cast<unsigned __int128>(bits(counter)) * n) >> 64);
  }

  // Standard normal pair via Box-Muller from counters 2c and 2c+1.
  void normal_pair(std::uint64_t counter, double& z0, double& z1) const {
    const double u1 = uniform(2 * counter);
    const double u2 = uniform(2 * counter + 1);
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double a = 2.0 * std::numbers::pi * u2;
    z0 = r * std::cos(a);
    z1 = r * std::sin(a);
  }

  double normal(std::uint64_t counter) const {
    double z0 = 0.0, z1 = 0.0;
    normal_pair(counter, z0, z1);
    return z0;
  }

 private:
  // splitmix64 finalizer
  static constexpr std::uint64_t mix(std::uint64_t z) {
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

  std::uint64_t key_ = 0;
};

}  // namespace svrec
