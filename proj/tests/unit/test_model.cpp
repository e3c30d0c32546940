#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "svrec/diffcore/adam.hpp"
#include "svrec/diffcore/schedule.hpp"
#include "svrec/model.hpp"

namespace md = svrec::model;
namespace dc = svrec::diffcore;

namespace {

std::vector<md::SliceEncoding> grid_encodings(std::size_t stacks, std::size_t slices) {
  std::vector<md::SliceEncoding> e;
  for (std::size_t k = 0; k < stacks; ++k)
    for (std::size_t s = 0; s < slices; ++s) e.push_back(md::encode_slice(k, stacks, s, slices));
  return e;
}

// Small slice module so the finite-difference checks stay cheap.
dc::ParamSet<double> small_slice_module(std::uint64_t seed) {
  auto p = dc::init_params<double>(md::slice_module_spec({16, 16}, dc::Activation::sine(30.0)), seed);
  // Spread the logits so softmax is away from uniform.
  svrec::CounterRng rng(seed, 3);
  for (std::size_t i = 0; i < p.size(); ++i) p.values[i] += 0.05 * rng.normal(i);
  return p;
}

}  // namespace

TEST(Encoding, EndpointsAndSingleton) {
  EXPECT_EQ(md::encode_slice(0, 3, 0, 5).stack, -1.0);
  EXPECT_EQ(md::encode_slice(2, 3, 4, 5).slice, 1.0);
  EXPECT_EQ(md::encode_slice(1, 3, 2, 5).slice, 0.0);
  EXPECT_EQ(md::encode_slice(0, 1, 0, 1).stack, 0.0);
  EXPECT_EQ(md::encode_slice(0, 1, 0, 1).slice, 0.0);
  EXPECT_THROW(md::encode_slice(3, 3, 0, 5), svrec::RangeError);
}

TEST(PopulationSoftmax, MeanOne) {
  svrec::CounterRng rng(5);
  for (std::size_t n : {1u, 2u, 7u, 400u}) {
    std::vector<double> z(n);
    for (std::size_t i = 0; i < n; ++i) z[i] = 20.0 * rng.normal(i);
    const auto y = md::population_softmax(z);
    EXPECT_NEAR(std::accumulate(y.begin(), y.end(), 0.0) / static_cast<double>(n), 1.0, 1e-12);
    for (double v : y) EXPECT_GE(v, 0.0);
  }
  // Huge logits stay finite.
  const auto y = md::population_softmax({1000.0, -1000.0, 999.0});
  for (double v : y) EXPECT_TRUE(std::isfinite(v));
}

TEST(PopulationSoftmax, LogitOracle) {
  // one slice at logit 10 among ten: 10 e^10 / (e^10 + 9) and 10 / (e^10 + 9)
  std::vector<double> z(10, 0.0);
  z[0] = 10.0;
  const auto y = md::population_softmax(z);
  const double e10 = std::exp(10.0);
  EXPECT_NEAR(y[0], 10.0 * e10 / (e10 + 9.0), 1e-12);
  EXPECT_NEAR(y[0], 9.996, 5e-4);
  for (std::size_t i = 1; i < 10; ++i) EXPECT_NEAR(y[i], 0.0004, 1e-4);
}

TEST(SliceModule, ZeroNetworkGivesIdentityStates) {
  const auto p = dc::ParamSet<double>::zeros(md::slice_module_spec());
  const auto states = md::slice_module_eval(p, grid_encodings(3, 6));
  ASSERT_EQ(states.size(), 18u);
  for (const auto& s : states) {
    for (double v : s.psi.v) EXPECT_EQ(v, 0.0);
    EXPECT_DOUBLE_EQ(s.sigma, 1.0);
    EXPECT_DOUBLE_EQ(s.omega, 1.0);
  }
}

TEST(SliceModule, MeanOneAndScaling) {
  const auto p = small_slice_module(11);
  const auto enc = grid_encodings(3, 9);
  md::SliceModuleOptions opt;
  const auto pass = md::slice_module_forward(p, enc, opt);
  double ms = 0.0, mw = 0.0;
  for (const auto& s : pass.states) {
    ms += s.sigma;
    mw += s.omega;
  }
  EXPECT_NEAR(ms / 27.0, 1.0, 1e-12);
  EXPECT_NEAR(mw / 27.0, 1.0, 1e-12);
  for (std::size_t i = 0; i < enc.size(); ++i) {
    EXPECT_NEAR(pass.states[i].psi.v[0], 0.6 * pass.forward.outputs(0, static_cast<Eigen::Index>(i)), 1e-15);
    EXPECT_NEAR(pass.states[i].psi.v[4], 40.0 * pass.forward.outputs(4, static_cast<Eigen::Index>(i)), 1e-12);
  }
}

TEST(SliceModule, FlagsFreezeOutputs) {
  const auto p = small_slice_module(12);
  md::SliceModuleOptions opt;
  opt.motion = false;
  opt.outlier = false;
  for (const auto& s : md::slice_module_eval(p, grid_encodings(2, 4), opt)) {
    for (double v : s.psi.v) EXPECT_EQ(v, 0.0);
    EXPECT_EQ(s.sigma, 1.0);
    EXPECT_EQ(s.omega, 1.0);
  }
}

TEST(SliceModule, PermutationEquivariant) {
  const auto p = small_slice_module(13);
  auto enc = grid_encodings(2, 5);
  const auto a = md::slice_module_eval(p, enc);
  std::vector<std::size_t> perm(enc.size());
  std::iota(perm.begin(), perm.end(), 0);
  std::reverse(perm.begin(), perm.end());
  std::rotate(perm.begin(), perm.begin() + 3, perm.end());
  std::vector<md::SliceEncoding> shuffled;
  for (auto i : perm) shuffled.push_back(enc[i]);
  const auto b = md::slice_module_eval(p, shuffled);
  for (std::size_t j = 0; j < perm.size(); ++j) {
    for (std::size_t k = 0; k < 6; ++k) EXPECT_NEAR(b[j].psi.v[k], a[perm[j]].psi.v[k], 1e-12);
    EXPECT_NEAR(b[j].sigma, a[perm[j]].sigma, 1e-12);
    EXPECT_NEAR(b[j].omega, a[perm[j]].omega, 1e-12);
  }
}

TEST(SliceModule, DuplicateEncodingsRejected) {
  const auto p = small_slice_module(14);
  std::vector<md::SliceEncoding> enc = {{0.0, 0.5}, {0.0, 0.5}};
  EXPECT_THROW(md::slice_module_eval(p, enc), svrec::ContractError);
}

// L = sum_i a_i . psi_i + b_i sigma_i + c_i omega_i, checked against central
// differences of the parameters.
TEST(SliceModule, BackwardMatchesFiniteDifferences) {
  const auto p = small_slice_module(15);
  const auto enc = grid_encodings(2, 4);
  const std::size_t n = enc.size();
  md::SliceStateGradients g(n);
  svrec::CounterRng rng(21);
  std::uint64_t c = 0;
  for (std::size_t i = 0; i < n; ++i) {
    for (auto& v : g.psi[i]) v = rng.normal(c++);
    g.sigma[i] = rng.normal(c++);
    g.omega[i] = rng.normal(c++);
  }
  auto loss = [&](const dc::ParamSet<double>& q) {
    const auto st = md::slice_module_eval(q, enc);
    double l = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t k = 0; k < 6; ++k) l += g.psi[i][k] * st[i].psi.v[k];
      l += g.sigma[i] * st[i].sigma + g.omega[i] * st[i].omega;
    }
    return l;
  };
  const auto pass = md::slice_module_forward(p, enc);
  const auto grad = md::slice_module_backward(p, pass, g);
  double worst = 0.0;
  for (std::size_t idx = 0; idx < p.size(); idx += 7) {
    auto hi = p, lo = p;
    const double h = 1e-6;
    hi.values[idx] += h;
    lo.values[idx] -= h;
    const double fd = (loss(hi) - loss(lo)) / (2 * h);
    worst = std::max(worst, std::abs(fd - grad[idx]) / std::max(1.0, std::abs(fd)));
  }
  EXPECT_LT(worst, 1e-5);
}

TEST(SrModule, SpecShapes) {
  const auto sr = md::sr_module_spec();
  EXPECT_EQ(sr.layer_widths.front(), 3u);
  EXPECT_EQ(sr.layer_widths.back(), 1u);
  EXPECT_EQ(sr.layer_widths.size(), 8u);
  const auto sl = md::slice_module_spec();
  EXPECT_EQ(sl.layer_widths.front(), 2u);
  EXPECT_EQ(sl.layer_widths.back(), 8u);
  EXPECT_THROW(md::sr_eval(dc::ParamSet<float>::zeros(sr), dc::Batch<float>::Zero(2, 4)), svrec::ShapeError);
}

TEST(NormalizedFrame, RoundTrip) {
  md::NormalizedFrame f;
  f.center = {1, -2, 3};
  f.half = {10, 20, 5};
  const Eigen::Vector3d w(11, 18, -2);
  EXPECT_TRUE(f.to_normalized(w).isApprox(Eigen::Vector3d(1, 1, -1)));
  EXPECT_TRUE(f.to_world(f.to_normalized(w)).isApprox(w));
}

// A SIREN fitted directly to a smooth field reaches high fidelity.
TEST(SrModule, DirectFitPsnr) {
  auto field = [](const Eigen::Vector3d& x) {
    return 0.5 + 0.25 * std::sin(2.5 * x.x() + 0.5) * std::cos(2.0 * x.y()) + 0.15 * std::exp(-4.0 * x.squaredNorm()) +
           0.05 * x.z();
  };
  auto p = dc::init_params<float>(md::sr_module_spec({64, 64, 64}), 99);
  dc::AdamState adam(p.size());
  svrec::CounterRng rng(7);
  const std::size_t batch = 1024;
  const long iters = 1500;
  for (long it = 0; it < iters; ++it) {
    dc::Batch<float> x(3, batch);
    std::vector<double> y(batch);
    for (std::size_t b = 0; b < batch; ++b) {
      Eigen::Vector3d q;
      for (int d = 0; d < 3; ++d) q[d] = rng.uniform(static_cast<std::uint64_t>(it) * batch * 3 + b * 3 + d, -1.0, 1.0);
      x.col(static_cast<Eigen::Index>(b)) = q.cast<float>();
      y[b] = field(q);
    }
    auto fwd = dc::forward(p, x);
    dc::Batch<float> cot(1, batch);
    for (std::size_t b = 0; b < batch; ++b)
      cot(0, static_cast<Eigen::Index>(b)) = static_cast<float>(2.0 * (fwd.outputs(0, static_cast<Eigen::Index>(b)) - y[b]) / batch);
    const auto g = dc::backward(p, fwd.tape, cot);
    dc::adam_step(p, g.params, adam, dc::cosine_anneal(1e-3, 1e-5, it, iters));
  }
  // PSNR on a 24^3 grid, peak 1.
  const int n = 24;
  dc::Batch<float> x(3, n * n * n);
  std::vector<double> y(n * n * n);
  int k = 0;
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j)
      for (int l = 0; l < n; ++l, ++k) {
        const Eigen::Vector3d q(-1 + 2.0 * (l + 0.5) / n, -1 + 2.0 * (j + 0.5) / n, -1 + 2.0 * (i + 0.5) / n);
        x.col(k) = q.cast<float>();
        y[static_cast<std::size_t>(k)] = field(q);
      }
  const auto v = md::sr_eval(p, x);
  double mse = 0.0;
  for (int t = 0; t < k; ++t) mse += std::pow(v(0, t) - y[static_cast<std::size_t>(t)], 2);
  mse /= k;
  EXPECT_GE(10.0 * std::log10(1.0 / mse), 35.0);
}
