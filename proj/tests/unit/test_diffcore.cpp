#include <gtest/gtest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <numbers>

#include "svrec/diffcore/adam.hpp"
#include "svrec/diffcore/mlp.hpp"
#include "svrec/diffcore/schedule.hpp"
#include "svrec/diffcore/serialize.hpp"

namespace dc = svrec::diffcore;
using Mat = dc::Batch<double>;

namespace {

dc::MlpSpec small_spec(dc::Activation act, std::vector<std::size_t> widths = {3, 7, 5, 4}) {
  dc::MlpSpec spec;
  spec.layer_widths = std::move(widths);
  spec.activation = act;
  return spec;
}

Mat random_batch(std::size_t rows, std::size_t cols, std::uint64_t seed, double scale = 1.0) {
  svrec::CounterRng rng(seed);
  Mat m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.uniform(static_cast<std::uint64_t>(i), -scale, scale);
  return m;
}

// Scalar objective <c, f(x)> for finite differences.
double objective(const dc::ParamSet<double>& p, const Mat& x, const Mat& c) {
  return (dc::evaluate(p, x).array() * c.array()).sum();
}

double rel_err(double a, double b) { return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-8}); }

// Compares analytic gradients with central differences (step 1e-5) on every
// parameter and every input coordinate.
void check_gradients(dc::ParamSet<double> p, const Mat& x, const Mat& c, double tol) {
  auto fwd = dc::forward(p, x);
  auto g = dc::backward(p, fwd.tape, c);
  const double h = 1e-5;
  for (std::size_t i = 0; i < p.values.size(); ++i) {
    const double orig = p.values[i];
    p.values[i] = orig + h;
    const double fp = objective(p, x, c);
    p.values[i] = orig - h;
    const double fm = objective(p, x, c);
    p.values[i] = orig;
    const double fd = (fp - fm) / (2 * h);
    // ReLU kinks make single coordinates non-differentiable; absolute floor
    // covers values that cancel to ~0.
    if (std::abs(fd) < 1e-7 && std::abs(g.params[i]) < 1e-7) continue;
    EXPECT_LT(rel_err(g.params[i], fd), tol) << "param " << i << " analytic " << g.params[i] << " fd " << fd;
  }
  Mat xm = x;
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    const double orig = xm.data()[i];
    xm.data()[i] = orig + h;
    const double fp = objective(p, xm, c);
    xm.data()[i] = orig - h;
    const double fm = objective(p, xm, c);
    xm.data()[i] = orig;
    const double fd = (fp - fm) / (2 * h);
    if (std::abs(fd) < 1e-7 && std::abs(g.inputs.data()[i]) < 1e-7) continue;
    EXPECT_LT(rel_err(g.inputs.data()[i], fd), tol) << "input " << i;
  }
}

}  // namespace

TEST(InitSiren, HiddenWeightsRespectBound) {
  dc::MlpSpec spec = small_spec(dc::Activation::sine(30.0), {3, 330, 330, 1});
  auto p = dc::init_siren(spec, 7);
  const auto layout = p.layout();
  const double bound = std::sqrt(6.0 / 330.0) / 30.0;
  EXPECT_NEAR(bound, 0.004495, 1e-6);
  const auto& hidden = layout.layer(1);
  double max_abs = 0.0;
  for (std::size_t k = 0; k < hidden.rows * hidden.cols; ++k) max_abs = std::max(max_abs, std::abs(p.values[hidden.weights + k]));
  EXPECT_LE(max_abs, bound);
  EXPECT_GT(max_abs, 0.9 * bound);  // actually spans the interval
  const auto& first = layout.layer(0);
  for (std::size_t k = 0; k < first.rows * first.cols; ++k) EXPECT_LE(std::abs(p.values[first.weights + k]), 1.0 / 3.0);
  for (std::size_t l = 0; l < layout.layer_count(); ++l)
    for (std::size_t r = 0; r < layout.layer(l).rows; ++r) EXPECT_EQ(p.values[layout.bias_index(l, r)], 0.0);
}

TEST(InitSiren, DeterministicPerSeed) {
  auto spec = small_spec(dc::Activation::sine());
  auto a = dc::init_siren(spec, 42);
  auto b = dc::init_siren(spec, 42);
  auto c = dc::init_siren(spec, 43);
  EXPECT_EQ(a.values, b.values);
  EXPECT_NE(a.values, c.values);
}

TEST(InitSiren, RejectsNonSine) {
  EXPECT_THROW(dc::init_siren(small_spec(dc::Activation::relu()), 1), svrec::ConfigError);
}

TEST(MlpSpec, Invariants) {
  dc::MlpSpec spec;
  spec.layer_widths = {3};
  EXPECT_THROW(spec.validate(), svrec::ConfigError);
  spec.layer_widths = {3, 8};
  spec.heads = {{0, 6, dc::HeadActivation::identity}, {6, 1, dc::HeadActivation::identity}};
  EXPECT_THROW(spec.validate(), svrec::ConfigError);
  spec.heads = {{0, 6, dc::HeadActivation::identity}, {6, 2, dc::HeadActivation::identity}};
  EXPECT_NO_THROW(spec.validate());
  spec.activation = dc::Activation::sine(0.0);
  EXPECT_THROW(spec.validate(), svrec::ConfigError);
}

TEST(ParamLayout, InjectiveAndTotal) {
  auto spec = small_spec(dc::Activation::sine());
  dc::ParamLayout layout(spec);
  std::vector<int> hits(layout.size(), 0);
  for (std::size_t l = 0; l < layout.layer_count(); ++l) {
    const auto& s = layout.layer(l);
    for (std::size_t r = 0; r < s.rows; ++r) {
      for (std::size_t c = 0; c < s.cols; ++c) hits[layout.weight_index(l, r, c)]++;
      hits[layout.bias_index(l, r)]++;
    }
  }
  for (int h : hits) EXPECT_EQ(h, 1);
  EXPECT_EQ(layout.size(), 3u * 7 + 7 + 7 * 5 + 5 + 5 * 4 + 4);
}

TEST(Forward, ZeroNetworkGivesHeadActivationOfZero) {
  dc::MlpSpec spec = small_spec(dc::Activation::sine(), {2, 6, 4});
  spec.heads = {{0, 2, dc::HeadActivation::identity}, {2, 2, dc::HeadActivation::sigmoid}};
  auto p = dc::ParamSet<double>::zeros(spec);
  auto out = dc::evaluate(p, random_batch(2, 5, 3));
  for (Eigen::Index c = 0; c < 5; ++c) {
    EXPECT_EQ(out(0, c), 0.0);
    EXPECT_EQ(out(1, c), 0.0);
    EXPECT_EQ(out(2, c), 0.5);
    EXPECT_EQ(out(3, c), 0.5);
  }
}

TEST(Forward, IdentityLinearLayer) {
  dc::MlpSpec spec = small_spec(dc::Activation::linear(), {3, 3});
  auto p = dc::ParamSet<double>::zeros(spec);
  for (std::size_t i = 0; i < 3; ++i) p.values[p.layout().weight_index(0, i, i)] = 1.0;
  Mat x = random_batch(3, 4, 9);
  EXPECT_EQ(dc::evaluate(p, x), x);
}

TEST(Forward, BatchIndependence) {
  auto spec = small_spec(dc::Activation::sine(), {3, 16, 2});
  auto p = dc::init_siren(spec, 5);
  Mat x = random_batch(3, 5, 11);
  Mat all = dc::evaluate(p, x);
  for (Eigen::Index c = 0; c < 5; ++c) {
    Mat single = dc::evaluate(p, Mat(x.col(c)));
    // GEMM and GEMV kernels may round differently; agree to round-off.
    EXPECT_NEAR(single(0, 0), all(0, c), 1e-15);
    EXPECT_NEAR(single(1, 0), all(1, c), 1e-15);
  }
}

TEST(Forward, ShapeAndNumericErrors) {
  auto p = dc::init_siren(small_spec(dc::Activation::sine()), 1);
  EXPECT_THROW(dc::forward(p, random_batch(2, 3, 1)), svrec::ShapeError);
  Mat x = random_batch(3, 3, 1);
  x(1, 1) = std::nan("");
  EXPECT_THROW(dc::forward(p, x), svrec::NumericError);
}

TEST(Backward, ZeroCotangentsGiveZeroGradients) {
  auto p = dc::init_siren(small_spec(dc::Activation::sine()), 2);
  auto fwd = dc::forward(p, random_batch(3, 6, 4));
  auto g = dc::backward(p, fwd.tape, Mat::Zero(4, 6));
  for (double v : g.params) EXPECT_EQ(v, 0.0);
  EXPECT_EQ(g.inputs.cwiseAbs().maxCoeff(), 0.0);
}

TEST(Backward, ScalarSineMatchesFiniteDifferences) {
  // f(x) = sin(w0 * w * x) with w = 0.1, x = 0.3, w0 = 30.
  dc::MlpSpec spec = small_spec(dc::Activation::sine(30.0), {1, 1, 1});
  auto p = dc::ParamSet<double>::zeros(spec);
  const auto layout = p.layout();
  p.values[layout.weight_index(0, 0, 0)] = 0.1;
  p.values[layout.weight_index(1, 0, 0)] = 1.0;
  Mat x(1, 1);
  x(0, 0) = 0.3;
  auto fwd = dc::forward(p, x);
  EXPECT_NEAR(fwd.outputs(0, 0), std::sin(0.9), 1e-15);
  auto g = dc::backward(p, fwd.tape, Mat::Ones(1, 1));
  const double h = 1e-5;
  auto f = [&](double w, double xv) { return std::sin(30.0 * w * xv); };
  const double fd_w = (f(0.1 + h, 0.3) - f(0.1 - h, 0.3)) / (2 * h);
  const double fd_x = (f(0.1, 0.3 + h) - f(0.1, 0.3 - h)) / (2 * h);
  EXPECT_LT(rel_err(g.params[layout.weight_index(0, 0, 0)], fd_w), 1e-6);
  EXPECT_LT(rel_err(g.inputs(0, 0), fd_x), 1e-6);
}

TEST(Backward, LinearInCotangents) {
  auto p = dc::init_siren(small_spec(dc::Activation::sine()), 8);
  Mat x = random_batch(3, 7, 21);
  auto fwd = dc::forward(p, x);
  Mat c1 = random_batch(4, 7, 22), c2 = random_batch(4, 7, 23);
  auto g1 = dc::backward(p, fwd.tape, c1);
  auto g2 = dc::backward(p, fwd.tape, c2);
  auto g12 = dc::backward(p, fwd.tape, Mat(c1 + c2));
  for (std::size_t i = 0; i < g1.params.size(); ++i)
    EXPECT_NEAR(g12.params[i], g1.params[i] + g2.params[i], 1e-12 * (1 + std::abs(g12.params[i])));
  EXPECT_LT((g12.inputs - g1.inputs - g2.inputs).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Backward, StaleTapeRejected) {
  auto p = dc::init_siren(small_spec(dc::Activation::sine()), 8);
  auto fwd = dc::forward(p, random_batch(3, 2, 1));
  dc::AdamState st(p.size());
  std::vector<double> g(p.size(), 0.1);
  dc::adam_step(p, g, st, 1e-3);
  EXPECT_THROW(dc::backward(p, fwd.tape, Mat::Ones(4, 2)), svrec::StateError);
  auto other = dc::init_siren(small_spec(dc::Activation::sine()), 8);
  auto fwd2 = dc::forward(other, random_batch(3, 2, 1));
  EXPECT_THROW(dc::backward(p, fwd2.tape, Mat::Ones(4, 2)), svrec::StateError);
  auto fwd3 = dc::forward(p, random_batch(3, 2, 1));
  EXPECT_THROW(dc::backward(p, fwd3.tape, Mat::Ones(4, 3)), svrec::ShapeError);
}

TEST(GradientCheck, SineReluLinearAndHeads) {
  Mat x = random_batch(3, 4, 31, 0.8);
  Mat c = random_batch(4, 4, 32);
  check_gradients(dc::init_siren(small_spec(dc::Activation::sine(30.0)), 1), x, c, 1e-4);
  check_gradients(dc::init_params(small_spec(dc::Activation::relu()), 2), x, c, 1e-4);
  check_gradients(dc::init_params(small_spec(dc::Activation::linear()), 3), x, c, 1e-4);
  auto headed = small_spec(dc::Activation::sine(30.0));
  headed.heads = {{0, 2, dc::HeadActivation::identity}, {2, 1, dc::HeadActivation::tanh}, {3, 1, dc::HeadActivation::sigmoid}};
  check_gradients(dc::init_siren(headed, 4), x, c, 1e-4);
}

TEST(Determinism, OutputsAndGradientsBitIdentical) {
  auto spec = small_spec(dc::Activation::sine());
  auto run = [&] {
    auto p = dc::init_siren(spec, 99);
    Mat x = random_batch(3, 9, 5);
    auto fwd = dc::forward(p, x);
    auto g = dc::backward(p, fwd.tape, random_batch(4, 9, 6));
    return std::make_pair(Mat(fwd.outputs), g.params);
  };
  auto a = run();
  auto b = run();
  EXPECT_EQ(a.first, b.first);
  EXPECT_EQ(a.second, b.second);
}

TEST(Adam, FirstStepMovesByLearningRate) {
  auto spec = small_spec(dc::Activation::linear(), {2, 2});
  auto p = dc::ParamSet<double>::zeros(spec);
  dc::AdamState st(p.size());
  std::vector<double> g = {0.5, -2.0, 1e-3, -7.0, 3.0, -0.25};
  dc::adam_step(p, g, st, 0.01);
  EXPECT_EQ(st.t, 1u);
  for (std::size_t i = 0; i < g.size(); ++i) {
    EXPECT_NEAR(p.values[i], -0.01 * (g[i] > 0 ? 1 : -1), 1e-6 * 0.01 / std::abs(g[i]) + 1e-12);
  }
}

TEST(Adam, ZeroGradientLeavesParams) {
  auto p = dc::init_siren(small_spec(dc::Activation::sine()), 3);
  auto before = p.values;
  dc::AdamState st(p.size());
  dc::adam_step(p, std::vector<double>(p.size(), 0.0), st, 1e-3);
  EXPECT_EQ(p.values, before);
}

TEST(Adam, TwoStepsMatchHandRecursion) {
  auto spec = small_spec(dc::Activation::linear(), {1, 1});
  dc::ParamSet<double> p(spec, {0.3, -0.2});
  dc::AdamState st(2);
  const double lr = 0.05, g0 = 0.7, g1 = -1.3;
  std::vector<double> g = {g0, g1};
  dc::adam_step(p, g, st, lr);
  dc::adam_step(p, g, st, lr);
  // Hand recursion for coordinate i with constant gradient gi.
  auto expected = [&](double x, double gi) {
    double m = 0, v = 0;
    for (int t = 1; t <= 2; ++t) {
      m = 0.9 * m + (1 - 0.9) * gi;
      v = 0.999 * v + (1 - 0.999) * gi * gi;
      const double mh = m / (1 - std::pow(0.9, t)), vh = v / (1 - std::pow(0.999, t));
      x -= lr * mh / (std::sqrt(vh) + 1e-8);
    }
    return x;
  };
  EXPECT_EQ(p.values[0], expected(0.3, g0));
  EXPECT_EQ(p.values[1], expected(-0.2, g1));
}

TEST(Adam, NanGradientRefused) {
  auto p = dc::init_siren(small_spec(dc::Activation::sine()), 3);
  auto before = p.values;
  dc::AdamState st(p.size());
  std::vector<double> g(p.size(), 0.1);
  g[3] = std::nan("");
  EXPECT_THROW(dc::adam_step(p, g, st, 1e-3), svrec::NumericError);
  EXPECT_EQ(p.values, before);
  EXPECT_EQ(st.t, 0u);
  EXPECT_THROW(dc::adam_step(p, std::vector<double>(p.size(), 0.0), st, 0.0), svrec::RangeError);
}

TEST(CosineAnneal, EndpointsAndMidpoint) {
  EXPECT_EQ(dc::cosine_anneal(5e-5, 2.5e-5, 0, 1000), 5e-5);
  EXPECT_EQ(dc::cosine_anneal(5e-5, 2.5e-5, 1000, 1000), 2.5e-5);
  EXPECT_NEAR(dc::cosine_anneal(5e-5, 2.5e-5, 500, 1000), 3.75e-5, 1e-18);
  EXPECT_THROW(dc::cosine_anneal(5e-5, 2.5e-5, 1001, 1000), svrec::RangeError);
}

TEST(CosineAnneal, MonotoneAndBounded) {
  double prev = 1.0;
  for (long it = 0; it <= 777; ++it) {
    const double lr = dc::cosine_anneal(1e-3, 1e-5, it, 777);
    EXPECT_LE(lr, prev);
    EXPECT_GE(lr, 1e-5);
    EXPECT_LE(lr, 1e-3);
    prev = lr;
  }
}

TEST(Serialization, RoundTripIsBitExact) {
  auto spec = small_spec(dc::Activation::sine(30.0));
  spec.heads = {{0, 3, dc::HeadActivation::identity}, {3, 1, dc::HeadActivation::tanh}};
  auto p = dc::init_siren(spec, 1234);
  const auto path = (std::filesystem::temp_directory_path() / "svrec_params_roundtrip.bin").string();
  dc::save_params(path, p);
  auto q = dc::load_params<double>(path);
  EXPECT_EQ(q.spec, p.spec);
  EXPECT_EQ(q.values, p.values);
  EXPECT_EQ(q.seed, 1234u);
  std::filesystem::remove(path);
}
