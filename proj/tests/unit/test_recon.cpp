#include <gtest/gtest.h>

#include <cmath>

#include "svrec/recon.hpp"
#include "svrec/simulate.hpp"

namespace rc = svrec::recon;
namespace sim = svrec::simulate;
namespace dc = svrec::diffcore;
namespace geo = svrec::geometry;
using geo::Vec3;

namespace {

// Three coarse stacks of a 16^3 phantom: a few hundred pixels in total.
sim::Case tiny_case(double mu, std::uint64_t seed = 5) {
  sim::DatasetOptions opt;
  opt.phantom_size = 16;
  opt.phantom_spacing = 2.0;
  opt.rx = opt.ry = 4.0;
  opt.rz = 6.0;
  opt.psf_samples = 16;
  opt.image_artifacts = false;
  return sim::make_dataset(1, mu, 3, seed, opt)[0];
}

rc::ReconConfig tiny_config() {
  rc::ReconConfig cfg;
  cfg.sr_hidden = {12, 12};
  cfg.slice_hidden = {8, 8};
  cfg.batch_size = 64;
  cfg.k_cap = 4;
  cfg.lr_sr = 1e-3;
  cfg.lr_slice = 1e-3;
  cfg.lr_min = 1e-5;
  cfg.chunk_points = 40;
  cfg.eval_pixels = 128;
  cfg.eval_k = 4;
  cfg.seed = 17;
  return cfg;
}

// Disturbs every parameter so no gradient component is trivially zero.
template <typename Scalar>
void jiggle(rc::ModelParams<Scalar>& p, double amount) {
  svrec::CounterRng rng(99);
  for (std::size_t i = 0; i < p.sr.size(); ++i) p.sr.values[i] += static_cast<Scalar>(amount * rng.normal(i));
  for (std::size_t i = 0; i < p.slice.size(); ++i)
    p.slice.values[i] += static_cast<Scalar>(amount * rng.normal(100000 + i));
}

}  // namespace

TEST(IterationBudget, CeilOfAlphaPixelsOverBatch) {
  auto c = tiny_case(0.0);
  std::size_t pixels = 0;
  for (const auto& s : c.task.stacks) pixels += s.masked_count();
  EXPECT_EQ(rc::iteration_budget(c.task.stacks, pixels, 1.0), 1);
  EXPECT_EQ(rc::iteration_budget(c.task.stacks, pixels, 2.0), 2);
  EXPECT_EQ(rc::iteration_budget(c.task.stacks, 7, 125.0),
            static_cast<long>((125 * pixels + 6) / 7));
  EXPECT_EQ(rc::iteration_budget(c.task.stacks, 12000, 125.0), static_cast<long>((125 * pixels + 11999) / 12000));
  EXPECT_THROW(rc::iteration_budget({}, 10, 1.0), svrec::ContractError);
}

TEST(LossBatch, HandComputed) {
  std::vector<svrec::model::SliceState> st(2);
  st[0].omega = 1.5;
  st[1].omega = 0.5;
  // total 30 pixels, slice sizes 10 and 20, batch of 3, N = 2
  const double l = rc::loss_batch({0.5, 0.2, 0.9}, {0.4, 0.5, 0.9}, {0, 1, 1}, st, {10, 20}, 30);
  const double expect = 1.5 * 30 / (2 * 10 * 3.0) * 0.1 + 0.5 * 30 / (2 * 20 * 3.0) * 0.3;
  EXPECT_NEAR(l, expect, 1e-15);
  EXPECT_THROW(rc::loss_batch({0.1}, {0.1, 0.2}, {0}, st, {10, 20}, 30), svrec::ShapeError);
}

// Affine SR Module V(n) = a.n + b: the pixel estimate is exact in the mean
// PSF offset, and its expectation is the value at the pixel centre.
TEST(SimulatePixel, LinearFieldOracle) {
  auto c = tiny_case(0.0);
  const auto data = rc::flatten(c.task.stacks, 5.0);
  auto spec = svrec::model::sr_module_spec({3}, dc::Activation::linear());
  auto p = dc::ParamSet<double>::zeros(spec);
  const auto layout = p.layout();
  // layer 0 = identity, layer 1 = a^T, bias b
  for (std::size_t d = 0; d < 3; ++d) p.values[layout.weight_index(0, d, d)] = 1.0;
  const Vec3 a(0.3, -0.2, 0.5);
  for (std::size_t d = 0; d < 3; ++d) p.values[layout.weight_index(1, 0, d)] = a[static_cast<Eigen::Index>(d)];
  p.values[layout.bias_index(1, 0)] = 0.4;

  const auto& info = data.slices[4];
  svrec::model::SliceState state;
  state.psi.v = {0.05, -0.02, 0.03, 1.0, -2.0, 0.5};
  state.sigma = 1.3;
  const Vec3 local(4.0, -8.0, 0.0);
  const auto t = rc::slice_transform(info, state.psi);
  auto value_at = [&](const Vec3& x) { return state.sigma * (a.dot(data.frame.to_normalized(t(x))) + 0.4); };

  const auto offs = geo::sample_psf(info.psf, 5, svrec::CounterRng(3));
  Vec3 mean = Vec3::Zero();
  for (const auto& u : offs) mean += u;
  mean /= 5.0;
  EXPECT_NEAR(rc::simulate_pixel(p, data.frame, info, state, offs, local), value_at(local + mean), 1e-12);

  // Monte-Carlo spread: a.n is linear in u, so its variance is known.
  const long k = 4096;
  const auto many = geo::sample_psf(info.psf, k, svrec::CounterRng(4));
  const Vec3 grad_local = state.sigma * (t.rotation().transpose() * a.cwiseQuotient(data.frame.half));
  const double sd = std::sqrt(grad_local.cwiseProduct(grad_local).dot(info.psf.variance) / static_cast<double>(k));
  EXPECT_NEAR(rc::simulate_pixel(p, data.frame, info, state, many, local), value_at(local), 4.0 * sd);
}

TEST(Reconstructor, GradientsMatchFiniteDifferences) {
  auto c = tiny_case(2.0);
  auto cfg = tiny_config();
  cfg.w0 = 10.0;
  rc::Reconstructor<double> r(c.task.stacks, cfg);
  auto params = r.params();
  jiggle(params, 0.05);
  const auto sample = r.training_sample(r.budget() / 2);
  const auto obj = r.evaluate(params, sample, true);
  ASSERT_GT(obj.loss, 0.0);

  auto check = [&](bool sr_module) {
    double worst = 0.0;
    const std::size_t n = sr_module ? params.sr.size() : params.slice.size();
    for (std::size_t idx = 0; idx < n; idx += 5) {
      const double analytic = sr_module ? obj.sr_grad[idx] : obj.slice_grad[idx];
      auto hi = params, lo = params;
      const double h = 1e-6;
      (sr_module ? hi.sr : hi.slice).values[idx] += h;
      (sr_module ? lo.sr : lo.slice).values[idx] -= h;
      const double fd = (r.evaluate(hi, sample, false).loss - r.evaluate(lo, sample, false).loss) / (2 * h);
      const double scale = std::max(std::abs(fd), 1e-3 * obj.loss);
      worst = std::max(worst, std::abs(fd - analytic) / scale);
    }
    return worst;
  };
  EXPECT_LT(check(true), 1e-3);
  EXPECT_LT(check(false), 1e-3);
}

TEST(Reconstructor, LossIndependentOfWorkSplitAndThreads) {
  auto c = tiny_case(1.0);
  auto cfg = tiny_config();
  const rc::Reconstructor<double> a(c.task.stacks, cfg);
  cfg.chunk_points = 7;
  const rc::Reconstructor<double> b(c.task.stacks, cfg);
  // Full-pass loss equals a direct per-pixel sum through simulate_pixel.
  rc::SampleSpec all;
  all.rng = svrec::CounterRng(1);
  all.batch = 0;
  all.k = 3;
  const double la = a.evaluate(a.params(), all, false).loss;
  const double lb = b.evaluate(a.params(), all, false).loss;
  EXPECT_NEAR(la, lb, 1e-12);

  const auto& data = a.data();
  const auto states = a.slice_states();
  const auto psf_rng = all.rng.derive(0x9f5);
  std::vector<double> acquired, simulated;
  std::vector<std::size_t> tags, counts;
  for (const auto& s : data.slices) counts.push_back(s.pixel_count);
  for (std::size_t j = 0; j < data.pixels.size(); ++j) {
    const auto& px = data.pixels[j];
    std::vector<Vec3> offs;
    for (std::size_t s = 0; s < 3; ++s) offs.push_back(geo::psf_offset(data.slices[px.slice].psf, psf_rng, j * 3 + s));
    acquired.push_back(px.value);
    simulated.push_back(rc::simulate_pixel(a.params().sr, data.frame, data.slices[px.slice], states[px.slice], offs,
                                           Vec3(px.lx, px.ly, 0.0)));
    tags.push_back(px.slice);
  }
  EXPECT_NEAR(la, rc::loss_batch(acquired, simulated, tags, states, counts, data.pixels.size()), 1e-12);

  setenv("SVREC_THREADS", "3", 1);
  const double lt = a.evaluate(a.params(), all, false).loss;
  unsetenv("SVREC_THREADS");
  EXPECT_EQ(la, lt);
}

TEST(Reconstructor, DeterministicAndDecreasing) {
  auto c = tiny_case(0.0);
  auto cfg = tiny_config();
  cfg.alpha = 30.0;
  const auto r1 = rc::reconstruct<float>(c.task.stacks, cfg);
  const auto r2 = rc::reconstruct<float>(c.task.stacks, cfg);
  EXPECT_EQ(r1.params.sr.values, r2.params.sr.values);
  EXPECT_EQ(r1.params.slice.values, r2.params.slice.values);
  ASSERT_EQ(static_cast<long>(r1.trace.size()), r1.iterations);
  EXPECT_EQ(r1.trace.front().k, 1);
  EXPECT_EQ(r1.trace.back().k, geo::k_schedule(r1.iterations - 1, r1.iterations, cfg.k_cap));
  EXPECT_GE(r1.trace.back().k, cfg.k_cap - 1);
  rc::Reconstructor<float> fresh(c.task.stacks, cfg);
  EXPECT_LT(r1.final_loss, 0.7 * fresh.evaluation_loss());
  for (const auto& s : r1.states) EXPECT_TRUE(s.psi.finite());
}

TEST(Reconstructor, InitMustMatchSpec) {
  auto c = tiny_case(0.0);
  auto cfg = tiny_config();
  rc::Reconstructor<float> r(c.task.stacks, cfg);
  auto init = r.params();
  cfg.sr_hidden = {10, 10};
  EXPECT_THROW(rc::Reconstructor<float>(c.task.stacks, cfg, &init), svrec::ContractError);
  cfg = tiny_config();
  rc::Reconstructor<float> meta(c.task.stacks, cfg, &init);
  EXPECT_EQ(meta.budget(), rc::iteration_budget(c.task.stacks, cfg.batch_size, cfg.alpha_meta));
}

TEST(Reconstructor, DivergenceAbortsWithDiagnostic) {
  auto c = tiny_case(0.0);
  rc::Reconstructor<float> r(c.task.stacks, tiny_config());
  r.step();
  r.mutable_params().sr.values[3] = std::nanf("");
  try {
    r.step();
    FAIL() << "expected NumericError";
  } catch (const svrec::NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("iteration 1"), std::string::npos);
  }
}

TEST(Reconstructor, BadConfigRejected) {
  auto c = tiny_case(0.0);
  auto cfg = tiny_config();
  cfg.lr_sr = 1e-6;  // below lr_min
  EXPECT_THROW(rc::Reconstructor<float>(c.task.stacks, cfg), svrec::ConfigError);
  cfg = tiny_config();
  cfg.batch_size = 0;
  EXPECT_THROW(rc::Reconstructor<float>(c.task.stacks, cfg), svrec::ConfigError);
}

// Without motion in the data, a free motion head must not do worse than a
// frozen one, and its estimates stay small.
TEST(Reconstructor, NoMotionFreeHeadMatchesFrozen) {
  auto c = tiny_case(0.0, 8);
  auto cfg = tiny_config();
  cfg.alpha = 300.0;
  cfg.outlier = false;
  const auto free_run = rc::reconstruct<float>(c.task.stacks, cfg);
  cfg.motion = false;
  const auto frozen = rc::reconstruct<float>(c.task.stacks, cfg);
  EXPECT_LT(free_run.final_loss, 1.15 * frozen.final_loss);
  // A shared rigid offset is absorbed by the volume; judge slices relative to
  // the stack-wide mean correction.
  double mean_rot[3] = {0, 0, 0};
  for (const auto& s : free_run.states)
    for (int k = 0; k < 3; ++k) mean_rot[k] += s.psi.rot(k) / static_cast<double>(free_run.states.size());
  double spread = 0.0;
  for (const auto& s : free_run.states)
    for (int k = 0; k < 3; ++k) spread += std::pow(s.psi.rot(k) - mean_rot[k], 2);
  spread = std::sqrt(spread / static_cast<double>(free_run.states.size()));
  EXPECT_LT(spread, 6.0 * geo::kDegree);  // coarse 4 mm grid; accuracy is checked at acceptance scale
}

TEST(Render, ShapeAndClamp) {
  auto spec = svrec::model::sr_module_spec({4}, dc::Activation::linear());
  auto p = dc::ParamSet<float>::zeros(spec);
  p.values[p.layout().bias_index(1, 0)] = 2.0f;
  svrec::model::NormalizedFrame f;
  const auto grid = svrec::Volume::centered({5, 4, 3}, Vec3::Constant(1.0), 0.0f);
  const auto out = rc::render(p, f, grid);
  EXPECT_EQ(out.shape, grid.shape);
  for (float v : out.data) EXPECT_EQ(v, 1.0f);
  p.values[p.layout().bias_index(1, 0)] = -2.0f;
  for (float v : rc::render(p, f, grid).data) EXPECT_EQ(v, 0.0f);
}
