#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstdio>
#include <functional>
#include <limits>
#include <string>
#include <vector>

#include "svrec/config.hpp"
#include "svrec/error.hpp"
#include "svrec/recon.hpp"
#include "svrec/rng.hpp"
#include "svrec/stack.hpp"

// First-order meta-learning (Reptile) of an initialization for both modules.
// The second-order form differentiates through the inner loop,
//   theta <- theta - beta * d/dtheta L(U^n(theta)),
// which needs the Jacobian of n inner updates; the first-order variant drops
// that Jacobian and moves theta toward the adapted weights instead.
namespace svrec::meta {

namespace dc = diffcore;

struct MetaConfig {
  recon::ReconConfig inner;   // inner learning rates and network shapes
  double beta_start = 0.9;    // outer step size, linear decay ...
  double beta_end = 0.1;      // ... to this value at max_outer_steps
  long inner_iterations = 400;
  long max_outer_steps = 100;
  long validate_every = 10;   // outer steps between validations
  long validation_budget = 0; // inner iterations per validation task; 0 = inner_iterations
  long patience = 5;          // non-improving validations before stopping
  std::uint64_t seed = 0;

  double beta(long step) const {
    if (max_outer_steps <= 1) return beta_start;
    const double t = std::min(1.0, static_cast<double>(step) / static_cast<double>(max_outer_steps - 1));
    return beta_start + (beta_end - beta_start) * t;
  }
  long validation_iterations() const { return validation_budget > 0 ? validation_budget : inner_iterations; }

  void validate() const {
    inner.validate();
    if (!(beta_start >= 0.0 && beta_start <= 1.0) || !(beta_end >= 0.0 && beta_end <= 1.0))
      throw ConfigError("meta: beta must lie in [0, 1]");
    if (inner_iterations < 1 || max_outer_steps < 0 || validate_every < 1 || patience < 1 || validation_budget < 0)
      throw ConfigError("meta: iteration counts must be positive");
  }
};

// theta + beta (adapted - theta), computed in double and rounded once.
template <typename Scalar>
void reptile_update(dc::ParamSet<Scalar>& theta, const dc::ParamSet<Scalar>& adapted, double beta) {
  if (!(theta.spec == adapted.spec)) throw ContractError("reptile_update: parameter specs differ");
  for (std::size_t i = 0; i < theta.values.size(); ++i) {
    const double t = static_cast<double>(theta.values[i]);
    theta.values[i] = static_cast<Scalar>(t + beta * (static_cast<double>(adapted.values[i]) - t));
  }
}

struct Validation {
  double mean = 0.0;
  std::vector<double> per_task;
};

// Self-supervised validation: train each task from theta for `budget`
// iterations and average the final objective values. No ground truth used.
template <typename Scalar>
Validation meta_validate(const recon::ModelParams<Scalar>& theta, const std::vector<Task>& tasks,
                         const recon::ReconConfig& cfg, long budget) {
  if (tasks.empty()) throw ContractError("meta_validate: no validation tasks");
  if (budget < 0) throw RangeError("meta_validate: budget must be non-negative");
  Validation v;
  for (const auto& t : tasks) {
    recon::Reconstructor<Scalar> r(t.stacks, recon::with_overrides(cfg, t.overrides), &theta);
    r.set_budget(budget);
    v.per_task.push_back(r.run().final_loss);
  }
  for (double x : v.per_task) v.mean += x;
  v.mean /= static_cast<double>(v.per_task.size());
  return v;
}

struct LogRow {
  long outer_step = 0;
  std::string task_id;
  double inner_initial_loss = 0.0;
  double inner_final_loss = 0.0;
  double beta = 0.0;
  double validation_loss = std::numeric_limits<double>::quiet_NaN();  // NaN when not validated
  bool diverged = false;
};

template <typename Scalar>
struct MetaResult {
  recon::ModelParams<Scalar> theta;  // best-validation weights
  recon::ModelParams<Scalar> last;   // weights after the final outer step
  double best_validation = 0.0;
  long best_step = 0;                // outer steps taken when theta was recorded
  long outer_steps = 0;
  std::vector<LogRow> log;
  double descent_fraction = 0.0;  // share of inner runs whose loss went down
};

// Called with (theta, outer step, validation loss) whenever validation improves.
template <typename Scalar>
using CheckpointFn = std::function<void(const recon::ModelParams<Scalar>&, long, double)>;

// Reptile: per outer step sample one task, adapt a copy of theta for
// inner_iterations, move theta toward the adapted weights. Validation runs at
// step 0 and every validate_every steps; training stops after `patience`
// validations without improvement and the best theta is returned.
template <typename Scalar = float>
MetaResult<Scalar> meta_train(const std::vector<Task>& train, const std::vector<Task>& val, const MetaConfig& cfg,
                              const recon::ModelParams<Scalar>* init = nullptr, const CheckpointFn<Scalar>& on_improve = {}) {
  cfg.validate();
  if (train.empty()) throw ContractError("meta_train: no training tasks");
  if (val.empty()) throw ContractError("meta_train: no validation tasks");
  for (const auto& a : train)
    for (const auto& b : val)
      if (a.id == b.id) throw ContractError("meta_train: task '" + a.id + "' is in both training and validation sets");

  MetaResult<Scalar> out;
  recon::ModelParams<Scalar> theta = init ? *init : recon::initial_params<Scalar>(cfg.inner);
  const CounterRng pick(cfg.seed, 0x3e7a);
  long stale = 0, descents = 0, inner_runs = 0, consecutive_failures = 0;

  auto validate_now = [&](long step) {
    const double v = meta_validate(theta, val, cfg.inner, cfg.validation_iterations()).mean;
    if (step == 0 || v < out.best_validation) {
      out.best_validation = v;
      out.best_step = step;
      out.theta = theta;
      stale = 0;
      if (on_improve) on_improve(theta, step, v);
    } else {
      ++stale;
    }
    return v;
  };

  validate_now(0);
  long step = 0;
  while (step < cfg.max_outer_steps && stale < cfg.patience) {
    const auto& task = train[pick.index(static_cast<std::uint64_t>(step), train.size())];
    LogRow row;
    row.outer_step = step;
    row.task_id = task.id;
    row.beta = cfg.beta(step);
    recon::ReconConfig inner = recon::with_overrides(cfg.inner, task.overrides);
    inner.seed = cfg.inner.seed + static_cast<std::uint64_t>(step);
    try {
      recon::Reconstructor<Scalar> r(task.stacks, inner, &theta);
      r.set_budget(cfg.inner_iterations);
      row.inner_initial_loss = r.evaluation_loss();
      const auto res = r.run();
      row.inner_final_loss = res.final_loss;
      reptile_update(theta.sr, res.params.sr, row.beta);
      reptile_update(theta.slice, res.params.slice, row.beta);
      ++inner_runs;
      if (row.inner_final_loss <= row.inner_initial_loss) ++descents;
      consecutive_failures = 0;
    } catch (const NumericError&) {
      row.diverged = true;
      if (++consecutive_failures >= static_cast<long>(train.size()))
        throw NumericError("meta_train: inner runs diverged on " + std::to_string(consecutive_failures) +
                           " consecutive tasks");
    }
    ++step;
    if (step % cfg.validate_every == 0 || step == cfg.max_outer_steps) row.validation_loss = validate_now(step);
    out.log.push_back(row);
  }
  out.outer_steps = step;
  out.last = theta;
  out.descent_fraction = inner_runs > 0 ? static_cast<double>(descents) / static_cast<double>(inner_runs) : 0.0;
  return out;
}

// Log CSV: outer step, task id, inner losses, beta, validation loss.
inline std::string log_csv(const std::vector<LogRow>& rows) {
  std::string s = "outer_step,task_id,inner_initial_loss,inner_final_loss,beta,validation_loss,diverged\n";
  char buf[256];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%ld,%s,%.9g,%.9g,%.6g,%.9g,%d\n", r.outer_step, r.task_id.c_str(), r.inner_initial_loss,
                  r.inner_final_loss, r.beta, r.validation_loss, r.diverged ? 1 : 0);
    s += buf;
  }
  return s;
}

}  // namespace svrec::meta
