// svrec command-line front end: simulate, reconstruct, meta-train, render, evaluate.
//
// Exit codes: 0 ok, 2 malformed input (files or arguments), 3 numeric
// failure (divergence, non-finite values), 4 contract/config violations.

#include <CLI11.hpp>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <limits>
#include <optional>
#include <string>

#include "svrec/io.hpp"
#include "svrec/meta.hpp"
#include "svrec/metrics.hpp"
#include "svrec/recon.hpp"
#include "svrec/simulate.hpp"

namespace fs = std::filesystem;
namespace io = svrec::io;
namespace rc = svrec::recon;
using nlohmann::json;

namespace {

using Scalar = float;

struct SimulateArgs {
  std::uint64_t seed = 0;
  double mu = 0.0;
  std::size_t stacks = 3;
  std::size_t cases = 1;
  std::string out, config;
  double corrupt_fraction = 0.0;
};

int run_simulate(const SimulateArgs& a) {
  io::RunConfig cfg;
  if (!a.config.empty()) cfg = io::read_run_config(a.config);
  if (!(a.mu >= 0.0)) throw svrec::RangeError("--mu must be non-negative");
  auto cases = svrec::simulate::make_dataset(a.cases, a.mu, a.stacks, a.seed, cfg.sim);
  const svrec::CounterRng rng(a.seed, 0xc0f7);
  for (std::size_t i = 0; i < cases.size(); ++i) {
    auto& c = cases[i];
    if (a.corrupt_fraction > 0.0) svrec::simulate::corrupt_slice_fraction(c, a.corrupt_fraction, rng.derive(i));
    io::write_case(fs::path(a.out) / c.task.id, c);
  }
  std::printf("wrote %zu case(s) to %s\n", cases.size(), a.out.c_str());
  return 0;
}

struct ReconstructArgs {
  std::string case_dir, init, config, out;
  bool force = false;
};

json checkpoint_extra(const io::RunConfig& cfg) { return {{"bbox_margin", cfg.recon.bbox_margin}}; }

int run_reconstruct(const ReconstructArgs& a) {
  const auto cfg = io::read_run_config(a.config);
  const auto task = io::read_task(a.case_dir);
  const auto spacing = io::task_spacing(task.stacks);
  const auto recon_cfg = rc::with_overrides(cfg.recon, task.overrides);

  std::optional<io::Checkpoint<Scalar>> init;
  if (!a.init.empty()) {
    init = io::read_checkpoint<Scalar>(a.init);
    if (!init->info.spacing)
      throw svrec::ContractError(a.init + ": checkpoint records no acquisition spacing");
    if (!io::spacing_matches(*init->info.spacing, spacing) && !a.force)
      throw svrec::ContractError(a.init + ": checkpoint was trained on spacing (" + svrec::config::to_text((*init->info.spacing)[0]) +
                                 ", " + svrec::config::to_text((*init->info.spacing)[1]) + ", " +
                                 svrec::config::to_text((*init->info.spacing)[2]) +
                                 ") mm but the case has a different spacing; pass --force to use it anyway");
  }

  rc::Reconstructor<Scalar> r(task.stacks, recon_cfg, init ? &init->params : nullptr);
  std::printf("reconstructing %s: %zu slices, %ld iterations%s\n", task.id.c_str(), r.data().slices.size(), r.budget(),
              init ? " (meta initialization)" : "");
  const auto res = r.run(cfg.eval_every);

  const fs::path out(a.out);
  fs::create_directories(out);
  io::CheckpointInfo info;
  info.kind = "model";
  info.frame = res.frame;
  info.spacing = spacing;
  info.extra = checkpoint_extra(cfg);
  io::write_checkpoint((out / "model.ckpt").string(), res.params, info);
  const auto grid = rc::render_grid(res.frame, recon_cfg.bbox_margin, cfg.render_spacing);
  io::write_volume((out / "recon.vol").string(), rc::render(res.params.sr, res.frame, grid));
  io::write_json((out / "states.json").string(), io::to_json(res.states, &r.data()));
  io::detail::write_text((out / "trace.csv").string(), io::trace_csv(res.trace, res.eval_trace));
  // Timing lives in its own file so every other output is reproducible bit for bit.
  io::write_json((out / "timing.json").string(), {{"seconds", res.seconds}, {"iterations", res.iterations}});
  std::printf("final loss %.6g after %ld iterations (%.1f s)\n", res.final_loss, res.iterations, res.seconds);
  return 0;
}

struct MetaArgs {
  std::string train_dir, val_dir, config, out, log;
};

int run_meta_train(const MetaArgs& a) {
  const auto cfg = io::read_run_config(a.config);
  if (fs::equivalent(a.train_dir, a.val_dir)) throw svrec::ContractError("meta-train: training and validation directories are the same");
  auto train = io::read_tasks(a.train_dir);
  auto val = io::read_tasks(a.val_dir);
  // case ids only need to be unique within a directory
  for (auto& t : train) t.id = "train/" + t.id;
  for (auto& t : val) t.id = "val/" + t.id;
  const auto spacing = io::task_spacing(train.front().stacks);
  for (const auto* set : {&train, &val})
    for (const auto& t : *set)
      if (!io::spacing_matches(io::task_spacing(t.stacks), spacing))
        throw svrec::ContractError("meta-train: task '" + t.id + "' differs in acquisition spacing from the others");

  io::CheckpointInfo info;
  info.kind = "meta";
  info.spacing = spacing;
  info.extra = checkpoint_extra(cfg);
  const auto save = [&](const rc::ModelParams<Scalar>& theta, long step, double v) {
    io::write_checkpoint(a.out, theta, info);
    std::printf("outer step %ld: validation loss %.6g (checkpoint written)\n", step, v);
    std::fflush(stdout);
  };
  const auto res = svrec::meta::meta_train<Scalar>(train, val, cfg.meta_config(), nullptr, save);
  const std::string log = a.log.empty() ? fs::path(a.out).replace_extension(".log.csv").string() : a.log;
  io::detail::write_text(log, svrec::meta::log_csv(res.log));
  std::printf("best validation %.6g at outer step %ld of %ld; inner descent on %.0f%% of runs\n", res.best_validation,
              res.best_step, res.outer_steps, 100.0 * res.descent_fraction);
  if (res.descent_fraction < 0.9)
    std::fprintf(stderr, "warning: inner loss decreased on fewer than 90%% of inner runs\n");
  return 0;
}

struct RenderArgs {
  std::string model, out;
  double spacing = 0.5;
};

int run_render(const RenderArgs& a) {
  const auto c = io::read_checkpoint<Scalar>(a.model);
  const double margin = c.info.extra.value("bbox_margin", 0.0);
  const auto grid = rc::render_grid(c.info.frame, margin, a.spacing);
  io::write_volume(a.out, rc::render(c.params.sr, c.info.frame, grid));
  std::printf("rendered %zux%zux%zu at %g mm\n", grid.shape[0], grid.shape[1], grid.shape[2], a.spacing);
  return 0;
}

struct EvaluateArgs {
  std::string recon, reference, mask, truth, states, out, method = "svrec";
  double mu = std::numeric_limits<double>::quiet_NaN();
  long n_stacks = 0;
  double seconds = std::numeric_limits<double>::quiet_NaN();
  bool no_register = false;
};

bool same_grid(const svrec::Volume& a, const svrec::Volume& b) {
  return a.shape == b.shape && a.spacing == b.spacing && a.origin == b.origin;
}

int run_evaluate(const EvaluateArgs& a) {
  if (a.truth.empty() != a.states.empty()) throw svrec::ContractError("--truth and --states must be given together");
  auto recon = io::read_volume(a.recon);
  const auto reference = io::read_volume(a.reference);
  if (!same_grid(recon, reference)) {
    svrec::Volume resampled = reference;
    for (std::size_t f = 0; f < resampled.size(); ++f)
      resampled.data[f] = static_cast<float>(recon.sample(reference.world_of(f)));
    recon = std::move(resampled);
  }
  std::optional<svrec::Volume> mask;
  std::string mask_path = a.mask;
  if (mask_path.empty()) {
    const auto sibling = fs::path(a.reference).parent_path() / "phantom_mask.vol";
    if (fs::exists(sibling)) mask_path = sibling.string();
  }
  if (!mask_path.empty()) mask = io::read_volume(mask_path);
  std::optional<svrec::GroundTruth> truth;
  std::optional<std::vector<svrec::model::SliceState>> states;
  if (!a.truth.empty()) {
    truth = io::truth_from_json(io::read_json(a.truth), a.truth);
    states = io::states_from_json(io::read_json(a.states), a.states);
  }
  const auto report = svrec::metrics::evaluate(recon, reference, mask ? &*mask : nullptr, states ? &*states : nullptr,
                                               truth ? &*truth : nullptr, !a.no_register);
  auto j = svrec::metrics::to_json(report);
  j["mask"] = mask_path;
  io::write_json(a.out, j);

  double seconds = a.seconds;
  if (std::isnan(seconds)) {
    const auto timing = fs::path(a.recon).parent_path() / "timing.json";
    if (fs::exists(timing)) seconds = io::read_json(timing.string()).value("seconds", seconds);
  }
  const auto csv_path = fs::path(a.out).replace_extension(".csv").string();
  char row[512];
  std::snprintf(row, sizeof row, "%s,%g,%ld,%s,%.6f,%.6f,%.3f\n", a.method.c_str(), a.mu, a.n_stacks,
                std::isinf(report.psnr) ? "inf" : svrec::config::to_text(report.psnr).c_str(), report.ssim, report.ncc,
                seconds);
  io::detail::write_text(csv_path, std::string("method,mu,n_stacks,psnr,ssim,ncc,seconds\n") + row);
  std::printf("psnr %s  ssim %.4f  ncc %.4f\n", j["psnr"].dump().c_str(), report.ssim, report.ncc);
  if (report.motion)
    std::printf("motion: mean rotation %.3f deg, mean translation %.3f mm\n", report.motion->mean_rotation_deg,
                report.motion->mean_translation_mm);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Slice-to-volume reconstruction with implicit neural representations"};
  app.require_subcommand(1);

  SimulateArgs sim;
  auto* s = app.add_subcommand("simulate", "Write synthetic phantom cases");
  s->add_option("--phantom-seed", sim.seed, "Dataset seed")->required();
  s->add_option("--mu", sim.mu, "Corruption factor")->required();
  s->add_option("--stacks", sim.stacks, "Stacks per case")->check(CLI::PositiveNumber);
  s->add_option("--cases", sim.cases, "Number of cases")->check(CLI::PositiveNumber);
  s->add_option("--out", sim.out, "Output directory")->required();
  s->add_option("--config", sim.config, "Run config (sim.* keys)");
  s->add_option("--corrupt-fraction", sim.corrupt_fraction, "Extra ghosting+dropout on this fraction of slices")
      ->check(CLI::Range(0.0, 1.0));

  ReconstructArgs rec;
  auto* r = app.add_subcommand("reconstruct", "Reconstruct one case");
  r->add_option("--case", rec.case_dir, "Case directory")->required();
  r->add_option("--init", rec.init, "Meta-learned checkpoint");
  r->add_option("--config", rec.config, "Run config")->required();
  r->add_option("--out", rec.out, "Output directory")->required();
  r->add_flag("--force", rec.force, "Accept a checkpoint trained on different spacing");

  MetaArgs meta;
  auto* m = app.add_subcommand("meta-train", "Meta-learn an initialization");
  m->add_option("--train-dir", meta.train_dir)->required();
  m->add_option("--val-dir", meta.val_dir)->required();
  m->add_option("--config", meta.config)->required();
  m->add_option("--out", meta.out, "Checkpoint path")->required();
  m->add_option("--log", meta.log, "Log CSV (default: next to the checkpoint)");

  RenderArgs ren;
  auto* rd = app.add_subcommand("render", "Sample a trained SR Module on a grid");
  rd->add_option("--model", ren.model)->required();
  rd->add_option("--spacing", ren.spacing, "Isotropic spacing, mm")->check(CLI::PositiveNumber);
  rd->add_option("--out", ren.out)->required();

  EvaluateArgs ev;
  auto* e = app.add_subcommand("evaluate", "Register and score a reconstruction");
  e->add_option("--recon", ev.recon)->required();
  e->add_option("--reference", ev.reference)->required();
  e->add_option("--mask", ev.mask, "Mask volume (default: phantom_mask.vol beside the reference, if present)");
  e->add_option("--truth", ev.truth);
  e->add_option("--states", ev.states);
  e->add_option("--out", ev.out)->required();
  e->add_option("--method", ev.method);
  e->add_option("--mu", ev.mu);
  e->add_option("--n-stacks", ev.n_stacks);
  e->add_option("--seconds", ev.seconds);
  e->add_flag("--no-register", ev.no_register);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& err) {
    const int code = app.exit(err);
    return code == 0 ? 0 : 2;
  }

  try {
    if (*s) return run_simulate(sim);
    if (*r) return run_reconstruct(rec);
    if (*m) return run_meta_train(meta);
    if (*rd) return run_render(ren);
    if (*e) return run_evaluate(ev);
  } catch (const svrec::FormatError& err) {
    std::cerr << "error: " << err.what() << "\n";
    return 2;
  } catch (const svrec::NumericError& err) {
    std::cerr << "numeric failure: " << err.what() << "\n";
    return 3;
  } catch (const svrec::Error& err) {
    std::cerr << "error: " << err.what() << "\n";
    return 4;
  } catch (const std::filesystem::filesystem_error& err) {
    std::cerr << "error: " << err.what() << "\n";
    return 2;
  }
  return 4;
}
