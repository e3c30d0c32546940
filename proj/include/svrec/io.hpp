#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "svrec/blob.hpp"
#include "svrec/config.hpp"
#include "svrec/diffcore/serialize.hpp"
#include "svrec/error.hpp"
#include "svrec/meta.hpp"
#include "svrec/model.hpp"
#include "svrec/recon.hpp"
#include "svrec/simulate.hpp"
#include "svrec/stack.hpp"
#include "svrec/volume.hpp"

// On-disk formats. Binary files share the blob container (magic, JSON header,
// little-endian payload); ground truth, slice states and reports are JSON.
// Doubles travel through JSON in shortest round-trip form, so every
// write -> read pair is bit-exact.
namespace svrec::io {

namespace fs = std::filesystem;
using nlohmann::json;

inline constexpr std::string_view kStackMagic = "SVRSTACK";
inline constexpr std::string_view kVolumeMagic = "SVRVOLUM";
inline constexpr std::string_view kModelMagic = "SVRMODEL";
inline constexpr int kFormatVersion = 1;

namespace detail {

inline json mat4_json(const geometry::Mat4& m) {
  json a = json::array();
  for (int r = 0; r < 4; ++r)
    for (int c = 0; c < 4; ++c) a.push_back(m(r, c));
  return a;
}

inline geometry::RigidTransform mat4_from(const json& a) {
  if (!a.is_array() || a.size() != 16) throw FormatError("expected 16 numbers for a 4x4 matrix");
  geometry::RigidTransform t;
  for (int r = 0; r < 4; ++r)
    for (int c = 0; c < 4; ++c) t.m(r, c) = a[static_cast<std::size_t>(4 * r + c)].get<double>();
  if (!t.is_rigid(1e-6)) throw FormatError("matrix is not a rigid transform");
  return t;
}

inline json vec3_json(const Eigen::Vector3d& v) { return {v.x(), v.y(), v.z()}; }

inline Eigen::Vector3d vec3_from(const json& a) {
  if (!a.is_array() || a.size() != 3) throw FormatError("expected 3 numbers");
  return {a[0].get<double>(), a[1].get<double>(), a[2].get<double>()};
}

// Runs a parser; JSON access errors and invariant violations become FormatError.
template <typename Fn>
auto parsing(const std::string& what, Fn&& fn) {
  try {
    return fn();
  } catch (const FormatError&) {
    throw;
  } catch (const json::exception& e) {
    throw FormatError(what + ": " + e.what());
  } catch (const Error& e) {
    throw FormatError(what + ": " + e.what());
  }
}

inline std::string read_text(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open: " + path);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

inline void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("cannot open for writing: " + path);
  out << text;
  if (!out) throw FormatError("write failed: " + path);
}

inline json read_json(const std::string& path) {
  const auto text = read_text(path);
  try {
    return json::parse(text);
  } catch (const json::exception& e) {
    throw FormatError(path + ": " + e.what());
  }
}

}  // namespace detail

// ---- stacks

inline void write_stack(const std::string& path, const SliceStack& st) {
  st.validate();
  Blob b;
  b.header = {{"format_version", kFormatVersion},
              {"stack_idx", st.stack_idx},
              {"shape", {st.n_slices, st.ny, st.nx}},
              {"pixel_spacing", {st.rx, st.ry}},
              {"thickness", st.rz},
              {"gap", st.gap},
              {"pivot", detail::vec3_json(st.pivot)},
              {"pixels", "float32"},
              {"mask", "uint8 after pixels, 1 = foreground"}};
  json poses = json::array();
  for (const auto& p : st.poses) poses.push_back(detail::mat4_json(p.m));
  b.header["poses"] = poses;
  append_numbers<float>(b.payload, st.pixels);
  b.payload.insert(b.payload.end(), st.mask.begin(), st.mask.end());
  write_blob(path, kStackMagic, b);
}

inline SliceStack read_stack(const std::string& path) {
  const Blob b = read_blob(path, kStackMagic);
  return detail::parsing(path, [&] {
    const auto& h = b.header;
    if (h.at("format_version").get<int>() != kFormatVersion) throw FormatError("unsupported format_version");
    SliceStack st;
    st.stack_idx = h.at("stack_idx").get<std::size_t>();
    const auto shape = h.at("shape").get<std::vector<std::size_t>>();
    if (shape.size() != 3) throw FormatError("shape must have 3 entries");
    st.n_slices = shape[0];
    st.ny = shape[1];
    st.nx = shape[2];
    const auto ps = h.at("pixel_spacing").get<std::vector<double>>();
    if (ps.size() != 2) throw FormatError("pixel_spacing must have 2 entries");
    st.rx = ps[0];
    st.ry = ps[1];
    st.rz = h.at("thickness").get<double>();
    st.gap = h.at("gap").get<double>();
    st.pivot = detail::vec3_from(h.at("pivot"));
    for (const auto& p : h.at("poses")) st.poses.push_back(detail::mat4_from(p));
    const std::size_t n = st.n_slices * st.ny * st.nx;
    if (b.payload.size() != n * 5) throw FormatError("payload length does not match shape");
    st.pixels = read_numbers<float>(b.payload, 0, n);
    st.mask.assign(b.payload.begin() + static_cast<std::ptrdiff_t>(4 * n), b.payload.end());
    for (auto m : st.mask)
      if (m > 1) throw FormatError("mask bytes must be 0 or 1");
    st.validate();
    return st;
  });
}

// ---- volumes

inline void write_volume(const std::string& path, const Volume& v) {
  v.validate();
  Blob b;
  b.header = {{"format_version", kFormatVersion},
              {"shape", {v.shape[0], v.shape[1], v.shape[2]}},
              {"spacing", detail::vec3_json(v.spacing)},
              {"origin", detail::vec3_json(v.origin)},
              {"order", "x-fastest float32"}};
  append_numbers<float>(b.payload, v.data);
  write_blob(path, kVolumeMagic, b);
}

inline Volume read_volume(const std::string& path) {
  const Blob b = read_blob(path, kVolumeMagic);
  return detail::parsing(path, [&] {
    const auto& h = b.header;
    const auto shape = h.at("shape").get<std::vector<std::size_t>>();
    if (shape.size() != 3) throw FormatError("shape must have 3 entries");
    Volume v;
    v.shape = {shape[0], shape[1], shape[2]};
    v.spacing = detail::vec3_from(h.at("spacing"));
    v.origin = detail::vec3_from(h.at("origin"));
    const std::size_t n = shape[0] * shape[1] * shape[2];
    if (b.payload.size() != n * 4) throw FormatError("payload length does not match shape");
    v.data = read_numbers<float>(b.payload, 0, n);
    v.validate();
    return v;
  });
}

// ---- ground truth and slice states (JSON)

inline json to_json(const GroundTruth& t) {
  json slices = json::array();
  for (const auto& s : t.slices)
    slices.push_back({{"stack_idx", s.stack_idx},
                      {"slice_idx", s.slice_idx},
                      {"perturbation", detail::mat4_json(s.perturbation.m)},
                      {"pivot", detail::vec3_json(s.pivot)},
                      {"center", detail::vec3_json(s.center)},
                      {"corrupted", s.corrupted},
                      {"artifacts", s.artifacts}});
  return {{"format_version", kFormatVersion}, {"phantom_seed", t.phantom_seed}, {"slices", slices}};
}

inline GroundTruth truth_from_json(const json& j, const std::string& what = "ground truth") {
  return detail::parsing(what, [&] {
    GroundTruth t;
    t.phantom_seed = j.at("phantom_seed").get<std::uint64_t>();
    for (const auto& s : j.at("slices")) {
      SliceTruth st;
      st.stack_idx = s.at("stack_idx").get<std::size_t>();
      st.slice_idx = s.at("slice_idx").get<std::size_t>();
      st.perturbation = detail::mat4_from(s.at("perturbation"));
      st.pivot = detail::vec3_from(s.at("pivot"));
      st.center = detail::vec3_from(s.at("center"));
      st.corrupted = s.at("corrupted").get<bool>();
      st.artifacts = s.at("artifacts").get<std::vector<std::string>>();
      t.slices.push_back(std::move(st));
    }
    return t;
  });
}

// Rotations are stored in radians (exact) and repeated in degrees for readers.
inline json to_json(const std::vector<model::SliceState>& states, const recon::TaskData* data = nullptr) {
  json slices = json::array();
  for (std::size_t i = 0; i < states.size(); ++i) {
    const auto& s = states[i];
    json e = {{"rotation_rad", {s.psi.v[0], s.psi.v[1], s.psi.v[2]}},
              {"rotation_deg",
               {s.psi.v[0] / geometry::kDegree, s.psi.v[1] / geometry::kDegree, s.psi.v[2] / geometry::kDegree}},
              {"translation_mm", {s.psi.v[3], s.psi.v[4], s.psi.v[5]}},
              {"sigma", s.sigma},
              {"omega", s.omega}};
    if (data) {
      e["stack_idx"] = data->slices[i].stack;
      e["slice_idx"] = data->slices[i].index_in_stack;
    }
    slices.push_back(e);
  }
  return {{"format_version", kFormatVersion}, {"slices", slices}};
}

inline std::vector<model::SliceState> states_from_json(const json& j, const std::string& what = "slice states") {
  return detail::parsing(what, [&] {
    std::vector<model::SliceState> out;
    for (const auto& e : j.at("slices")) {
      model::SliceState s;
      const auto r = e.at("rotation_rad").get<std::vector<double>>();
      const auto t = e.at("translation_mm").get<std::vector<double>>();
      if (r.size() != 3 || t.size() != 3) throw FormatError("rotation/translation need 3 entries");
      s.psi = geometry::RigidParams::from(r[0], r[1], r[2], t[0], t[1], t[2]);
      s.sigma = e.at("sigma").get<double>();
      s.omega = e.at("omega").get<double>();
      out.push_back(s);
    }
    return out;
  });
}

inline void write_json(const std::string& path, const json& j) { detail::write_text(path, j.dump(2) + "\n"); }
inline json read_json(const std::string& path) { return detail::read_json(path); }

// ---- model checkpoints

// What a checkpoint was trained on; reconstruct refuses to start from a
// checkpoint whose acquisition spacing differs from the case at hand.
struct CheckpointInfo {
  std::string kind = "model";  // "model" (one reconstruction) or "meta"
  model::NormalizedFrame frame;
  std::optional<std::array<double, 3>> spacing;  // rx, ry, rz of the training data
  json extra = json::object();
};

template <typename Scalar>
void write_checkpoint(const std::string& path, const recon::ModelParams<Scalar>& p, const CheckpointInfo& info) {
  Blob b;
  b.header = {{"format_version", kFormatVersion},
              {"kind", info.kind},
              {"sr", diffcore::param_header(p.sr.spec, p.sr.seed, p.sr.size())},
              {"slice", diffcore::param_header(p.slice.spec, p.slice.seed, p.slice.size())},
              {"frame", {{"center", detail::vec3_json(info.frame.center)}, {"half", detail::vec3_json(info.frame.half)}}},
              {"extra", info.extra}};
  if (info.spacing) b.header["spacing"] = *info.spacing;
  diffcore::append_params(b.payload, p.sr);
  diffcore::append_params(b.payload, p.slice);
  write_blob(path, kModelMagic, b);
}

template <typename Scalar>
struct Checkpoint {
  recon::ModelParams<Scalar> params;
  CheckpointInfo info;
};

template <typename Scalar>
Checkpoint<Scalar> read_checkpoint(const std::string& path) {
  const Blob b = read_blob(path, kModelMagic);
  return detail::parsing(path, [&] {
    const auto& h = b.header;
    Checkpoint<Scalar> c;
    c.params.sr = diffcore::params_from<Scalar>(h.at("sr"), b.payload, 0);
    c.params.slice = diffcore::params_from<Scalar>(h.at("slice"), b.payload, c.params.sr.size() * sizeof(double));
    if (b.payload.size() != (c.params.sr.size() + c.params.slice.size()) * sizeof(double))
      throw FormatError("payload length does not match parameter counts");
    c.info.kind = h.at("kind").get<std::string>();
    c.info.frame.center = detail::vec3_from(h.at("frame").at("center"));
    c.info.frame.half = detail::vec3_from(h.at("frame").at("half"));
    if (h.contains("spacing")) c.info.spacing = h.at("spacing").get<std::array<double, 3>>();
    c.info.extra = h.value("extra", json::object());
    return c;
  });
}

// Spacing shared by all stacks of a task (rx, ry, rz); ContractError if mixed.
inline std::array<double, 3> task_spacing(const std::vector<SliceStack>& stacks) {
  if (stacks.empty()) throw ContractError("task has no stacks");
  const std::array<double, 3> s{stacks[0].rx, stacks[0].ry, stacks[0].rz};
  for (const auto& st : stacks)
    if (std::array<double, 3>{st.rx, st.ry, st.rz} != s) throw ContractError("stacks of one task differ in spacing");
  return s;
}

inline bool spacing_matches(const std::array<double, 3>& a, const std::array<double, 3>& b, double tol = 1e-6) {
  for (std::size_t i = 0; i < 3; ++i)
    if (std::abs(a[i] - b[i]) > tol) return false;
  return true;
}

// ---- run configuration (key = value text)

struct RunConfig {
  recon::ReconConfig recon;
  meta::MetaConfig meta;  // meta.inner is replaced by `recon` on use
  simulate::DatasetOptions sim;
  double render_spacing = 0.5;  // mm, isotropic output grid
  long eval_every = 0;          // iterations between deterministic-loss samples in the trace; 0 = off

  meta::MetaConfig meta_config() const {
    meta::MetaConfig m = meta;
    m.inner = recon;
    m.seed = recon.seed;
    return m;
  }
};

inline const std::vector<config::Field<RunConfig>>& run_fields() {
  using config::Field;
  static const std::vector<Field<RunConfig>> f = [] {
    std::vector<Field<RunConfig>> out;
    for (const auto& rf : config::recon_fields())
      out.push_back({rf.key, [set = rf.set](RunConfig& c, std::string_view t) { set(c.recon, t); },
                     [get = rf.get](const RunConfig& c) { return get(c.recon); }});
    using M = meta::MetaConfig;
    using D = simulate::DatasetOptions;
    const auto m = [&](std::string key, auto M::*member) { out.push_back(config::nested("meta." + key, &RunConfig::meta, member)); };
    const auto d = [&](std::string key, auto D::*member) { out.push_back(config::nested("sim." + key, &RunConfig::sim, member)); };
    m("beta_start", &M::beta_start);
    m("beta_end", &M::beta_end);
    m("inner_iterations", &M::inner_iterations);
    m("max_outer_steps", &M::max_outer_steps);
    m("validate_every", &M::validate_every);
    m("validation_budget", &M::validation_budget);
    m("patience", &M::patience);
    d("phantom_size", &D::phantom_size);
    d("phantom_spacing", &D::phantom_spacing);
    d("rx", &D::rx);
    d("ry", &D::ry);
    d("rz", &D::rz);
    d("gap", &D::gap);
    d("image_artifacts", &D::image_artifacts);
    d("psf_samples", &D::psf_samples);
    out.push_back(config::field("render_spacing", &RunConfig::render_spacing));
    out.push_back(config::field("eval_every", &RunConfig::eval_every));
    return out;
  }();
  return f;
}

// Parses "key = value" lines; '#' starts a comment. Unknown or repeated keys
// are rejected and `seed` must be present.
inline RunConfig parse_run_config(const std::string& text, const std::string& what = "config") {
  RunConfig cfg;
  std::map<std::string, int> seen;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  auto trim = [](std::string s) {
    const auto a = s.find_first_not_of(" \t\r");
    if (a == std::string::npos) return std::string();
    const auto b = s.find_last_not_of(" \t\r");
    return s.substr(a, b - a + 1);
  };
  while (std::getline(in, line)) {
    ++lineno;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError(what + ":" + std::to_string(lineno) + ": expected 'key = value'");
    const std::string key = trim(line.substr(0, eq)), value = trim(line.substr(eq + 1));
    const auto* f = config::find_field(run_fields(), key);
    if (!f) throw ConfigError(what + ":" + std::to_string(lineno) + ": unknown key '" + key + "'");
    if (seen.count(key)) throw ConfigError(what + ":" + std::to_string(lineno) + ": duplicate key '" + key + "'");
    seen[key] = lineno;
    f->set(cfg, value);
  }
  if (!seen.count("seed")) throw ConfigError(what + ": 'seed' is mandatory");
  cfg.recon.validate();
  cfg.meta_config().validate();
  if (!(cfg.render_spacing > 0.0)) throw ConfigError(what + ": render_spacing must be positive");
  return cfg;
}

inline std::string format_run_config(const RunConfig& cfg) {
  std::string s;
  for (const auto& f : run_fields()) s += f.key + " = " + f.get(cfg) + "\n";
  return s;
}

// A config file that does not parse or validate counts as a malformed file.
inline RunConfig read_run_config(const std::string& path) {
  try {
    return parse_run_config(detail::read_text(path), path);
  } catch (const ConfigError& e) {
    throw FormatError(e.what());
  }
}
inline void write_run_config(const std::string& path, const RunConfig& cfg) {
  detail::write_text(path, format_run_config(cfg));
}

// ---- case directories
//
//   stack_<k>.stack    one per stack
//   truth.json         simulator ground truth
//   phantom.vol        source phantom; phantom_mask.vol its head mask
//   task.json          task id and config overrides

inline std::string stack_name(std::size_t k) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "stack_%02zu.stack", k);
  return buf;
}

inline void write_case(const fs::path& dir, const simulate::Case& c) {
  fs::create_directories(dir);
  for (std::size_t k = 0; k < c.task.stacks.size(); ++k) write_stack((dir / stack_name(k)).string(), c.task.stacks[k]);
  write_json((dir / "truth.json").string(), to_json(c.truth));
  write_volume((dir / "phantom.vol").string(), c.phantom.volume);
  write_volume((dir / "phantom_mask.vol").string(), c.phantom.mask);
  write_json((dir / "task.json").string(), {{"id", c.task.id}, {"overrides", c.task.overrides}});
}

inline Task read_task(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw FormatError("not a case directory: " + dir.string());
  Task t;
  t.id = dir.filename().string();
  const auto meta = dir / "task.json";
  if (fs::exists(meta)) {
    const auto j = read_json(meta.string());
    detail::parsing(meta.string(), [&] {
      t.id = j.value("id", t.id);
      t.overrides = j.value("overrides", json::object());
      return 0;
    });
  }
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(dir))
    if (e.path().extension() == ".stack") files.push_back(e.path());
  std::sort(files.begin(), files.end());
  if (files.empty()) throw FormatError("no .stack files in " + dir.string());
  for (const auto& f : files) t.stacks.push_back(read_stack(f.string()));
  return t;
}

// Every immediate subdirectory holding stacks, in name order.
inline std::vector<Task> read_tasks(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw FormatError("not a directory: " + dir.string());
  std::vector<fs::path> dirs;
  for (const auto& e : fs::directory_iterator(dir))
    if (e.is_directory()) dirs.push_back(e.path());
  std::sort(dirs.begin(), dirs.end());
  std::vector<Task> out;
  for (const auto& d : dirs) out.push_back(read_task(d));
  if (out.empty()) throw FormatError("no case directories in " + dir.string());
  return out;
}

// ---- CSV outputs

inline std::string trace_csv(const std::vector<recon::TraceRow>& trace,
                             const std::vector<std::pair<long, double>>& eval_trace) {
  std::map<long, double> ev(eval_trace.begin(), eval_trace.end());
  std::string s = "iteration,loss,lr_sr,lr_slice,k,eval_loss\n";
  char buf[256];
  for (const auto& r : trace) {
    const auto it = ev.find(r.iteration);
    std::snprintf(buf, sizeof buf, "%ld,%.9g,%.9g,%.9g,%ld,", r.iteration, r.loss, r.lr_sr, r.lr_slice, r.k);
    s += buf;
    if (it != ev.end()) s += config::to_text(it->second);
    s += "\n";
  }
  return s;
}

}  // namespace svrec::io
