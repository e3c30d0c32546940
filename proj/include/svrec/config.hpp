#pragma once

#include <charconv>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <string>
#include <string_view>
#include <system_error>
#include <vector>

#include <json.hpp>

#include "svrec/error.hpp"
#include "svrec/recon.hpp"

// Text form of configuration values and the keyed view of ReconConfig used by
// run-config files and per-task overrides. Doubles are written in shortest
// round-trip form so write -> read is bit-exact.
namespace svrec::config {

inline std::string to_text(double v) {
  char buf[64];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}
inline std::string to_text(int v) { return std::to_string(v); }
inline std::string to_text(long v) { return std::to_string(v); }
inline std::string to_text(std::size_t v) { return std::to_string(v); }
inline std::string to_text(bool v) { return v ? "true" : "false"; }
inline std::string to_text(diffcore::ActivationKind a) {
  return a == diffcore::ActivationKind::sine ? "sine" : a == diffcore::ActivationKind::relu ? "relu" : "linear";
}
inline std::string to_text(const std::vector<std::size_t>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
  return s;
}

template <typename T>
T parse_number(std::string_view key, std::string_view text) {
  T v{};
  const auto r = std::from_chars(text.data(), text.data() + text.size(), v);
  if (text.empty() || r.ec != std::errc() || r.ptr != text.data() + text.size())
    throw ConfigError("config: bad value '" + std::string(text) + "' for key '" + std::string(key) + "'");
  return v;
}

inline void from_text(std::string_view key, std::string_view t, double& out) { out = parse_number<double>(key, t); }
inline void from_text(std::string_view key, std::string_view t, int& out) { out = parse_number<int>(key, t); }
inline void from_text(std::string_view key, std::string_view t, long& out) { out = parse_number<long>(key, t); }
inline void from_text(std::string_view key, std::string_view t, std::size_t& out) { out = parse_number<std::size_t>(key, t); }
inline void from_text(std::string_view key, std::string_view t, bool& out) {
  if (t == "true" || t == "1") out = true;
  else if (t == "false" || t == "0") out = false;
  else throw ConfigError("config: expected true/false for key '" + std::string(key) + "'");
}
inline void from_text(std::string_view key, std::string_view t, diffcore::ActivationKind& out) {
  if (t == "sine") out = diffcore::ActivationKind::sine;
  else if (t == "relu") out = diffcore::ActivationKind::relu;
  else if (t == "linear") out = diffcore::ActivationKind::linear;
  else throw ConfigError("config: unknown activation '" + std::string(t) + "' for key '" + std::string(key) + "'");
}
inline void from_text(std::string_view key, std::string_view t, std::vector<std::size_t>& out) {
  out.clear();
  std::size_t start = 0;
  while (start <= t.size()) {
    const auto comma = t.find(',', start);
    const auto item = t.substr(start, comma == std::string_view::npos ? std::string_view::npos : comma - start);
    out.push_back(parse_number<std::size_t>(key, item));
    if (comma == std::string_view::npos) break;
    start = comma + 1;
  }
}

// One named setting of a configuration struct C.
template <typename C>
struct Field {
  std::string key;
  std::function<void(C&, std::string_view)> set;
  std::function<std::string(const C&)> get;
};

template <typename C, typename M>
Field<C> field(std::string key, M C::*member) {
  return {key, [member, key](C& c, std::string_view t) { from_text(key, t, c.*member); },
          [member](const C& c) { return to_text(c.*member); }};
}

template <typename C, typename S, typename M>
Field<C> nested(std::string key, S C::*outer, M S::*member) {
  return {key, [outer, member, key](C& c, std::string_view t) { from_text(key, t, c.*outer.*member); },
          [outer, member](const C& c) { return to_text(c.*outer.*member); }};
}

inline const std::vector<Field<recon::ReconConfig>>& recon_fields() {
  using R = recon::ReconConfig;
  static const std::vector<Field<R>> f = {
      field("seed", &R::seed),
      field("sr_hidden", &R::sr_hidden),
      field("slice_hidden", &R::slice_hidden),
      field("w0", &R::w0),
      field("slice_w0", &R::slice_w0),
      field("sr_activation", &R::sr_activation),
      field("slice_activation", &R::slice_activation),
      field("lr_sr", &R::lr_sr),
      field("lr_slice", &R::lr_slice),
      field("lr_min", &R::lr_min),
      field("batch_size", &R::batch_size),
      field("alpha", &R::alpha),
      field("alpha_meta", &R::alpha_meta),
      field("k_cap", &R::k_cap),
      nested("motion_scale_rotation", &R::motion_scale, &model::MotionScale::rotation),
      nested("motion_scale_translation", &R::motion_scale, &model::MotionScale::translation),
      field("motion", &R::motion),
      field("outlier", &R::outlier),
      field("omega_prior", &R::omega_prior),
      field("sigma_prior", &R::sigma_prior),
      field("zero_slice_heads", &R::zero_slice_heads),
      field("motion_warmup", &R::motion_warmup),
      field("bbox_margin", &R::bbox_margin),
      field("chunk_points", &R::chunk_points),
      field("eval_pixels", &R::eval_pixels),
      field("eval_k", &R::eval_k),
  };
  return f;
}

template <typename C>
const Field<C>* find_field(const std::vector<Field<C>>& fields, std::string_view key) {
  for (const auto& f : fields)
    if (f.key == key) return &f;
  return nullptr;
}

// JSON scalar/array -> config text.
inline std::string json_text(const nlohmann::json& v) {
  if (v.is_string()) return v.get<std::string>();
  if (v.is_boolean()) return to_text(v.get<bool>());
  if (v.is_number_unsigned()) return std::to_string(v.get<std::uint64_t>());
  if (v.is_number_integer()) return std::to_string(v.get<long>());
  if (v.is_number_float()) return to_text(v.get<double>());
  if (v.is_array()) {
    std::string s;
    for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + json_text(v[i]);
    return s;
  }
  throw ConfigError("config: unsupported override value " + v.dump());
}

}  // namespace svrec::config

namespace svrec::recon {

// cfg with a task's overrides applied; unknown keys are rejected.
inline ReconConfig with_overrides(ReconConfig cfg, const nlohmann::json& overrides) {
  if (overrides.is_null()) return cfg;
  if (!overrides.is_object()) throw ConfigError("task overrides must be a JSON object");
  for (const auto& [key, value] : overrides.items()) {
    const auto* f = config::find_field(config::recon_fields(), key);
    if (!f) throw ConfigError("unknown override key '" + key + "'");
    f->set(cfg, config::json_text(value));
  }
  return cfg;
}

}  // namespace svrec::recon
