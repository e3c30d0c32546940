#pragma once

#include <string>

#include <json.hpp>

#include "svrec/blob.hpp"
#include "svrec/diffcore/mlp.hpp"

namespace svrec::diffcore {

inline constexpr int kLayoutVersion = 1;

inline nlohmann::json to_json(const MlpSpec& spec) {
  nlohmann::json j;
  j["layer_widths"] = spec.layer_widths;
  switch (spec.activation.kind) {
    case ActivationKind::sine: j["activation"] = "sine"; break;
    case ActivationKind::relu: j["activation"] = "relu"; break;
    case ActivationKind::linear: j["activation"] = "linear"; break;
  }
  j["w0"] = spec.activation.w0;
  j["heads"] = nlohmann::json::array();
  for (const auto& h : spec.heads) {
    const char* act = h.final_activation == HeadActivation::identity ? "identity"
                      : h.final_activation == HeadActivation::tanh   ? "tanh"
                                                                     : "sigmoid";
    j["heads"].push_back({{"offset", h.offset}, {"width", h.width}, {"final_activation", act}});
  }
  return j;
}

inline MlpSpec spec_from_json(const nlohmann::json& j) {
  try {
    MlpSpec spec;
    spec.layer_widths = j.at("layer_widths").get<std::vector<std::size_t>>();
    const auto act = j.at("activation").get<std::string>();
    const double w0 = j.value("w0", 30.0);
    if (act == "sine") spec.activation = Activation::sine(w0);
    else if (act == "relu") spec.activation = Activation::relu();
    else if (act == "linear") spec.activation = Activation::linear();
    else throw FormatError("unknown activation '" + act + "'");
    for (const auto& h : j.value("heads", nlohmann::json::array())) {
      HeadSplit split;
      split.offset = h.at("offset").get<std::size_t>();
      split.width = h.at("width").get<std::size_t>();
      const auto fa = h.value("final_activation", std::string("identity"));
      if (fa == "identity") split.final_activation = HeadActivation::identity;
      else if (fa == "tanh") split.final_activation = HeadActivation::tanh;
      else if (fa == "sigmoid") split.final_activation = HeadActivation::sigmoid;
      else throw FormatError("unknown head activation '" + fa + "'");
      spec.heads.push_back(split);
    }
    spec.validate();
    return spec;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("malformed network spec: ") + e.what());
  } catch (const ConfigError& e) {
    throw FormatError(std::string("invalid network spec: ") + e.what());
  }
}

inline nlohmann::json param_header(const MlpSpec& spec, std::uint64_t seed, std::size_t count) {
  return {{"spec", to_json(spec)}, {"layout_version", kLayoutVersion}, {"seed", seed}, {"count", count}};
}

// Appends the parameter values as little-endian float64.
template <typename Scalar>
void append_params(std::vector<std::uint8_t>& payload, const ParamSet<Scalar>& params) {
  append_numbers<double>(payload, params.values);
}

template <typename Scalar>
ParamSet<Scalar> params_from(const nlohmann::json& header, const std::vector<std::uint8_t>& payload, std::size_t offset) {
  if (header.value("layout_version", 0) != kLayoutVersion) throw FormatError("unsupported parameter layout version");
  MlpSpec spec = spec_from_json(header.at("spec"));
  const std::size_t count = header.at("count").get<std::size_t>();
  if (count != parameter_count(spec)) throw FormatError("parameter count does not match spec");
  auto raw = read_numbers<double>(payload, offset, count);
  ParamSet<Scalar> out;
  out.spec = std::move(spec);
  out.seed = header.value("seed", std::uint64_t{0});
  out.values.assign(raw.begin(), raw.end());
  return out;
}

inline constexpr std::string_view kParamMagic = "SVRPARAM";

template <typename Scalar>
void save_params(const std::string& path, const ParamSet<Scalar>& params) {
  Blob blob;
  blob.header = param_header(params.spec, params.seed, params.values.size());
  append_params(blob.payload, params);
  write_blob(path, kParamMagic, blob);
}

template <typename Scalar>
ParamSet<Scalar> load_params(const std::string& path) {
  const Blob blob = read_blob(path, kParamMagic);
  if (blob.payload.size() != blob.header.at("count").get<std::size_t>() * sizeof(double))
    throw FormatError(path + ": payload length does not match header count");
  return params_from<Scalar>(blob.header, blob.payload, 0);
}

}  // namespace svrec::diffcore
