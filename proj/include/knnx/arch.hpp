#pragma once

#include <cstddef>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "knnx/errors.hpp"

namespace knnx {

enum class LayerKind { dense, conv2d, relu, maxpool, dropout, flatten };

inline const char* to_string(LayerKind k) {
  switch (k) {
    case LayerKind::dense: return "dense";
    case LayerKind::conv2d: return "conv2d";
    case LayerKind::relu: return "relu";
    case LayerKind::maxpool: return "maxpool";
    case LayerKind::dropout: return "dropout";
    case LayerKind::flatten: return "flatten";
  }
  return "?";
}

// One layer and the name under which its output is exposed.
struct LayerSpec {
  LayerKind kind = LayerKind::dense;
  std::string tap;
  int units = 0;  // dense out_dim or conv2d out_channels
  int kernel = 0;
  int stride = 1;
  double rate = 0.0;

  static LayerSpec dense(int out_dim, std::string tap) { return {LayerKind::dense, std::move(tap), out_dim}; }
  static LayerSpec conv2d(int out_channels, int kernel, int stride, std::string tap) {
    return {LayerKind::conv2d, std::move(tap), out_channels, kernel, stride};
  }
  static LayerSpec relu(std::string tap) { return {LayerKind::relu, std::move(tap)}; }
  static LayerSpec maxpool(int kernel, std::string tap) { return {LayerKind::maxpool, std::move(tap), 0, kernel, kernel}; }
  static LayerSpec dropout(double rate, std::string tap) { return {LayerKind::dropout, std::move(tap), 0, 0, 1, rate}; }
  static LayerSpec flatten(std::string tap) { return {LayerKind::flatten, std::move(tap)}; }

  bool parametric() const noexcept { return kind == LayerKind::dense || kind == LayerKind::conv2d; }

  friend bool operator==(const LayerSpec&, const LayerSpec&) = default;
};

// Activation shape. Flat vectors use channels = size, height = width = 1.
struct Shape {
  int channels = 0;
  int height = 1;
  int width = 1;
  bool spatial = false;

  std::size_t size() const noexcept {
    return static_cast<std::size_t>(channels) * static_cast<std::size_t>(height) * static_cast<std::size_t>(width);
  }
  friend bool operator==(const Shape&, const Shape&) = default;
};

struct ArchSpec {
  // [d] for vector input, [channels, height, width] for images.
  std::vector<int> input;
  std::vector<LayerSpec> layers;

  std::vector<std::string> tap_names() const {
    std::vector<std::string> out;
    out.reserve(layers.size());
    for (const auto& l : layers) out.push_back(l.tap);
    return out;
  }

  friend bool operator==(const ArchSpec&, const ArchSpec&) = default;
};

struct LayerPlan {
  Shape in;
  Shape out;
  std::size_t param_offset = 0;
  std::size_t param_count = 0;
  std::size_t fan_in = 0;  // inputs per output unit, excluding the bias
};

inline Shape input_shape(const ArchSpec& arch) {
  if (arch.input.size() == 1 && arch.input[0] >= 1) return {arch.input[0], 1, 1, false};
  if (arch.input.size() == 3 && arch.input[0] >= 1 && arch.input[1] >= 1 && arch.input[2] >= 1)
    return {arch.input[0], arch.input[1], arch.input[2], true};
  throw ArchError("input must be [d] or [channels, height, width] with positive entries");
}

// Type-checks the dimension chain and lays out the flat parameter vector.
// Parametric layers store one row per output unit: fan_in weights then bias.
inline std::vector<LayerPlan> plan_layers(const ArchSpec& arch) {
  if (arch.layers.empty()) throw ArchError("architecture has no layers");
  std::set<std::string> taps;
  for (const auto& l : arch.layers) {
    if (l.tap.empty()) throw ArchError("every layer needs a tap name");
    if (!taps.insert(l.tap).second) throw ArchError("duplicate tap name '" + l.tap + "'");
  }
  if (arch.layers.back().kind != LayerKind::dense)
    throw ArchError("last layer must be dense (the logit layer), got " + std::string(to_string(arch.layers.back().kind)));

  std::vector<LayerPlan> plan;
  plan.reserve(arch.layers.size());
  Shape cur = input_shape(arch);
  std::size_t offset = 0;
  for (const auto& l : arch.layers) {
    LayerPlan p;
    p.in = cur;
    const std::string where = "layer '" + l.tap + "' (" + to_string(l.kind) + ")";
    switch (l.kind) {
      case LayerKind::dense:
        if (cur.spatial) throw ArchError(where + ": dense needs a flat input; insert a flatten layer");
        if (l.units < 1) throw ArchError(where + ": out_dim must be >= 1");
        p.fan_in = cur.size();
        p.out = {l.units, 1, 1, false};
        p.param_count = static_cast<std::size_t>(l.units) * (p.fan_in + 1);
        break;
      case LayerKind::conv2d: {
        if (!cur.spatial) throw ArchError(where + ": conv2d needs a [channels, height, width] input");
        if (l.units < 1 || l.kernel < 1 || l.stride < 1) throw ArchError(where + ": out_channels, kernel and stride must be >= 1");
        if (l.kernel > cur.height || l.kernel > cur.width)
          throw ArchError(where + ": kernel " + std::to_string(l.kernel) + " exceeds input " + std::to_string(cur.height) + "x" +
                          std::to_string(cur.width));
        p.fan_in = static_cast<std::size_t>(cur.channels) * l.kernel * l.kernel;
        p.out = {l.units, (cur.height - l.kernel) / l.stride + 1, (cur.width - l.kernel) / l.stride + 1, true};
        p.param_count = static_cast<std::size_t>(l.units) * (p.fan_in + 1);
        break;
      }
      case LayerKind::maxpool:
        if (!cur.spatial) throw ArchError(where + ": maxpool needs a [channels, height, width] input");
        if (l.kernel < 1) throw ArchError(where + ": kernel must be >= 1");
        if (l.kernel > cur.height || l.kernel > cur.width) throw ArchError(where + ": kernel exceeds input size");
        p.out = {cur.channels, cur.height / l.kernel, cur.width / l.kernel, true};
        break;
      case LayerKind::relu:
        p.out = cur;
        break;
      case LayerKind::dropout:
        if (!(l.rate >= 0.0 && l.rate < 1.0)) throw ArchError(where + ": rate must be in [0, 1)");
        p.out = cur;
        break;
      case LayerKind::flatten:
        p.out = {static_cast<int>(cur.size()), 1, 1, false};
        break;
    }
    p.param_offset = offset;
    offset += p.param_count;
    cur = p.out;
    plan.push_back(p);
  }
  return plan;
}

inline std::size_t num_outputs(const ArchSpec& arch) { return static_cast<std::size_t>(arch.layers.back().units); }

// ---- Structured text form ------------------------------------------------
//
//   {"input": [20],
//    "layers": [{"type": "dense", "out": 32, "tap": "fc1"},
//               {"type": "relu", "tap": "relu1"},
//               {"type": "conv2d", "out_channels": 8, "kernel": 3, "stride": 1, "tap": "conv1"},
//               {"type": "maxpool", "kernel": 2, "tap": "pool1"},
//               {"type": "dropout", "rate": 0.5, "tap": "drop1"},
//               {"type": "flatten", "tap": "flat"}]}
//
// Unknown keys are rejected.

inline nlohmann::json arch_to_json(const ArchSpec& arch) {
  nlohmann::json layers = nlohmann::json::array();
  for (const auto& l : arch.layers) {
    nlohmann::json o;
    o["type"] = to_string(l.kind);
    o["tap"] = l.tap;
    switch (l.kind) {
      case LayerKind::dense: o["out"] = l.units; break;
      case LayerKind::conv2d:
        o["out_channels"] = l.units;
        o["kernel"] = l.kernel;
        o["stride"] = l.stride;
        break;
      case LayerKind::maxpool: o["kernel"] = l.kernel; break;
      case LayerKind::dropout: o["rate"] = l.rate; break;
      default: break;
    }
    layers.push_back(std::move(o));
  }
  return {{"input", arch.input}, {"layers", std::move(layers)}};
}

namespace detail {

inline void require_keys(const nlohmann::json& j, const std::set<std::string>& allowed, const std::string& where) {
  if (!j.is_object()) throw ArchError(where + ": expected an object");
  for (const auto& [key, _] : j.items())
    if (!allowed.count(key)) throw ArchError(where + ": unknown key '" + key + "'");
}

template <class T>
T get_required(const nlohmann::json& j, const char* key, const std::string& where) {
  if (!j.contains(key)) throw ArchError(where + ": missing key '" + key + "'");
  try {
    return j.at(key).get<T>();
  } catch (const nlohmann::json::exception&) {
    throw ArchError(where + ": key '" + key + "' has the wrong type");
  }
}

}  // namespace detail

inline ArchSpec arch_from_json(const nlohmann::json& j) {
  detail::require_keys(j, {"input", "layers"}, "arch");
  ArchSpec arch;
  arch.input = detail::get_required<std::vector<int>>(j, "input", "arch");
  if (!j.contains("layers") || !j["layers"].is_array()) throw ArchError("arch: 'layers' must be an array");
  std::size_t idx = 0;
  for (const auto& lj : j["layers"]) {
    const std::string where = "arch.layers[" + std::to_string(idx++) + "]";
    if (!lj.is_object()) throw ArchError(where + ": expected an object");
    const auto type = detail::get_required<std::string>(lj, "type", where);
    const auto tap = detail::get_required<std::string>(lj, "tap", where);
    if (type == "dense") {
      detail::require_keys(lj, {"type", "tap", "out"}, where);
      arch.layers.push_back(LayerSpec::dense(detail::get_required<int>(lj, "out", where), tap));
    } else if (type == "conv2d") {
      detail::require_keys(lj, {"type", "tap", "out_channels", "kernel", "stride"}, where);
      const int stride = lj.contains("stride") ? detail::get_required<int>(lj, "stride", where) : 1;
      arch.layers.push_back(LayerSpec::conv2d(detail::get_required<int>(lj, "out_channels", where),
                                              detail::get_required<int>(lj, "kernel", where), stride, tap));
    } else if (type == "relu") {
      detail::require_keys(lj, {"type", "tap"}, where);
      arch.layers.push_back(LayerSpec::relu(tap));
    } else if (type == "maxpool") {
      detail::require_keys(lj, {"type", "tap", "kernel"}, where);
      arch.layers.push_back(LayerSpec::maxpool(detail::get_required<int>(lj, "kernel", where), tap));
    } else if (type == "dropout") {
      detail::require_keys(lj, {"type", "tap", "rate"}, where);
      arch.layers.push_back(LayerSpec::dropout(detail::get_required<double>(lj, "rate", where), tap));
    } else if (type == "flatten") {
      detail::require_keys(lj, {"type", "tap"}, where);
      arch.layers.push_back(LayerSpec::flatten(tap));
    } else {
      throw ArchError(where + ": unknown layer type '" + type + "'");
    }
  }
  plan_layers(arch);
  return arch;
}

}  // namespace knnx
