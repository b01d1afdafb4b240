#pragma once

// INI run configuration with [model], [train] and [data] sections. Values are
// collected first, then applied over the preset named by model.preset, so key
// order inside a file does not matter. `key=value` overrides use the dotted
// form (train.lr=0.01) and are applied after the file.

#include <algorithm>
#include <charconv>
#include <cstdint>
#include <cstdlib>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "mfpnet/blocks.hpp"
#include "mfpnet/data.hpp"
#include "mfpnet/error.hpp"
#include "mfpnet/network.hpp"
#include "mfpnet/train.hpp"

namespace mfpnet {

struct DataConfig {
  std::uint64_t seed = 0;
  std::size_t train_count = 128;
  std::size_t val_count = 32;
  SynthOptions synth;
  std::string train_manifest;  // empty: generate synthetically
  std::string val_manifest;
};

struct RunConfig {
  std::string preset = "desk";
  ModelConfig model = desk_config();
  TrainConfig train;
  DataConfig data;
};

struct ConfigKey {
  const char* key;
  const char* help;
};

inline const std::vector<ConfigKey>& config_keys() {
  static const std::vector<ConfigKey> keys{
      {"model.preset", "base architecture: default, desk or tiny"},
      {"model.num_classes", "number of output classes K"},
      {"model.c0", "initial block width"},
      {"model.channels", "encoder stage widths, three comma-separated integers"},
      {"model.dilations", "encoder BRM rates per block, groups separated by '|' (3 mirrored or 6)"},
      {"model.sgcn", "graph branch on or off"},
      {"model.sgcn_dims", "graph dimension d per scale, three integers (default C/2)"},
      {"model.sgcn_pool", "average-pool factor before graph projection"},
      {"model.gcn_layers", "graph convolution layers per scale"},
      {"model.head", "segmentation head: none, se, psp or aspp"},
      {"model.head_rates", "aspp dilation rates, comma-separated"},
      {"model.head_reduction", "head channel reduction"},
      {"model.brm_reduction", "BRM internal channel ratio"},
      {"model.se_reduction", "SE hidden-layer reduction"},
      {"model.input", "training/inference extent HxW, multiples of 16"},
      {"train.optimizer", "sgd or adam"},
      {"train.lr", "initial learning rate lr_in"},
      {"train.weight_decay", "decoupled weight decay"},
      {"train.momentum", "sgd momentum"},
      {"train.beta1", "adam first-moment decay"},
      {"train.beta2", "adam second-moment decay"},
      {"train.eps", "adam epsilon"},
      {"train.total_iter", "iterations"},
      {"train.batch", "batch size"},
      {"train.seed", "weight-init and shuffle seed (MFPNET_SEED overrides)"},
      {"train.poly_power", "poly schedule exponent"},
      {"data.seed", "synthetic data seed"},
      {"data.train_count", "synthetic training samples"},
      {"data.val_count", "synthetic held-out samples"},
      {"data.min_shapes", "fewest shapes per synthetic sample"},
      {"data.max_shapes", "most shapes per synthetic sample"},
      {"data.noise", "uniform pixel noise amplitude"},
      {"data.train_manifest", "image<TAB>label manifest for training (overrides synthesis)"},
      {"data.val_manifest", "image<TAB>label manifest for evaluation"},
  };
  return keys;
}

namespace detail {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

inline std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::string cur;
  std::istringstream is(s);
  while (std::getline(is, cur, sep)) out.push_back(trim(cur));
  if (!s.empty() && s.back() == sep) out.push_back("");
  return out;
}

inline std::uint64_t parse_uint(const std::string& key, const std::string& v) {
  std::uint64_t out = 0;
  const auto* end = v.data() + v.size();
  auto [p, ec] = std::from_chars(v.data(), end, out);
  if (ec != std::errc() || p != end || v.empty()) {
    throw ConfigError(key + ": expected a non-negative integer, got '" + v + "'");
  }
  return out;
}

inline double parse_double(const std::string& key, const std::string& v) {
  char* end = nullptr;
  const double d = std::strtod(v.c_str(), &end);
  if (v.empty() || end != v.c_str() + v.size() || !std::isfinite(d)) {
    throw ConfigError(key + ": expected a finite number, got '" + v + "'");
  }
  return d;
}

inline bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "on" || v == "true" || v == "1" || v == "yes") return true;
  if (v == "off" || v == "false" || v == "0" || v == "no") return false;
  throw ConfigError(key + ": expected on/off, got '" + v + "'");
}

inline std::vector<std::size_t> parse_list(const std::string& key, const std::string& v) {
  std::vector<std::size_t> out;
  for (const auto& part : split(v, ',')) out.push_back(parse_uint(key, part));
  return out;
}

template <std::size_t N>
inline std::array<std::size_t, N> parse_array(const std::string& key, const std::string& v) {
  const auto list = parse_list(key, v);
  if (list.size() != N) {
    throw ConfigError(key + ": expected " + std::to_string(N) + " values, got " +
                      std::to_string(list.size()));
  }
  std::array<std::size_t, N> out{};
  std::copy(list.begin(), list.end(), out.begin());
  return out;
}

inline std::array<std::size_t, 2> parse_extent(const std::string& key, const std::string& v) {
  const auto x = v.find('x');
  if (x == std::string::npos) throw ConfigError(key + ": expected HxW, got '" + v + "'");
  return {parse_uint(key, trim(v.substr(0, x))), parse_uint(key, trim(v.substr(x + 1)))};
}

inline std::string join(const std::vector<std::size_t>& v, const char* sep = ",") {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? sep : "") + std::to_string(v[i]);
  return s;
}

inline ModelConfig preset_config(const std::string& name) {
  if (name == "default") return default_config();
  if (name == "desk") return desk_config();
  if (name == "tiny") return tiny_config();
  throw ConfigError("model.preset: unknown preset '" + name + "' (expected default, desk or tiny)");
}

}  // namespace detail

/// Ordered key/value pairs, later entries win.
using ConfigEntries = std::vector<std::pair<std::string, std::string>>;

inline ConfigEntries parse_ini(const std::string& text, const std::string& source = "<config>") {
  ConfigEntries out;
  std::string section;
  std::istringstream is(text);
  std::string raw;
  std::size_t lineno = 0;
  while (std::getline(is, raw)) {
    ++lineno;
    const auto hash = raw.find_first_of("#;");
    const std::string line = detail::trim(hash == std::string::npos ? raw : raw.substr(0, hash));
    if (line.empty()) continue;
    const std::string where = source + ":" + std::to_string(lineno);
    if (line.front() == '[') {
      if (line.back() != ']') throw ConfigError(where + ": unterminated section header");
      section = detail::trim(line.substr(1, line.size() - 2));
      if (section != "model" && section != "train" && section != "data") {
        throw ConfigError(where + ": unknown section [" + section + "]");
      }
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError(where + ": expected key = value");
    if (section.empty()) throw ConfigError(where + ": key outside any section");
    out.emplace_back(section + "." + detail::trim(line.substr(0, eq)), detail::trim(line.substr(eq + 1)));
  }
  return out;
}

inline ConfigEntries load_ini(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open config file '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_ini(ss.str(), path);
}

inline std::pair<std::string, std::string> parse_override(const std::string& kv) {
  const auto eq = kv.find('=');
  if (eq == std::string::npos || eq == 0) {
    throw ConfigError("override '" + kv + "': expected section.key=value");
  }
  return {detail::trim(kv.substr(0, eq)), detail::trim(kv.substr(eq + 1))};
}

/// Builds a validated RunConfig from entries; unknown keys are rejected.
inline RunConfig resolve_config(const ConfigEntries& entries) {
  std::map<std::string, std::string> kv;
  for (const auto& [k, v] : entries) {
    const bool known = std::any_of(config_keys().begin(), config_keys().end(),
                                   [&](const ConfigKey& c) { return k == c.key; });
    if (!known) throw ConfigError("unknown config key '" + k + "'");
    kv[k] = v;
  }
  auto get = [&](const char* k) -> std::optional<std::string> {
    auto it = kv.find(k);
    if (it == kv.end()) return std::nullopt;
    return it->second;
  };

  RunConfig rc;
  if (auto v = get("model.preset")) rc.preset = *v;
  rc.model = detail::preset_config(rc.preset);
  ModelConfig& m = rc.model;
  using namespace detail;
  if (auto v = get("model.num_classes")) m.num_classes = parse_uint("model.num_classes", *v);
  if (auto v = get("model.c0")) m.c0 = parse_uint("model.c0", *v);
  if (auto v = get("model.channels")) {
    m.stage_channels = parse_array<3>("model.channels", *v);
    for (std::size_t i = 0; i < 3; ++i) m.sgcn_dims[i] = std::max<std::size_t>(1, m.stage_channels[i] / 2);
  }
  if (auto v = get("model.dilations")) {
    const auto groups = split(*v, '|');
    if (groups.size() != 3 && groups.size() != 6) {
      throw ConfigError("model.dilations: expected 3 or 6 '|'-separated groups, got " +
                        std::to_string(groups.size()));
    }
    for (std::size_t b = 0; b < 6; ++b) {
      const std::size_t src = groups.size() == 3 ? (b < 3 ? b : 5 - b) : b;
      m.dilations[b] = parse_list("model.dilations", groups[src]);
      m.brm_counts[b] = m.dilations[b].size();
    }
  }
  if (auto v = get("model.sgcn")) m.sgcn_enabled = parse_bool("model.sgcn", *v);
  if (auto v = get("model.sgcn_dims")) m.sgcn_dims = parse_array<3>("model.sgcn_dims", *v);
  if (auto v = get("model.sgcn_pool")) m.sgcn_pool = parse_uint("model.sgcn_pool", *v);
  if (auto v = get("model.gcn_layers")) m.gcn_layers = parse_uint("model.gcn_layers", *v);
  if (auto v = get("model.head")) m.head.type = parse_head_type(*v);
  if (auto v = get("model.head_rates")) m.head.rates = parse_list("model.head_rates", *v);
  if (auto v = get("model.head_reduction")) m.head.reduction = parse_uint("model.head_reduction", *v);
  if (auto v = get("model.brm_reduction")) m.brm_reduction = parse_uint("model.brm_reduction", *v);
  if (auto v = get("model.se_reduction")) m.se_reduction = parse_uint("model.se_reduction", *v);
  if (auto v = get("model.input")) m.input_hw = parse_extent("model.input", *v);

  TrainConfig& t = rc.train;
  if (auto v = get("train.optimizer")) t.optimizer = parse_optimizer(*v);
  if (auto v = get("train.lr")) t.lr_in = parse_double("train.lr", *v);
  if (auto v = get("train.weight_decay")) t.weight_decay = parse_double("train.weight_decay", *v);
  if (auto v = get("train.momentum")) t.momentum = parse_double("train.momentum", *v);
  if (auto v = get("train.beta1")) t.beta1 = parse_double("train.beta1", *v);
  if (auto v = get("train.beta2")) t.beta2 = parse_double("train.beta2", *v);
  if (auto v = get("train.eps")) t.eps = parse_double("train.eps", *v);
  if (auto v = get("train.total_iter")) t.total_iter = parse_uint("train.total_iter", *v);
  if (auto v = get("train.batch")) t.batch = parse_uint("train.batch", *v);
  if (auto v = get("train.seed")) t.seed = parse_uint("train.seed", *v);
  if (auto v = get("train.poly_power")) t.poly_power = parse_double("train.poly_power", *v);

  DataConfig& d = rc.data;
  if (auto v = get("data.seed")) d.seed = parse_uint("data.seed", *v);
  if (auto v = get("data.train_count")) d.train_count = parse_uint("data.train_count", *v);
  if (auto v = get("data.val_count")) d.val_count = parse_uint("data.val_count", *v);
  if (auto v = get("data.min_shapes")) d.synth.min_shapes = parse_uint("data.min_shapes", *v);
  if (auto v = get("data.max_shapes")) d.synth.max_shapes = parse_uint("data.max_shapes", *v);
  if (auto v = get("data.noise")) {
    d.synth.noise = static_cast<int>(std::min<std::uint64_t>(255, parse_uint("data.noise", *v)));
  }
  if (auto v = get("data.train_manifest")) d.train_manifest = *v;
  if (auto v = get("data.val_manifest")) d.val_manifest = *v;

  try {
    m.validate();
  } catch (const ShapeError& e) {
    throw ConfigError(std::string("model.input: ") + e.what());
  }
  t.validate();
  if (d.synth.min_shapes > d.synth.max_shapes) throw ConfigError("data.min_shapes exceeds data.max_shapes");
  return rc;
}

/// File entries, then MFPNET_SEED (as train.seed), then overrides.
inline RunConfig load_config(const std::string& path, const std::vector<std::string>& overrides = {},
                             const char* env_seed = std::getenv("MFPNET_SEED")) {
  ConfigEntries entries = load_ini(path);
  if (env_seed != nullptr && *env_seed != '\0') entries.emplace_back("train.seed", env_seed);
  for (const auto& o : overrides) entries.push_back(parse_override(o));
  return resolve_config(entries);
}

/// Fully explicit INI rendering; resolve_config(parse_ini(to_ini(c))) reproduces c.
inline std::string to_ini(const RunConfig& rc) {
  const ModelConfig& m = rc.model;
  std::ostringstream os;
  os.precision(17);
  os << "[model]\n";
  os << "preset = " << rc.preset << "\n";
  os << "num_classes = " << m.num_classes << "\n";
  os << "c0 = " << m.c0 << "\n";
  os << "channels = " << detail::join({m.stage_channels.begin(), m.stage_channels.end()}) << "\n";
  os << "dilations = ";
  for (std::size_t b = 0; b < 6; ++b) os << (b ? " | " : "") << detail::join(m.dilations[b]);
  os << "\n";
  os << "sgcn = " << (m.sgcn_enabled ? "on" : "off") << "\n";
  os << "sgcn_dims = " << detail::join({m.sgcn_dims.begin(), m.sgcn_dims.end()}) << "\n";
  os << "sgcn_pool = " << m.sgcn_pool << "\n";
  os << "gcn_layers = " << m.gcn_layers << "\n";
  os << "head = " << head_type_name(m.head.type) << "\n";
  os << "head_rates = " << detail::join(m.head.rates) << "\n";
  os << "head_reduction = " << m.head.reduction << "\n";
  os << "brm_reduction = " << m.brm_reduction << "\n";
  os << "se_reduction = " << m.se_reduction << "\n";
  os << "input = " << m.input_hw[0] << "x" << m.input_hw[1] << "\n";
  const TrainConfig& t = rc.train;
  os << "\n[train]\n";
  os << "optimizer = " << optimizer_name(t.optimizer) << "\n";
  os << "lr = " << t.lr_in << "\n";
  os << "weight_decay = " << t.weight_decay << "\n";
  os << "momentum = " << t.momentum << "\n";
  os << "beta1 = " << t.beta1 << "\n";
  os << "beta2 = " << t.beta2 << "\n";
  os << "eps = " << t.eps << "\n";
  os << "total_iter = " << t.total_iter << "\n";
  os << "batch = " << t.batch << "\n";
  os << "seed = " << t.seed << "\n";
  os << "poly_power = " << t.poly_power << "\n";
  const DataConfig& d = rc.data;
  os << "\n[data]\n";
  os << "seed = " << d.seed << "\n";
  os << "train_count = " << d.train_count << "\n";
  os << "val_count = " << d.val_count << "\n";
  os << "min_shapes = " << d.synth.min_shapes << "\n";
  os << "max_shapes = " << d.synth.max_shapes << "\n";
  os << "noise = " << d.synth.noise << "\n";
  if (!d.train_manifest.empty()) os << "train_manifest = " << d.train_manifest << "\n";
  if (!d.val_manifest.empty()) os << "val_manifest = " << d.val_manifest << "\n";
  return os.str();
}

/// Training and held-out samples: manifests when configured, otherwise
/// synthetic, with held-out indices following the training indices.
inline std::pair<std::vector<SegmentationSample>, std::vector<SegmentationSample>> load_datasets(
    const RunConfig& rc, bool need_train = true) {
  const auto hw = rc.model.input_hw;
  const std::size_t k = rc.model.num_classes;
  std::vector<SegmentationSample> train_set;
  std::vector<SegmentationSample> val_set;
  if (need_train) {
    train_set = rc.data.train_manifest.empty()
                    ? synth_dataset(rc.data.seed, rc.data.train_count, hw, k, rc.data.synth)
                    : load_dataset(rc.data.train_manifest);
  }
  val_set = rc.data.val_manifest.empty()
                ? synth_dataset(rc.data.seed, rc.data.val_count, hw, k, rc.data.synth, rc.data.train_count)
                : load_dataset(rc.data.val_manifest);
  for (const auto* set : {&train_set, &val_set}) {
    for (const auto& s : *set) s.validate(k);
  }
  return {std::move(train_set), std::move(val_set)};
}

}  // namespace mfpnet
