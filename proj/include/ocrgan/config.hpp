#pragma once

// RunConfig: one flat record describing an experiment. Serialized as
// `key = value` lines; `#` starts a comment. Unknown or repeated keys are errors.

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <functional>
#include <iomanip>
#include <limits>
#include <sstream>
#include <type_traits>
#include <string>
#include <vector>

#include "ocrgan/errors.hpp"

namespace ocrgan {

struct RunConfig {
  // Model.
  int n_branches = 2;  // 1 = single generator on the raw image, no decoupling
  int base_channels = 64;
  int encoder_stages = 5;
  int disc_stages = 4;
  bool use_cs = true;
  int cs_reduce_ratio = 16;
  int cs_min_dim = 8;
  int latent_tap = 0;  // 0: penultimate layer (input of the critic head); k: output of stage k

  // Objectives.
  double lambda_con = 50.0;
  double lambda_adv = 1.0;
  double lambda_lat = 1.0;
  double score_lambda = 0.9;

  // Optimizer (shared by generator and discriminator).
  double lr = 0.002;
  double beta1 = 0.5;
  double beta2 = 0.999;
  double weight_decay = 1e-4;
  double adam_eps = 1e-8;

  // Schedule.
  int batch_size = 32;
  int epochs = 200;
  long steps = 0;  // > 0 overrides epochs
  long checkpoint_every = 0;

  // Data.
  std::string data_root;
  std::string category;
  int image_size = 256;
  int channels = 3;
  double val_fraction = 0.0;

  // Forgery augmentation.
  bool cutout = true;
  bool cutpaste = true;
  bool forge_sequential = false;  // apply cutout then cutpaste to every image instead of picking one
  double patch_area_min = 0.02;
  double patch_area_max = 0.15;
  double patch_aspect_min = 0.3;
  double patch_aspect_max = 3.3;
  double cutout_fill = 0.0;

  std::uint64_t seed = 0;
  std::string output_dir = "run";

  bool augment() const { return cutout || cutpaste; }
};

namespace config_detail {

struct Field {
  std::string name;
  std::function<void(RunConfig&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
};

template <typename V>
V parse_value(const std::string& key, const std::string& text);

template <>
inline std::string parse_value<std::string>(const std::string&, const std::string& text) {
  return text;
}

template <>
inline bool parse_value<bool>(const std::string& key, const std::string& text) {
  if (text == "true" || text == "1" || text == "yes" || text == "on") return true;
  if (text == "false" || text == "0" || text == "no" || text == "off") return false;
  throw ConfigError("config key '" + key + "': expected a boolean, got '" + text + "'");
}

template <typename V>
V parse_number(const std::string& key, const std::string& text) {
  std::istringstream is(text);
  V v{};
  is >> v;
  if (!is || !(is >> std::ws).eof())
    throw ConfigError("config key '" + key + "': cannot parse '" + text + "'");
  return v;
}

template <>
inline int parse_value<int>(const std::string& k, const std::string& t) { return parse_number<int>(k, t); }
template <>
inline long parse_value<long>(const std::string& k, const std::string& t) { return parse_number<long>(k, t); }
template <>
inline double parse_value<double>(const std::string& k, const std::string& t) { return parse_number<double>(k, t); }
template <>
inline std::uint64_t parse_value<std::uint64_t>(const std::string& k, const std::string& t) {
  if (!t.empty() && t[0] == '-') throw ConfigError("config key '" + k + "': must be non-negative");
  return parse_number<std::uint64_t>(k, t);
}

template <typename V>
std::string format_value(const V& v) {
  std::ostringstream os;
  if constexpr (std::is_same_v<V, bool>) {
    os << (v ? "true" : "false");
  } else if constexpr (std::is_floating_point_v<V>) {
    os << std::setprecision(std::numeric_limits<V>::max_digits10) << v;
  } else {
    os << v;
  }
  return os.str();
}

template <typename V>
Field field(std::string name, V RunConfig::*member) {
  return Field{name,
               [name, member](RunConfig& c, const std::string& text) { c.*member = parse_value<V>(name, text); },
               [member](const RunConfig& c) { return format_value(c.*member); }};
}

inline const std::vector<Field>& fields() {
  static const std::vector<Field> table = {
      field("n_branches", &RunConfig::n_branches),
      field("base_channels", &RunConfig::base_channels),
      field("encoder_stages", &RunConfig::encoder_stages),
      field("disc_stages", &RunConfig::disc_stages),
      field("use_cs", &RunConfig::use_cs),
      field("cs_reduce_ratio", &RunConfig::cs_reduce_ratio),
      field("cs_min_dim", &RunConfig::cs_min_dim),
      field("latent_tap", &RunConfig::latent_tap),
      field("lambda_con", &RunConfig::lambda_con),
      field("lambda_adv", &RunConfig::lambda_adv),
      field("lambda_lat", &RunConfig::lambda_lat),
      field("score_lambda", &RunConfig::score_lambda),
      field("lr", &RunConfig::lr),
      field("beta1", &RunConfig::beta1),
      field("beta2", &RunConfig::beta2),
      field("weight_decay", &RunConfig::weight_decay),
      field("adam_eps", &RunConfig::adam_eps),
      field("batch_size", &RunConfig::batch_size),
      field("epochs", &RunConfig::epochs),
      field("steps", &RunConfig::steps),
      field("checkpoint_every", &RunConfig::checkpoint_every),
      field("data_root", &RunConfig::data_root),
      field("category", &RunConfig::category),
      field("image_size", &RunConfig::image_size),
      field("channels", &RunConfig::channels),
      field("val_fraction", &RunConfig::val_fraction),
      field("cutout", &RunConfig::cutout),
      field("cutpaste", &RunConfig::cutpaste),
      field("forge_sequential", &RunConfig::forge_sequential),
      field("patch_area_min", &RunConfig::patch_area_min),
      field("patch_area_max", &RunConfig::patch_area_max),
      field("patch_aspect_min", &RunConfig::patch_aspect_min),
      field("patch_aspect_max", &RunConfig::patch_aspect_max),
      field("cutout_fill", &RunConfig::cutout_fill),
      field("seed", &RunConfig::seed),
      field("output_dir", &RunConfig::output_dir),
  };
  return table;
}

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

}  // namespace config_detail

inline std::vector<std::string> config_keys() {
  std::vector<std::string> out;
  for (const auto& f : config_detail::fields()) out.push_back(f.name);
  return out;
}

/// Sets one field from its text form.
inline void set_config_value(RunConfig& cfg, const std::string& key, const std::string& value) {
  for (const auto& f : config_detail::fields())
    if (f.name == key) return f.set(cfg, config_detail::trim(value));
  throw ConfigError("unknown config key '" + key + "'");
}

inline std::string get_config_value(const RunConfig& cfg, const std::string& key) {
  for (const auto& f : config_detail::fields())
    if (f.name == key) return f.get(cfg);
  throw ConfigError("unknown config key '" + key + "'");
}

/// Applies a `key=value` override.
inline void apply_override(RunConfig& cfg, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos) throw ConfigError("override '" + assignment + "' is not of the form key=value");
  set_config_value(cfg, config_detail::trim(assignment.substr(0, eq)), assignment.substr(eq + 1));
}

/// Parses config text on top of `base`.
inline RunConfig parse_config(const std::string& text, RunConfig base = {}) {
  std::istringstream is(text);
  std::string line;
  std::vector<std::string> seen;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = config_detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError("config line " + std::to_string(lineno) + ": expected key = value");
    const std::string key = config_detail::trim(line.substr(0, eq));
    if (std::find(seen.begin(), seen.end(), key) != seen.end())
      throw ConfigError("config line " + std::to_string(lineno) + ": duplicate key '" + key + "'");
    seen.push_back(key);
    try {
      set_config_value(base, key, line.substr(eq + 1));
    } catch (const ConfigError& e) {
      throw ConfigError("config line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  return base;
}

inline RunConfig load_config_file(const std::string& path, RunConfig base = {}) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file '" + path + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str(), std::move(base));
}

inline std::string to_text(const RunConfig& cfg) {
  std::ostringstream os;
  for (const auto& f : config_detail::fields()) os << f.name << " = " << f.get(cfg) << '\n';
  return os.str();
}

/// Throws ConfigError describing the first invalid field.
inline void validate(const RunConfig& c) {
  auto fail = [](const std::string& msg) { throw ConfigError("invalid config: " + msg); };
  if (c.n_branches < 1) fail("n_branches must be >= 1");
  if (c.base_channels < 1) fail("base_channels must be >= 1");
  if (c.encoder_stages < 1 || c.encoder_stages > 8) fail("encoder_stages must be in [1, 8]");
  if (c.disc_stages < 1 || c.disc_stages > 8) fail("disc_stages must be in [1, 8]");
  if (c.cs_reduce_ratio < 1) fail("cs_reduce_ratio must be >= 1");
  if (c.cs_min_dim < 1) fail("cs_min_dim must be >= 1");
  if (c.latent_tap < 0 || c.latent_tap > c.disc_stages) fail("latent_tap must be in [0, disc_stages]");
  if (c.lambda_con < 0 || c.lambda_adv < 0 || c.lambda_lat < 0) fail("loss weights must be >= 0");
  if (c.lambda_con == 0 && c.lambda_adv == 0 && c.lambda_lat == 0) fail("loss weights must not all be zero");
  if (!(c.score_lambda >= 0 && c.score_lambda <= 1)) fail("score_lambda must be in [0, 1]");
  if (!(c.lr > 0)) fail("lr must be > 0");
  if (!(c.beta1 >= 0 && c.beta1 < 1) || !(c.beta2 >= 0 && c.beta2 < 1)) fail("betas must be in [0, 1)");
  if (c.weight_decay < 0) fail("weight_decay must be >= 0");
  if (!(c.adam_eps > 0)) fail("adam_eps must be > 0");
  if (c.batch_size < 1) fail("batch_size must be >= 1");
  if (c.epochs < 0) fail("epochs must be >= 0");
  if (c.steps < 0) fail("steps must be >= 0");
  if (c.checkpoint_every < 0) fail("checkpoint_every must be >= 0");
  if (c.channels != 1 && c.channels != 3) fail("channels must be 1 or 3");
  const long unit = 1L << std::max(c.encoder_stages, c.disc_stages);
  if (c.image_size < 1 || c.image_size % unit != 0)
    fail("image_size must be a positive multiple of " + std::to_string(unit));
  if (c.n_branches >= 2 && c.image_size < 6) fail("image_size must be >= 6 for frequency decoupling");
  if (!(c.val_fraction >= 0 && c.val_fraction < 1)) fail("val_fraction must be in [0, 1)");
  if (!(c.patch_area_min > 0 && c.patch_area_min <= c.patch_area_max && c.patch_area_max < 1))
    fail("patch area range must satisfy 0 < min <= max < 1");
  if (!(c.patch_aspect_min > 0 && c.patch_aspect_min <= c.patch_aspect_max))
    fail("patch aspect range must satisfy 0 < min <= max");
  if (!(c.cutout_fill >= -1 && c.cutout_fill <= 1)) fail("cutout_fill must be in [-1, 1]");
}

}  // namespace ocrgan
