#pragma once

// Flat key=value run configuration. '#' starts a comment, blank lines are
// ignored, unknown keys are rejected. Later assignments override earlier ones,
// so command-line overrides are applied with set() after the file.

#include <charconv>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "invdiff/sampler.hpp"
#include "invdiff/train.hpp"

namespace invdiff {

struct RunConfig {
  SolverConfig solver;
  TrainConfig train;
  std::size_t scenes = 200;
  std::size_t size = 64;
  std::string dtype = "f32";

  void set(const std::string& key, const std::string& value);
  std::string get(const std::string& key) const;
  static const std::vector<std::string>& keys();

  void validate() const {
    solver.unet.validate();
    solver.schedule.validate();
    train.validate();
    if (scenes == 0) throw std::invalid_argument("config: scenes must be positive");
    solver.unet.check_input(size, size);
    if (dtype != "f32" && dtype != "f64") throw std::invalid_argument("config: dtype must be f32 or f64");
  }

  // Canonical text form, one key per line in a fixed order.
  std::string to_text() const {
    std::string out;
    for (const auto& k : keys()) out += k + " = " + get(k) + "\n";
    return out;
  }
};

namespace detail {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
}

template <class T>
T parse_number(const std::string& key, const std::string& text) {
  T v{};
  const char* end = text.data() + text.size();
  auto [p, ec] = std::from_chars(text.data(), end, v);
  if (ec != std::errc() || p != end)
    throw std::invalid_argument("config: value '" + text + "' for " + key + " is not a valid number");
  return v;
}

inline std::vector<double> parse_list(const std::string& key, const std::string& text) {
  std::vector<double> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(parse_number<double>(key, trim(item)));
  if (out.empty()) throw std::invalid_argument("config: " + key + " needs at least one value");
  return out;
}

// Shortest text that parses back to the same double.
inline std::string format_number(double v) {
  char buf[32];
  auto [end, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, end);
}

inline std::string format_list(const std::vector<double>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + format_number(v[i]);
  return s;
}

struct ConfigField {
  std::function<void(RunConfig&, const std::string&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
};

template <class T>
ConfigField number_field(T RunConfig::*outer) {
  return {[outer](RunConfig& c, const std::string& k, const std::string& v) { c.*outer = parse_number<T>(k, v); },
          [outer](const RunConfig& c) {
            if constexpr (std::is_floating_point_v<T>) return format_number(c.*outer);
            else return std::to_string(c.*outer);
          }};
}

template <class T, class Member>
ConfigField nested_field(Member RunConfig::*outer, T Member::*inner) {
  return {[=](RunConfig& c, const std::string& k, const std::string& v) { (c.*outer).*inner = parse_number<T>(k, v); },
          [=](const RunConfig& c) {
            if constexpr (std::is_floating_point_v<T>) return format_number((c.*outer).*inner);
            else return std::to_string((c.*outer).*inner);
          }};
}

inline const std::vector<std::pair<std::string, ConfigField>>& config_fields() {
  static const std::vector<std::pair<std::string, ConfigField>> fields = [] {
    std::vector<std::pair<std::string, ConfigField>> f;
    f.emplace_back("seed", nested_field(&RunConfig::train, &TrainConfig::seed));
    f.emplace_back("scenes", number_field(&RunConfig::scenes));
    f.emplace_back("size", number_field(&RunConfig::size));
    f.emplace_back("mask_ratio", nested_field(&RunConfig::train, &TrainConfig::mask_ratio));
    f.emplace_back("noise_sigma", nested_field(&RunConfig::train, &TrainConfig::noise_sigma));
    f.emplace_back("base_channels", ConfigField{
        [](RunConfig& c, const std::string& k, const std::string& v) {
          c.solver.unet.base_channels = parse_number<std::size_t>(k, v);
        },
        [](const RunConfig& c) { return std::to_string(c.solver.unet.base_channels); }});
    f.emplace_back("attention_max_positions", ConfigField{
        [](RunConfig& c, const std::string& k, const std::string& v) {
          c.solver.unet.attention_max_positions = parse_number<std::size_t>(k, v);
        },
        [](const RunConfig& c) { return std::to_string(c.solver.unet.attention_max_positions); }});
    f.emplace_back("steps", ConfigField{
        [](RunConfig& c, const std::string& k, const std::string& v) {
          c.solver.schedule = Schedule::with_steps(parse_number<std::size_t>(k, v));
        },
        [](const RunConfig& c) { return std::to_string(c.solver.schedule.steps()); }});
    f.emplace_back("alpha_bar", ConfigField{
        [](RunConfig& c, const std::string& k, const std::string& v) { c.solver.schedule.alpha_bar = parse_list(k, v); },
        [](const RunConfig& c) { return format_list(c.solver.schedule.alpha_bar); }});
    f.emplace_back("mode", ConfigField{
        [](RunConfig& c, const std::string&, const std::string& v) { c.train.mode = parse_backprop_mode(v); },
        [](const RunConfig& c) { return std::string(backprop_mode_name(c.train.mode)); }});
    f.emplace_back("epochs", nested_field(&RunConfig::train, &TrainConfig::epochs));
    f.emplace_back("batch_size", nested_field(&RunConfig::train, &TrainConfig::batch_size));
    f.emplace_back("lr", nested_field(&RunConfig::train, &TrainConfig::lr));
    f.emplace_back("lr_milestones", ConfigField{
        [](RunConfig& c, const std::string& k, const std::string& v) { c.train.milestones = parse_list(k, v); },
        [](const RunConfig& c) { return format_list(c.train.milestones); }});
    f.emplace_back("lr_decay", nested_field(&RunConfig::train, &TrainConfig::decay));
    f.emplace_back("test_fraction", nested_field(&RunConfig::train, &TrainConfig::test_fraction));
    f.emplace_back("drift_check_every", nested_field(&RunConfig::train, &TrainConfig::drift_check_every));
    f.emplace_back("dtype", ConfigField{
        [](RunConfig& c, const std::string&, const std::string& v) {
          if (v != "f32" && v != "f64") throw std::invalid_argument("config: dtype must be f32 or f64, got '" + v + "'");
          c.dtype = v;
        },
        [](const RunConfig& c) { return c.dtype; }});
    return f;
  }();
  return fields;
}

inline const ConfigField& config_field(const std::string& key) {
  for (const auto& [k, f] : config_fields())
    if (k == key) return f;
  std::string known;
  for (const auto& [k, f] : config_fields()) known += (known.empty() ? "" : ", ") + k;
  throw std::invalid_argument("config: unknown key '" + key + "' (known keys: " + known + ")");
}

}  // namespace detail

inline void RunConfig::set(const std::string& key, const std::string& value) {
  detail::config_field(key).set(*this, key, detail::trim(value));
}

inline std::string RunConfig::get(const std::string& key) const { return detail::config_field(key).get(*this); }

inline const std::vector<std::string>& RunConfig::keys() {
  static const std::vector<std::string> k = [] {
    std::vector<std::string> out;
    for (const auto& [name, f] : detail::config_fields()) out.push_back(name);
    return out;
  }();
  return k;
}

// Applies every assignment in `text` to `cfg`. `origin` names the source in errors.
inline void apply_config_text(RunConfig& cfg, const std::string& text, const std::string& origin = "config") {
  std::istringstream is(text);
  std::string line;
  for (std::size_t lineno = 1; std::getline(is, line); ++lineno) {
    if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw std::invalid_argument(origin + ":" + std::to_string(lineno) + ": expected key = value");
    try {
      cfg.set(detail::trim(line.substr(0, eq)), line.substr(eq + 1));
    } catch (const std::invalid_argument& e) {
      throw std::invalid_argument(origin + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
}

inline RunConfig load_config_file(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw std::invalid_argument("cannot open config file " + path.string());
  std::stringstream ss;
  ss << is.rdbuf();
  RunConfig cfg;
  apply_config_text(cfg, ss.str(), path.string());
  return cfg;
}

}  // namespace invdiff
