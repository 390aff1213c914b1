#pragma once

#include <cerrno>
#include <cstddef>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <type_traits>
#include <vector>

#include "mssar/dataset.hpp"
#include "mssar/network_spec.hpp"
#include "mssar/optimizer.hpp"

// Line-oriented experiment config:
//
//   # comment
//   network.preset = resnet20
//   msar.scales = 1,2,4
//   data.train = cifar-10-batches-bin/data_batch_1.bin
//
// Keys are `section.key`; every key has a default except data.train and
// data.test. A preset is applied before any explicit network.* key.

namespace mssar {

struct DataConfig {
  std::vector<std::string> train;
  std::vector<std::string> test;
  DataFormat format = DataFormat::cifar10;
  std::vector<int> classes;
  std::size_t per_class = 0;
  std::size_t test_per_class = 0;
  bool augment = true;

  friend bool operator==(const DataConfig&, const DataConfig&) = default;
};

struct RunConfig {
  std::uint64_t seed = 0;
  std::size_t epochs = 160;
  std::size_t batch_size = 128;
  std::string out = "runs/default";
  int precision = 64;
  bool log_wall_time = false;

  friend bool operator==(const RunConfig&, const RunConfig&) = default;
};

struct ExperimentConfig {
  NetworkSpec network;
  OptimizerConfig optim;
  DataConfig data;
  RunConfig run;

  friend bool operator==(const ExperimentConfig&, const ExperimentConfig&) = default;
};

class ConfigError : public std::runtime_error {
 public:
  ConfigError(std::size_t line, const std::string& what)
      : std::runtime_error("config line " + std::to_string(line) + ": " + what), line_(line) {}
  std::size_t line() const noexcept { return line_; }

 private:
  std::size_t line_;
};

namespace detail {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

inline std::vector<std::string> split_list(const std::string& v, char sep = ',') {
  std::vector<std::string> out;
  if (trim(v).empty()) return out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, sep)) out.push_back(trim(item));
  return out;
}

struct Value {
  std::string text;
  std::size_t line;

  [[noreturn]] void fail(const std::string& key, const std::string& expected) const {
    throw ConfigError(line, "'" + key + "' expects " + expected + ", got '" + text + "'");
  }

  std::uint64_t as_uint(const std::string& key) const {
    if (text.empty() || text[0] == '-' || text[0] == '+') fail(key, "a nonnegative integer");
    errno = 0;
    char* end = nullptr;
    const unsigned long long v = std::strtoull(text.c_str(), &end, 10);
    if (errno != 0 || *end != '\0') fail(key, "a nonnegative integer");
    return v;
  }

  double as_double(const std::string& key) const {
    errno = 0;
    char* end = nullptr;
    const double v = std::strtod(text.c_str(), &end);
    if (text.empty() || errno != 0 || *end != '\0') fail(key, "a number");
    return v;
  }

  bool as_bool(const std::string& key) const {
    if (text == "true" || text == "on" || text == "1") return true;
    if (text == "false" || text == "off" || text == "0") return false;
    fail(key, "true|false");
  }

  std::vector<std::size_t> as_uint_list(const std::string& key) const {
    std::vector<std::size_t> out;
    for (const auto& item : split_list(text)) out.push_back(Value{item, line}.as_uint(key));
    return out;
  }
};

inline std::string format_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

template <typename C>
std::string join(const C& items) {
  std::string out;
  for (const auto& i : items) {
    if (!out.empty()) out += ",";
    if constexpr (std::is_convertible_v<decltype(i), std::string>) out += i;
    else out += std::to_string(i);
  }
  return out;
}

inline StageSpec parse_stage(const std::string& text, std::size_t line) {
  auto parts = split_list(text, ':');
  if (parts.size() != 3 && parts.size() != 5)
    throw ConfigError(line, "stage '" + text + "' must be spatial:width:blocks[:mid:groups]");
  StageSpec s;
  s.spatial = Value{parts[0], line}.as_uint("network.stages");
  s.width = Value{parts[1], line}.as_uint("network.stages");
  s.blocks = Value{parts[2], line}.as_uint("network.stages");
  if (parts.size() == 5) {
    s.mid = Value{parts[3], line}.as_uint("network.stages");
    s.groups = Value{parts[4], line}.as_uint("network.stages");
  }
  return s;
}

inline std::string format_stage(const StageSpec& s) {
  std::string out = std::to_string(s.spatial) + ":" + std::to_string(s.width) + ":" + std::to_string(s.blocks);
  if (s.mid != 0 || s.groups != 1) out += ":" + std::to_string(s.mid) + ":" + std::to_string(s.groups);
  return out;
}

}  // namespace detail

inline ExperimentConfig parse_config(const std::string& text) {
  using detail::Value;
  std::map<std::string, Value> kv;
  std::istringstream in(text);
  std::string raw;
  std::size_t lineno = 0;
  while (std::getline(in, raw)) {
    ++lineno;
    const auto hash = raw.find('#');
    const std::string line = detail::trim(hash == std::string::npos ? raw : raw.substr(0, hash));
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError(lineno, "expected 'section.key = value'");
    const std::string key = detail::trim(line.substr(0, eq));
    const std::string value = detail::trim(line.substr(eq + 1));
    if (key.find('.') == std::string::npos) throw ConfigError(lineno, "key '" + key + "' has no section");
    if (auto it = kv.find(key); it != kv.end())
      throw ConfigError(lineno, "duplicate key '" + key + "' (first set on line " +
                                    std::to_string(it->second.line) + ")");
    kv.emplace(key, Value{value, lineno});
  }

  ExperimentConfig cfg;
  NetworkSpec& net = cfg.network;
  if (auto it = kv.find("network.preset"); it != kv.end()) {
    try {
      net = presets::by_name(it->second.text);
    } catch (const std::invalid_argument& e) {
      throw ConfigError(it->second.line, e.what());
    }
    cfg.optim = net.kind == BlockKind::dense ? densenet_schedule() : resnet_schedule();
  } else {
    net = presets::resnet_cifar(3);
  }

  for (const auto& [key, v] : kv) {
    const std::size_t line = v.line;
    if (key == "network.preset") continue;
    else if (key == "network.name") net.name = v.text;
    else if (key == "network.kind") {
      if (v.text == "plain") net.kind = BlockKind::plain;
      else if (v.text == "residual") net.kind = BlockKind::residual;
      else if (v.text == "bottleneck") net.kind = BlockKind::bottleneck;
      else if (v.text == "dense") net.kind = BlockKind::dense;
      else v.fail(key, "plain|residual|bottleneck|dense");
    } else if (key == "network.stem") {
      if (v.text == "none") net.stem = StemKind::none;
      else if (v.text == "cifar") net.stem = StemKind::cifar;
      else if (v.text == "ilsvrc") net.stem = StemKind::ilsvrc;
      else v.fail(key, "none|cifar|ilsvrc");
    } else if (key == "network.input_channels") net.input_channels = v.as_uint(key);
    else if (key == "network.input_size") net.input_size = v.as_uint(key);
    else if (key == "network.stem_width") net.stem_width = v.as_uint(key);
    else if (key == "network.stages") {
      net.stages.clear();
      for (const auto& s : detail::split_list(v.text)) net.stages.push_back(detail::parse_stage(s, line));
    } else if (key == "network.growth") net.growth = v.as_uint(key);
    else if (key == "network.compression") net.compression = v.as_double(key);
    else if (key == "network.bottleneck_factor") net.bottleneck_factor = v.as_uint(key);
    else if (key == "network.classes") net.classes = v.as_uint(key);
    else if (key == "msar.enabled") net.msar.enabled = v.as_bool(key);
    else if (key == "msar.strategy") {
      if (v.text == "regional") net.msar.config.strategy = Strategy::regional;
      else if (v.text == "sliding") net.msar.config.strategy = Strategy::sliding;
      else v.fail(key, "regional|sliding");
    } else if (key == "msar.scales") {
      auto scales = v.as_uint_list(key);
      for (auto k : scales)
        if (k < 1) throw ConfigError(line, "msar.scales: scale must be >= 1");
      net.msar.config.scales = scales;
    } else if (key == "msar.stage_mode") {
      if (v.text == "single") net.msar.mode = StageMode::single;
      else if (v.text == "multi") net.msar.mode = StageMode::multi;
      else v.fail(key, "single|multi");
    } else if (key == "msar.reduction") net.msar.config.reduction = v.as_uint(key);
    else if (key == "optim.lr") cfg.optim.lr = v.as_double(key);
    else if (key == "optim.momentum") cfg.optim.momentum = v.as_double(key);
    else if (key == "optim.weight_decay") cfg.optim.weight_decay = v.as_double(key);
    else if (key == "optim.lr_drops") cfg.optim.lr_drops = v.as_uint_list(key);
    else if (key == "optim.lr_divisor") cfg.optim.lr_divisor = v.as_double(key);
    else if (key == "data.train") cfg.data.train = detail::split_list(v.text);
    else if (key == "data.test") cfg.data.test = detail::split_list(v.text);
    else if (key == "data.format") {
      if (v.text == "cifar10") cfg.data.format = DataFormat::cifar10;
      else if (v.text == "cifar100_coarse") cfg.data.format = DataFormat::cifar100_coarse;
      else if (v.text == "cifar100_fine" || v.text == "cifar100") cfg.data.format = DataFormat::cifar100_fine;
      else v.fail(key, "cifar10|cifar100_coarse|cifar100_fine");
    } else if (key == "data.classes") {
      cfg.data.classes.clear();
      for (auto c : v.as_uint_list(key)) cfg.data.classes.push_back(static_cast<int>(c));
    } else if (key == "data.per_class") cfg.data.per_class = v.as_uint(key);
    else if (key == "data.test_per_class") cfg.data.test_per_class = v.as_uint(key);
    else if (key == "data.augment") cfg.data.augment = v.as_bool(key);
    else if (key == "run.seed") cfg.run.seed = v.as_uint(key);
    else if (key == "run.epochs") cfg.run.epochs = v.as_uint(key);
    else if (key == "run.batch_size") cfg.run.batch_size = v.as_uint(key);
    else if (key == "run.out") cfg.run.out = v.text;
    else if (key == "run.precision") {
      const auto p = v.as_uint(key);
      if (p != 32 && p != 64) v.fail(key, "32|64");
      cfg.run.precision = static_cast<int>(p);
    } else if (key == "run.log_wall_time") cfg.run.log_wall_time = v.as_bool(key);
    else throw ConfigError(line, "unknown key '" + key + "'");
  }

  const std::size_t end = lineno + 1;
  if (cfg.data.train.empty()) throw ConfigError(end, "missing required key 'data.train'");
  if (cfg.data.test.empty()) throw ConfigError(end, "missing required key 'data.test'");

  // Semantic validation, attributed to the line of the most relevant key.
  auto line_of = [&](const std::string& key) {
    auto it = kv.find(key);
    return it == kv.end() ? std::size_t{0} : it->second.line;
  };
  try {
    net.validate();
  } catch (const std::invalid_argument& e) {
    std::size_t l = line_of("network.stages");
    if (std::string(e.what()).find("MultiScaleConfig") != std::string::npos || l == 0)
      l = line_of("msar.scales") ? line_of("msar.scales") : line_of("network.preset");
    throw ConfigError(l, e.what());
  }
  try {
    cfg.optim.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(line_of("optim.lr_drops"), e.what());
  }
  if (cfg.run.batch_size == 0) throw ConfigError(line_of("run.batch_size"), "run.batch_size must be >= 1");
  return cfg;
}

/// Fully explicit form (no preset); parse(serialize(c)) == c.
inline std::string serialize_config(const ExperimentConfig& c) {
  using detail::format_double;
  using detail::join;
  const NetworkSpec& n = c.network;
  std::ostringstream o;
  std::vector<std::string> stages;
  for (const auto& s : n.stages) stages.push_back(detail::format_stage(s));
  o << "network.name = " << n.name << "\n"
    << "network.kind = " << to_string(n.kind) << "\n"
    << "network.stem = " << to_string(n.stem) << "\n"
    << "network.input_channels = " << n.input_channels << "\n"
    << "network.input_size = " << n.input_size << "\n"
    << "network.stem_width = " << n.stem_width << "\n"
    << "network.stages = " << join(stages) << "\n"
    << "network.growth = " << n.growth << "\n"
    << "network.compression = " << format_double(n.compression) << "\n"
    << "network.bottleneck_factor = " << n.bottleneck_factor << "\n"
    << "network.classes = " << n.classes << "\n"
    << "msar.enabled = " << (n.msar.enabled ? "true" : "false") << "\n"
    << "msar.strategy = " << to_string(n.msar.config.strategy) << "\n"
    << "msar.scales = " << join(n.msar.config.scales) << "\n"
    << "msar.stage_mode = " << to_string(n.msar.mode) << "\n"
    << "msar.reduction = " << n.msar.config.reduction << "\n"
    << "optim.lr = " << format_double(c.optim.lr) << "\n"
    << "optim.momentum = " << format_double(c.optim.momentum) << "\n"
    << "optim.weight_decay = " << format_double(c.optim.weight_decay) << "\n"
    << "optim.lr_drops = " << join(c.optim.lr_drops) << "\n"
    << "optim.lr_divisor = " << format_double(c.optim.lr_divisor) << "\n"
    << "data.train = " << join(c.data.train) << "\n"
    << "data.test = " << join(c.data.test) << "\n"
    << "data.format = " << to_string(c.data.format) << "\n"
    << "data.classes = " << join(c.data.classes) << "\n"
    << "data.per_class = " << c.data.per_class << "\n"
    << "data.test_per_class = " << c.data.test_per_class << "\n"
    << "data.augment = " << (c.data.augment ? "true" : "false") << "\n"
    << "run.seed = " << c.run.seed << "\n"
    << "run.epochs = " << c.run.epochs << "\n"
    << "run.batch_size = " << c.run.batch_size << "\n"
    << "run.out = " << c.run.out << "\n"
    << "run.precision = " << c.run.precision << "\n"
    << "run.log_wall_time = " << (c.run.log_wall_time ? "true" : "false") << "\n";
  return o.str();
}

inline ExperimentConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read config '" + path + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str());
}

/// Relative data paths resolve against $MSSAR_DATA_ROOT when it is set.
inline std::string resolve_data_path(const std::string& path) {
  const std::filesystem::path p(path);
  if (p.is_absolute()) return path;
  if (const char* root = std::getenv("MSSAR_DATA_ROOT"); root && *root)
    return (std::filesystem::path(root) / p).string();
  return path;
}

}  // namespace mssar
