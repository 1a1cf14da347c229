#pragma once

#include <charconv>
#include <cstdint>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "druseg/common.hpp"
#include "druseg/model.hpp"
#include "druseg/train.hpp"

namespace druseg {

namespace detail {

enum class KeyType {
  kString,
  kBool,
  kInt,
  kUint,
  kDouble,
  kIntList,
  kVariant,
  kScale,
  kScenario,
};

// Every accepted key, in the order the effective configuration is echoed.
inline const std::vector<std::pair<std::string, KeyType>>& config_keys() {
  static const std::vector<std::pair<std::string, KeyType>> keys = {
      {"model.variant", KeyType::kVariant},
      {"model.scale", KeyType::kScale},
      {"model.input_channels", KeyType::kInt},
      {"model.input_size", KeyType::kInt},
      {"model.stage_filters", KeyType::kIntList},
      {"model.fc_width", KeyType::kInt},
      {"model.dense_depth", KeyType::kInt},
      {"model.dense_growth", KeyType::kIntList},
      {"model.dense_include_input", KeyType::kBool},
      {"model.residual_blocks", KeyType::kInt},
      {"model.merge_filters", KeyType::kInt},
      {"model.noise_sigma", KeyType::kDouble},
      {"model.dropout_rate", KeyType::kDouble},
      {"train.scenario", KeyType::kScenario},
      {"train.learning_rate", KeyType::kDouble},
      {"train.momentum", KeyType::kDouble},
      {"train.batch_size", KeyType::kInt},
      {"train.max_epochs", KeyType::kInt},
      {"train.patience", KeyType::kInt},
      {"train.val_fraction", KeyType::kDouble},
      {"train.seed", KeyType::kUint},
      {"augment.enabled", KeyType::kBool},
      {"augment.rotation_degrees", KeyType::kDouble},
      {"augment.scale_min", KeyType::kDouble},
      {"augment.scale_max", KeyType::kDouble},
      {"data.manifest", KeyType::kString},
      {"data.checkpoint", KeyType::kString},
      {"data.out_dir", KeyType::kString},
      {"data.workers", KeyType::kInt},
  };
  return keys;
}

inline std::string config_trim(const std::string& s) {
  std::size_t b = 0, e = s.size();
  while (b < e && (s[b] == ' ' || s[b] == '\t')) ++b;
  while (e > b && (s[e - 1] == ' ' || s[e - 1] == '\t')) --e;
  return s.substr(b, e - b);
}

// Shortest decimal form that parses back to the same double.
inline std::string double_to_string(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

inline bool config_parse_bool(const std::string& key,
                              const std::string& value) {
  if (value == "true" || value == "1") return true;
  if (value == "false" || value == "0") return false;
  throw ConfigError("config: " + key + " expects true or false, got '" +
                    value + "'");
}

inline std::int64_t config_parse_int(const std::string& key,
                                     const std::string& value) {
  std::int64_t out = 0;
  const char* first = value.data();
  const char* last = first + value.size();
  const auto res = std::from_chars(first, last, out);
  if (res.ec != std::errc() || res.ptr != last) {
    throw ConfigError("config: " + key + " expects an integer, got '" +
                      value + "'");
  }
  return out;
}

inline std::uint64_t config_parse_uint(const std::string& key,
                                       const std::string& value) {
  std::uint64_t out = 0;
  const char* first = value.data();
  const char* last = first + value.size();
  const auto res = std::from_chars(first, last, out);
  if (res.ec != std::errc() || res.ptr != last) {
    throw ConfigError("config: " + key +
                      " expects a non-negative integer, got '" + value + "'");
  }
  return out;
}

inline double config_parse_double(const std::string& key,
                                  const std::string& value) {
  double out = 0.0;
  const char* first = value.data();
  const char* last = first + value.size();
  const auto res = std::from_chars(first, last, out);
  if (res.ec != std::errc() || res.ptr != last) {
    throw ConfigError("config: " + key + " expects a number, got '" + value +
                      "'");
  }
  return out;
}

// Comma-separated integers; an empty string is the empty list so echoed
// configurations always parse back.
inline std::vector<std::int64_t> config_parse_int_list(
    const std::string& key, const std::string& value) {
  std::vector<std::int64_t> out;
  if (config_trim(value).empty()) return out;
  std::size_t start = 0;
  while (start <= value.size()) {
    const std::size_t comma = value.find(',', start);
    const std::string item = config_trim(
        comma == std::string::npos ? value.substr(start)
                                   : value.substr(start, comma - start));
    out.push_back(config_parse_int(key, item));
    if (comma == std::string::npos) break;
    start = comma + 1;
  }
  return out;
}

inline std::string join_int_list(const std::vector<std::int64_t>& xs) {
  std::string out;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(xs[i]);
  }
  return out;
}

}  // namespace detail

// Flat key=value run configuration. Values come from an optional config
// file, then repeatable command-line overrides, last assignment winning.
// Unknown keys are rejected; values are type-checked when assigned.
//
// `model.variant` and `model.scale` pick a structural preset; any other
// model.* key overrides the corresponding preset field regardless of the
// order the lines appear in.
class RunConfig {
 public:
  // Assign one key. Throws ConfigError for unknown keys or unparsable
  // values; stores the value in canonical form.
  void set(const std::string& key, const std::string& value) {
    using detail::KeyType;
    const KeyType type = key_type(key);
    std::string canon;
    switch (type) {
      case KeyType::kString:
        canon = value;
        break;
      case KeyType::kBool:
        canon = detail::config_parse_bool(key, value) ? "true" : "false";
        break;
      case KeyType::kInt:
        canon = std::to_string(detail::config_parse_int(key, value));
        break;
      case KeyType::kUint:
        canon = std::to_string(detail::config_parse_uint(key, value));
        break;
      case KeyType::kDouble:
        canon = detail::double_to_string(
            detail::config_parse_double(key, value));
        break;
      case KeyType::kIntList:
        canon = detail::join_int_list(
            detail::config_parse_int_list(key, value));
        break;
      case KeyType::kVariant:
        canon = variant_name(variant_from_string(value));
        break;
      case KeyType::kScale:
        canon = scale_name(scale_from_string(value));
        break;
      case KeyType::kScenario:
        canon = scenario_name(scenario_from_string(value));
        break;
    }
    values_[key] = canon;
  }

  // Assign from a "key=value" string (the --set flag's argument form).
  void set_pair(const std::string& pair) {
    const std::size_t eq = pair.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("config: expected key=value, got '" + pair + "'");
    }
    set(detail::config_trim(pair.substr(0, eq)),
        detail::config_trim(pair.substr(eq + 1)));
  }

  // Apply a config file: key=value per line, blank lines and lines whose
  // first non-space character is '#' ignored.
  void load_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open config file: " + path);
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      if (!line.empty() && line.back() == '\r') line.pop_back();
      const std::string stripped = detail::config_trim(line);
      if (stripped.empty() || stripped[0] == '#') continue;
      try {
        set_pair(stripped);
      } catch (const ConfigError& e) {
        throw ConfigError("config file " + path + " line " +
                          std::to_string(lineno) + ": " + e.what());
      }
    }
  }

  bool assigned(const std::string& key) const {
    return values_.find(key) != values_.end();
  }

  std::string value_or(const std::string& key, const std::string& fallback)
      const {
    const auto it = values_.find(key);
    return it == values_.end() ? fallback : it->second;
  }

  // Structural preset from model.variant / model.scale with explicit
  // model.* overrides applied on top. Validation is left to the builder.
  ModelConfig model() const {
    ModelConfig cfg = ModelConfig::make(
        variant_from_string(value_or("model.variant", "unet")),
        scale_from_string(value_or("model.scale", "toy")));
    const auto geti = [&](const char* key, std::int64_t& into) {
      if (assigned(key)) into = detail::config_parse_int(key, values_.at(key));
    };
    const auto getd = [&](const char* key, double& into) {
      if (assigned(key)) {
        into = detail::config_parse_double(key, values_.at(key));
      }
    };
    geti("model.input_channels", cfg.input_channels);
    geti("model.input_size", cfg.input_size);
    if (assigned("model.stage_filters")) {
      cfg.stage_filters = detail::config_parse_int_list(
          "model.stage_filters", values_.at("model.stage_filters"));
    }
    geti("model.fc_width", cfg.fc_width);
    geti("model.dense_depth", cfg.dense_depth);
    if (assigned("model.dense_growth")) {
      cfg.dense_growth = detail::config_parse_int_list(
          "model.dense_growth", values_.at("model.dense_growth"));
    }
    if (assigned("model.dense_include_input")) {
      cfg.dense_include_input = detail::config_parse_bool(
          "model.dense_include_input", values_.at("model.dense_include_input"));
    }
    geti("model.residual_blocks", cfg.residual_blocks);
    geti("model.merge_filters", cfg.merge_filters);
    getd("model.noise_sigma", cfg.noise_sigma);
    getd("model.dropout_rate", cfg.dropout_rate);
    return cfg;
  }

  // Scenario defaults (learning rate included) with explicit train.* and
  // augment.* overrides applied on top.
  TrainConfig train() const {
    TrainConfig cfg = TrainConfig::defaults_for(scenario_from_string(
        value_or("train.scenario", "direct_training")));
    if (assigned("train.learning_rate")) {
      cfg.learning_rate = detail::config_parse_double(
          "train.learning_rate", values_.at("train.learning_rate"));
    }
    if (assigned("train.momentum")) {
      cfg.momentum = detail::config_parse_double("train.momentum",
                                                 values_.at("train.momentum"));
    }
    if (assigned("train.batch_size")) {
      cfg.batch_size = detail::config_parse_int("train.batch_size",
                                                values_.at("train.batch_size"));
    }
    if (assigned("train.max_epochs")) {
      cfg.max_epochs = detail::config_parse_int("train.max_epochs",
                                                values_.at("train.max_epochs"));
    }
    if (assigned("train.patience")) {
      cfg.patience = detail::config_parse_int("train.patience",
                                              values_.at("train.patience"));
    }
    if (assigned("train.val_fraction")) {
      cfg.val_fraction = detail::config_parse_double(
          "train.val_fraction", values_.at("train.val_fraction"));
    }
    if (assigned("train.seed")) {
      cfg.seed = detail::config_parse_uint("train.seed",
                                           values_.at("train.seed"));
    }
    if (assigned("augment.enabled")) {
      cfg.augment.enabled = detail::config_parse_bool(
          "augment.enabled", values_.at("augment.enabled"));
    }
    if (assigned("augment.rotation_degrees")) {
      cfg.augment.rotation_degrees = detail::config_parse_double(
          "augment.rotation_degrees", values_.at("augment.rotation_degrees"));
    }
    if (assigned("augment.scale_min")) {
      cfg.augment.scale_min = detail::config_parse_double(
          "augment.scale_min", values_.at("augment.scale_min"));
    }
    if (assigned("augment.scale_max")) {
      cfg.augment.scale_max = detail::config_parse_double(
          "augment.scale_max", values_.at("augment.scale_max"));
    }
    return cfg;
  }

  std::string manifest_path() const { return value_or("data.manifest", ""); }
  std::string checkpoint_path() const {
    return value_or("data.checkpoint", "");
  }
  std::string out_dir() const { return value_or("data.out_dir", "out"); }
  std::int64_t workers() const {
    const std::int64_t n = detail::config_parse_int(
        "data.workers", value_or("data.workers", "1"));
    if (n < 1) throw ConfigError("config: data.workers must be >= 1");
    return n;
  }

  // The fully resolved configuration, one "key=value" line per key in a
  // fixed order. Re-running with exactly these assignments reproduces the
  // run. `actual_model` substitutes the network configuration when it came
  // from a checkpoint rather than from model.* keys.
  std::vector<std::string> effective_lines(
      const ModelConfig* actual_model = nullptr) const {
    const ModelConfig m = actual_model ? *actual_model : model();
    const TrainConfig t = train();
    std::vector<std::string> out;
    const auto add = [&](const std::string& key, const std::string& value) {
      out.push_back(key + "=" + value);
    };
    add("model.variant", variant_name(m.variant));
    add("model.scale", scale_name(m.scale));
    add("model.input_channels", std::to_string(m.input_channels));
    add("model.input_size", std::to_string(m.input_size));
    add("model.stage_filters", detail::join_int_list(m.stage_filters));
    add("model.fc_width", std::to_string(m.fc_width));
    add("model.dense_depth", std::to_string(m.dense_depth));
    add("model.dense_growth", detail::join_int_list(m.dense_growth));
    add("model.dense_include_input",
        m.dense_include_input ? "true" : "false");
    add("model.residual_blocks", std::to_string(m.residual_blocks));
    add("model.merge_filters", std::to_string(m.merge_filters));
    add("model.noise_sigma", detail::double_to_string(m.noise_sigma));
    add("model.dropout_rate", detail::double_to_string(m.dropout_rate));
    add("train.scenario", scenario_name(t.scenario));
    add("train.learning_rate", detail::double_to_string(t.learning_rate));
    add("train.momentum", detail::double_to_string(t.momentum));
    add("train.batch_size", std::to_string(t.batch_size));
    add("train.max_epochs", std::to_string(t.max_epochs));
    add("train.patience", std::to_string(t.patience));
    add("train.val_fraction", detail::double_to_string(t.val_fraction));
    add("train.seed", std::to_string(t.seed));
    add("augment.enabled", t.augment.enabled ? "true" : "false");
    add("augment.rotation_degrees",
        detail::double_to_string(t.augment.rotation_degrees));
    add("augment.scale_min", detail::double_to_string(t.augment.scale_min));
    add("augment.scale_max", detail::double_to_string(t.augment.scale_max));
    add("data.manifest", manifest_path());
    add("data.checkpoint", checkpoint_path());
    add("data.out_dir", out_dir());
    add("data.workers", std::to_string(workers()));
    return out;
  }

 private:
  static detail::KeyType key_type(const std::string& key) {
    for (const auto& [name, type] : detail::config_keys()) {
      if (name == key) return type;
    }
    throw ConfigError("config: unknown key '" + key + "'");
  }

  std::map<std::string, std::string> values_;
};

}  // namespace druseg
