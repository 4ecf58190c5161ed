#pragma once

// Flat key=value run configuration, shared between config files and CLI
// flags. '#' starts a comment; blank lines are ignored; unknown keys are
// rejected so typos cannot silently fall back to defaults.

#include <fstream>
#include <string>

#include "data.hpp"
#include "interp.hpp"
#include "model.hpp"
#include "train.hpp"

namespace marscf {

struct RunConfig {
  FlowConfig flow;
  TrainConfig train;
  InterpConfig interp;
  DatasetSpec data;
  double temperature = 1.0;
  int sample_count = 16;
};

namespace detail {

inline int to_int(const std::string& key, const std::string& v) {
  size_t used = 0;
  int out = 0;
  try {
    out = std::stoi(v, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  check(used == v.size() && !v.empty(), "config: key '" + key + "' needs an integer, got '" + v + "'");
  return out;
}

inline double to_double(const std::string& key, const std::string& v) {
  size_t used = 0;
  double out = 0.0;
  try {
    out = std::stod(v, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  check(used == v.size() && !v.empty(), "config: key '" + key + "' needs a number, got '" + v + "'");
  return out;
}

}  // namespace detail

inline void apply_config_key(RunConfig& cfg, const std::string& key, const std::string& value) {
  using detail::to_double;
  using detail::to_int;
  if (key == "channels") cfg.flow.channels = to_int(key, value);
  else if (key == "size") cfg.flow.size = to_int(key, value);
  else if (key == "levels") cfg.flow.levels = to_int(key, value);
  else if (key == "flow_steps") cfg.flow.flow_steps = to_int(key, value);
  else if (key == "coupling") cfg.flow.coupling = coupling_kind_from_string(value);
  else if (key == "width") cfg.flow.width = to_int(key, value);
  else if (key == "mix_components") cfg.flow.mix_components = to_int(key, value);
  else if (key == "prior_hidden") cfg.flow.prior_hidden = to_int(key, value);
  else if (key == "prior_cond") cfg.flow.prior_cond = to_int(key, value);
  else if (key == "prior_layers") cfg.flow.prior_layers = to_int(key, value);
  else if (key == "epochs") cfg.train.epochs = to_int(key, value);
  else if (key == "batch_size") cfg.train.batch_size = to_int(key, value);
  else if (key == "lr") cfg.train.lr = to_double(key, value);
  else if (key == "clip_norm") cfg.train.clip_norm = to_double(key, value);
  else if (key == "checkpoint_every") cfg.train.checkpoint_every = to_int(key, value);
  else if (key == "init_batch") cfg.train.init_batch = to_int(key, value);
  else if (key == "seed") {
    cfg.train.seed = static_cast<std::uint64_t>(to_int(key, value));
    cfg.interp.seed = cfg.train.seed;
  } else if (key == "data_path") cfg.data.path = value;
  else if (key == "data_format") cfg.data.format = value;
  else if (key == "bits") cfg.data.bits = to_int(key, value);
  else if (key == "val_fraction") cfg.data.val_fraction = to_double(key, value);
  else if (key == "interp_steps") cfg.interp.steps = to_int(key, value);
  else if (key == "lambda1") cfg.interp.lambda1 = to_double(key, value);
  else if (key == "lambda2") cfg.interp.lambda2 = to_double(key, value);
  else if (key == "interp_lr") cfg.interp.lr = to_double(key, value);
  else if (key == "interp_iterations") cfg.interp.iterations = to_int(key, value);
  else if (key == "temperature") cfg.temperature = to_double(key, value);
  else if (key == "sample_count") cfg.sample_count = to_int(key, value);
  else if (key == "out_dir") cfg.train.out_dir = value;
  else throw std::invalid_argument("config: unknown key '" + key + "'");
  // dataset geometry follows the model geometry
  cfg.data.channels = cfg.flow.channels;
  cfg.data.size = cfg.flow.size;
}

inline void load_config_file(RunConfig& cfg, const std::string& path) {
  std::ifstream in(path);
  check(in.good(), "config: cannot open " + path);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const size_t hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    const size_t first = line.find_first_not_of(" \t\r");
    if (first == std::string::npos) continue;
    const size_t last = line.find_last_not_of(" \t\r");
    line = line.substr(first, last - first + 1);
    const size_t eq = line.find('=');
    check(eq != std::string::npos,
          "config: " + path + ":" + std::to_string(lineno) + ": expected key=value");
    auto trim = [](std::string s) {
      const size_t a = s.find_first_not_of(" \t");
      if (a == std::string::npos) return std::string();
      const size_t b = s.find_last_not_of(" \t");
      return s.substr(a, b - a + 1);
    };
    apply_config_key(cfg, trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
  }
}

}  // namespace marscf
