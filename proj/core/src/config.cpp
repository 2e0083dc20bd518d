#include "densesiam/config.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <functional>
#include <set>
#include <sstream>

#include "densesiam/errors.hpp"

namespace dsiam {

std::string to_string(Mode m) { return m == Mode::Pretrain ? "pretrain" : "seg"; }

std::string to_string(Schedule s) {
  switch (s) {
    case Schedule::Cosine: return "cosine";
    case Schedule::Constant: return "constant";
    default: return "auto";
  }
}

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::string fmt(double v) {
  char buf[64];
  auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

double parse_double(const std::string& v) {
  double out = 0;
  auto r = std::from_chars(v.data(), v.data() + v.size(), out);
  if (r.ec != std::errc() || r.ptr != v.data() + v.size()) throw ConfigError("expected a number, got '" + v + "'");
  return out;
}

template <typename I>
I parse_int(const std::string& v) {
  I out = 0;
  auto r = std::from_chars(v.data(), v.data() + v.size(), out);
  if (r.ec != std::errc() || r.ptr != v.data() + v.size()) throw ConfigError("expected an integer, got '" + v + "'");
  return out;
}

bool parse_bool(const std::string& v) {
  if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
  if (v == "false" || v == "0" || v == "no" || v == "off") return false;
  throw ConfigError("expected true or false, got '" + v + "'");
}

std::vector<int> parse_int_list(const std::string& v) {
  std::vector<int> out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(parse_int<int>(trim(item)));
  if (out.empty()) throw ConfigError("expected a comma-separated list of integers");
  return out;
}

struct Key {
  const char* name;
  std::function<void(TrainConfig&, const std::string&)> set;
  std::function<std::string(const TrainConfig&)> get;
};

const std::vector<Key>& keys() {
  static const std::vector<Key> table = [] {
    std::vector<Key> k;
    auto dbl = [&k](const char* n, double TrainConfig::*m) {
      k.push_back({n, [m](TrainConfig& c, const std::string& v) { c.*m = parse_double(v); },
                   [m](const TrainConfig& c) { return fmt(c.*m); }});
    };
    auto integer = [&k](const char* n, int TrainConfig::*m) {
      k.push_back({n, [m](TrainConfig& c, const std::string& v) { c.*m = parse_int<int>(v); },
                   [m](const TrainConfig& c) { return std::to_string(c.*m); }});
    };
    auto boolean = [&k](const char* n, bool TrainConfig::*m) {
      k.push_back({n, [m](TrainConfig& c, const std::string& v) { c.*m = parse_bool(v); },
                   [m](const TrainConfig& c) { return std::string(c.*m ? "true" : "false"); }});
    };
    k.push_back({"mode",
                 [](TrainConfig& c, const std::string& v) {
                   if (v == "pretrain") {
                     c.mode = Mode::Pretrain;
                   } else if (v == "seg") {
                     c.mode = Mode::Seg;
                   } else {
                     throw ConfigError("mode must be pretrain or seg, got '" + v + "'");
                   }
                 },
                 [](const TrainConfig& c) { return to_string(c.mode); }});
    dbl("base_lr", &TrainConfig::base_lr);
    integer("batch_size", &TrainConfig::batch_size);
    integer("epochs", &TrainConfig::epochs);
    k.push_back({"max_steps", [](TrainConfig& c, const std::string& v) { c.max_steps = parse_int<std::int64_t>(v); },
                 [](const TrainConfig& c) { return std::to_string(c.max_steps); }});
    dbl("momentum", &TrainConfig::momentum);
    dbl("weight_decay", &TrainConfig::weight_decay);
    k.push_back({"schedule",
                 [](TrainConfig& c, const std::string& v) {
                   if (v == "cosine") {
                     c.schedule = Schedule::Cosine;
                   } else if (v == "constant") {
                     c.schedule = Schedule::Constant;
                   } else if (v == "auto") {
                     c.schedule = Schedule::Auto;
                   } else {
                     throw ConfigError("schedule must be cosine, constant or auto, got '" + v + "'");
                   }
                 },
                 [](const TrainConfig& c) { return to_string(c.schedule); }});
    dbl("region_start_fraction", &TrainConfig::region_start_fraction);
    k.push_back({"seed", [](TrainConfig& c, const std::string& v) { c.seed = parse_int<std::uint64_t>(v); },
                 [](const TrainConfig& c) { return std::to_string(c.seed); }});
    dbl("lambda_sim", &TrainConfig::lambda_sim);
    dbl("lambda1", &TrainConfig::lambda1);
    dbl("lambda2", &TrainConfig::lambda2);
    dbl("lambda3", &TrainConfig::lambda3);
    integer("K", &TrainConfig::K);
    integer("N", &TrainConfig::N);
    integer("N_aux", &TrainConfig::N_aux);
    dbl("tau", &TrainConfig::tau);
    k.push_back({"dist",
                 [](TrainConfig& c, const std::string& v) {
                   if (v == "ce") {
                     c.dist = Distance::CrossEntropy;
                   } else if (v == "cosine") {
                     c.dist = Distance::Cosine;
                   } else {
                     throw ConfigError("dist must be ce or cosine, got '" + v + "'");
                   }
                 },
                 [](const TrainConfig& c) { return std::string(c.dist == Distance::Cosine ? "cosine" : "ce"); }});
    boolean("region_stopgrad", &TrainConfig::region_stopgrad);
    boolean("seg_cross_view", &TrainConfig::seg_cross_view);
    k.push_back({"grid_strategy",
                 [](TrainConfig& c, const std::string& v) {
                   if (v == "uniform") {
                     c.grid_strategy = GridStrategy::Uniform;
                   } else if (v == "biased") {
                     c.grid_strategy = GridStrategy::Biased;
                   } else {
                     throw ConfigError("grid_strategy must be uniform or biased, got '" + v + "'");
                   }
                 },
                 [](const TrainConfig& c) {
                   return std::string(c.grid_strategy == GridStrategy::Biased ? "biased" : "uniform");
                 }});
    integer("grid_k", &TrainConfig::grid_k);
    dbl("grid_beta", &TrainConfig::grid_beta);
    k.push_back({"stage_channels",
                 [](TrainConfig& c, const std::string& v) { c.stage_channels = parse_int_list(v); },
                 [](const TrainConfig& c) {
                   std::string s;
                   for (std::size_t i = 0; i < c.stage_channels.size(); ++i) {
                     if (i) s += ",";
                     s += std::to_string(c.stage_channels[i]);
                   }
                   return s;
                 }});
    integer("output_stride", &TrainConfig::output_stride);
    integer("head_width", &TrainConfig::head_width);
    integer("region_dim", &TrainConfig::region_dim);
    integer("global_dim", &TrainConfig::global_dim);
    integer("view_size", &TrainConfig::view_size);
    boolean("augment", &TrainConfig::augment);
    integer("num_workers", &TrainConfig::num_workers);
    k.push_back({"data", [](TrainConfig& c, const std::string& v) { c.data = v; },
                 [](const TrainConfig& c) { return c.data; }});
    return k;
  }();
  return table;
}

}  // namespace

TrainConfig parse_config(const std::string& text, Mode mode) {
  TrainConfig cfg;
  cfg.mode = mode;
  std::set<std::string> seen;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const std::string where = "config line " + std::to_string(lineno) + ": ";
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError(where + "expected 'key = value'");
    const std::string k = trim(line.substr(0, eq));
    const std::string v = trim(line.substr(eq + 1));
    if (k == "vflip" || k == "vertical_flip") throw ConfigError(where + "vertical flips are not supported");
    const auto& table = keys();
    auto it = std::find_if(table.begin(), table.end(), [&](const Key& e) { return k == e.name; });
    if (it == table.end()) throw ConfigError(where + "unknown key '" + k + "'");
    if (!seen.insert(k).second) throw ConfigError(where + "key '" + k + "' given twice");
    try {
      it->set(cfg, v);
    } catch (const ConfigError& e) {
      throw ConfigError(where + k + ": " + e.what());
    }
  }
  if (cfg.mode != mode) {
    throw ConfigError("config sets mode = " + to_string(cfg.mode) + " but the command trains in " + to_string(mode) +
                      " mode");
  }
  validate(cfg);
  return cfg;
}

TrainConfig load_config(const std::filesystem::path& path, Mode mode) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw ConfigError("cannot read config file " + path.string());
  std::stringstream ss;
  ss << f.rdbuf();
  return parse_config(ss.str(), mode);
}

std::string to_text(const TrainConfig& cfg) {
  std::string out;
  for (const auto& k : keys()) {
    const std::string v = k.get(cfg);
    if (std::string(k.name) == "data" && v.empty()) continue;
    out += std::string(k.name) + " = " + v + "\n";
  }
  return out;
}

void validate(const TrainConfig& c) {
  auto need = [](bool ok, const std::string& msg) {
    if (!ok) throw ConfigError(msg);
  };
  need(c.base_lr > 0 && std::isfinite(c.base_lr), "base_lr must be > 0");
  need(c.batch_size >= 2, "batch_size must be >= 2 (batch normalization needs two samples)");
  need(c.epochs >= 0, "epochs must be >= 0");
  need(c.max_steps >= 0, "max_steps must be >= 0");
  need(c.momentum >= 0 && c.momentum < 1, "momentum must lie in [0,1)");
  need(c.weight_decay >= 0, "weight_decay must be >= 0");
  need(c.region_start_fraction >= 0 && c.region_start_fraction <= 1, "region_start_fraction must lie in [0,1]");
  need(c.K >= 1, "K must be >= 1");
  need(c.N >= 0, "N must be >= 0");
  need(c.N_aux >= 0, "N_aux must be >= 0");
  need(c.tau > 0, "tau must be > 0");
  need(c.grid_k >= 1, "grid_k must be >= 1");
  need(c.grid_beta >= 0 && c.grid_beta <= 1, "grid_beta must lie in [0,1]");
  need(c.output_stride >= 0, "output_stride must be >= 0");
  need(c.view_size >= 16, "view_size must be >= 16");
  need(c.num_workers >= 1, "num_workers must be >= 1");
  LossWeights w{c.lambda_sim, c.lambda1, c.lambda2, c.lambda3, 0.0};
  validate(w);
  if (c.mode == Mode::Seg) need(c.N_aux >= 2, "seg mode needs N_aux >= 2");
}

int resolved_output_stride(const TrainConfig& cfg) {
  if (cfg.output_stride > 0) return cfg.output_stride;
  return cfg.mode == Mode::Pretrain ? 8 : 4;
}

Schedule resolved_schedule(const TrainConfig& cfg) {
  if (cfg.schedule != Schedule::Auto) return cfg.schedule;
  return cfg.mode == Mode::Pretrain ? Schedule::Cosine : Schedule::Constant;
}

int resolved_num_classes(const TrainConfig& cfg, int dataset_classes) {
  if (cfg.mode == Mode::Pretrain) return cfg.N > 0 ? cfg.N : 32;
  if (dataset_classes <= 0) throw ConfigError("seg mode needs a labeled dataset to know the class count");
  if (cfg.N > 0 && cfg.N != dataset_classes) {
    throw ConfigError("N = " + std::to_string(cfg.N) + " does not match the dataset's " +
                      std::to_string(dataset_classes) + " classes");
  }
  return dataset_classes;
}

ModelConfig model_config(const TrainConfig& cfg, int num_classes) {
  ModelConfig m;
  m.encoder.stage_channels = cfg.stage_channels;
  m.encoder.output_stride = resolved_output_stride(cfg);
  m.encoder.input_size = cfg.view_size;
  m.head_width = cfg.head_width;
  m.num_classes = num_classes;
  m.aux_classes = cfg.mode == Mode::Seg ? cfg.N_aux : 0;
  m.region_dim = cfg.region_dim;
  m.global_dim = cfg.global_dim;
  m.region_heads = true;
  m.global_branch = cfg.mode == Mode::Pretrain;
  validate(m);
  return m;
}

LossWeights loss_weights(const TrainConfig& cfg, int num_classes) {
  LossWeights w{cfg.lambda_sim, cfg.lambda1, cfg.lambda2, cfg.lambda3, 0.0};
  if (cfg.mode == Mode::Seg) {
    const auto [l1, l4] = seg_lambdas(num_classes, cfg.N_aux);
    w.lambda1 = l1;
    w.lambda4 = l4;
  }
  return w;
}

}  // namespace dsiam
