#pragma once

#include <charconv>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "mixsize/data.hpp"
#include "mixsize/error.hpp"
#include "mixsize/model.hpp"
#include "mixsize/optim.hpp"
#include "mixsize/sched.hpp"
#include "mixsize/train.hpp"

// Run configuration: flat `section.key = value` text, grammar in
// docs/config_format.md.
namespace mixsize {

inline constexpr const char* kDataRootEnv = "MIXSIZE_DATA";

enum class Precision { f32, f64 };
enum class SmoothingMode { automatic, on, off };

struct RunConfig {
  ResNetConfig model{8, 16, 10, 3};

  struct Data {
    std::string dataset = "cifar10";  // cifar10 | cifar100
    std::string path;                 // empty: $MIXSIZE_DATA
    bool synthetic = false;
    std::int64_t synthetic_n = 5000;
    std::int64_t synthetic_test_n = 1000;
    std::int64_t subset = 0;  // 0: full train split
    std::uint64_t seed = 0;
    data::AugmentConfig augment;
  } data;

  struct Regime {
    std::string preset;  // overrides sizes when set
    std::vector<sched::SizeEntry> sizes{{32, 1.0}};
    sched::RegimeMode mode = sched::RegimeMode::fixed;
    sched::Strategy strategy = sched::Strategy::per_step;
    int base_size = 32;
    int base_batch = 64;
    int base_duplicates = 1;
    bool scale_lr = true;
  } regime;

  struct Optim {
    double lr = 0.1;
    double momentum = 0.9;
    double weight_decay = 1e-4;
    SmoothingMode smoothing = SmoothingMode::automatic;
    double alpha = 0.99;
    optim::SmoothingOrder order = optim::SmoothingOrder::pre_momentum;
    optim::LrSchedule schedule = optim::LrSchedule::step_decay;
    std::vector<int> milestones;  // empty: 50% / 75% of epochs
    double gamma = 0.1;
  } optim;

  struct Run {
    int epochs = 30;
    std::uint64_t seed = 1;
    Precision precision = Precision::f32;
    std::string out = "runs/default";
    bool use_schedule = true;
    int eval_every = 0;  // 0: only after the last epoch
  } run;

  struct Calib {
    int batches = 200;
    int batch_size = 64;
    bool augment = true;
  } calib;
};

namespace detail {

inline std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

template <class N>
N parse_number(const std::string& key, const std::string& v) {
  N out{};
  const char* end = v.data() + v.size();
  auto [p, ec] = std::from_chars(v.data(), end, out);
  if (ec != std::errc() || p != end) throw ConfigError("config: " + key + " expects a number, got '" + v + "'");
  return out;
}

inline bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
  if (v == "false" || v == "0" || v == "no" || v == "off") return false;
  throw ConfigError("config: " + key + " expects true/false, got '" + v + "'");
}

inline std::vector<int> parse_int_list(const std::string& key, const std::string& v) {
  std::vector<int> out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(parse_number<int>(key, item));
  }
  return out;
}

// Shortest text that parses back to the same value.
template <class T>
std::string format_value(const T& v) {
  char buf[64];
  auto [p, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, p);
}

inline std::string join(const std::vector<int>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
  return s;
}

struct Key {
  const char* name;
  std::function<void(RunConfig&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
};

#define MIXSIZE_NUM_KEY(NAME, FIELD, TYPE)                                                              \
  Key {                                                                                                 \
    NAME, [](RunConfig& c, const std::string& v) { c.FIELD = parse_number<TYPE>(NAME, v); },          \
        [](const RunConfig& c) { return format_value(c.FIELD); }                                       \
  }
#define MIXSIZE_BOOL_KEY(NAME, FIELD)                                                                   \
  Key {                                                                                                 \
    NAME, [](RunConfig& c, const std::string& v) { c.FIELD = parse_bool(NAME, v); },                  \
        [](const RunConfig& c) { return std::string(c.FIELD ? "true" : "false"); }                     \
  }
#define MIXSIZE_STR_KEY(NAME, FIELD)                                                                    \
  Key {                                                                                                 \
    NAME, [](RunConfig& c, const std::string& v) { c.FIELD = v; },                                     \
        [](const RunConfig& c) { return c.FIELD; }                                                     \
  }

inline const std::vector<Key>& keys() {
  static const std::vector<Key> table = {
      MIXSIZE_NUM_KEY("model.depth", model.depth, int),
      MIXSIZE_NUM_KEY("model.width", model.base_width, int),
      MIXSIZE_NUM_KEY("model.classes", model.num_classes, int),

      MIXSIZE_STR_KEY("data.dataset", data.dataset),
      MIXSIZE_STR_KEY("data.path", data.path),
      MIXSIZE_BOOL_KEY("data.synthetic", data.synthetic),
      MIXSIZE_NUM_KEY("data.synthetic_n", data.synthetic_n, std::int64_t),
      MIXSIZE_NUM_KEY("data.synthetic_test_n", data.synthetic_test_n, std::int64_t),
      MIXSIZE_NUM_KEY("data.subset", data.subset, std::int64_t),
      MIXSIZE_NUM_KEY("data.seed", data.seed, std::uint64_t),
      MIXSIZE_NUM_KEY("data.pad", data.augment.pad, int),
      MIXSIZE_NUM_KEY("data.flip_prob", data.augment.flip_prob, double),
      MIXSIZE_BOOL_KEY("data.augment", data.augment.enabled),

      MIXSIZE_STR_KEY("regime.preset", regime.preset),
      Key{"regime.sizes", [](RunConfig& c, const std::string& v) { c.regime.sizes = sched::parse_entries(v); },
          [](const RunConfig& c) { return sched::format_entries(c.regime.sizes); }},
      Key{"regime.mode", [](RunConfig& c, const std::string& v) { c.regime.mode = sched::parse_mode(v); },
          [](const RunConfig& c) { return std::string(sched::to_string(c.regime.mode)); }},
      Key{"regime.strategy",
          [](RunConfig& c, const std::string& v) { c.regime.strategy = sched::parse_strategy(v); },
          [](const RunConfig& c) { return std::string(sched::to_string(c.regime.strategy)); }},
      MIXSIZE_NUM_KEY("regime.base_size", regime.base_size, int),
      MIXSIZE_NUM_KEY("regime.base_batch", regime.base_batch, int),
      MIXSIZE_NUM_KEY("regime.base_duplicates", regime.base_duplicates, int),
      MIXSIZE_BOOL_KEY("regime.scale_lr", regime.scale_lr),

      MIXSIZE_NUM_KEY("optim.lr", optim.lr, double),
      MIXSIZE_NUM_KEY("optim.momentum", optim.momentum, double),
      MIXSIZE_NUM_KEY("optim.weight_decay", optim.weight_decay, double),
      Key{"optim.smoothing",
          [](RunConfig& c, const std::string& v) {
            if (v == "auto") c.optim.smoothing = SmoothingMode::automatic;
            else c.optim.smoothing = parse_bool("optim.smoothing", v) ? SmoothingMode::on : SmoothingMode::off;
          },
          [](const RunConfig& c) {
            return std::string(c.optim.smoothing == SmoothingMode::automatic ? "auto"
                               : c.optim.smoothing == SmoothingMode::on      ? "on"
                                                                             : "off");
          }},
      MIXSIZE_NUM_KEY("optim.alpha", optim.alpha, double),
      Key{"optim.smoothing_order",
          [](RunConfig& c, const std::string& v) {
            if (v == "pre_momentum") c.optim.order = optim::SmoothingOrder::pre_momentum;
            else if (v == "post_momentum") c.optim.order = optim::SmoothingOrder::post_momentum;
            else throw ConfigError("config: optim.smoothing_order must be pre_momentum or post_momentum");
          },
          [](const RunConfig& c) {
            return std::string(c.optim.order == optim::SmoothingOrder::pre_momentum ? "pre_momentum"
                                                                                     : "post_momentum");
          }},
      Key{"optim.schedule",
          [](RunConfig& c, const std::string& v) { c.optim.schedule = optim::parse_lr_schedule(v); },
          [](const RunConfig& c) { return std::string(optim::to_string(c.optim.schedule)); }},
      Key{"optim.milestones",
          [](RunConfig& c, const std::string& v) { c.optim.milestones = parse_int_list("optim.milestones", v); },
          [](const RunConfig& c) { return join(c.optim.milestones); }},
      MIXSIZE_NUM_KEY("optim.gamma", optim.gamma, double),

      MIXSIZE_NUM_KEY("run.epochs", run.epochs, int),
      MIXSIZE_NUM_KEY("run.seed", run.seed, std::uint64_t),
      Key{"run.precision",
          [](RunConfig& c, const std::string& v) {
            if (v == "f32" || v == "float32") c.run.precision = Precision::f32;
            else if (v == "f64" || v == "float64") c.run.precision = Precision::f64;
            else throw ConfigError("config: run.precision must be f32 or f64");
          },
          [](const RunConfig& c) { return std::string(c.run.precision == Precision::f32 ? "f32" : "f64"); }},
      MIXSIZE_STR_KEY("run.out", run.out),
      MIXSIZE_BOOL_KEY("run.use_schedule", run.use_schedule),
      MIXSIZE_NUM_KEY("run.eval_every", run.eval_every, int),

      MIXSIZE_NUM_KEY("calib.batches", calib.batches, int),
      MIXSIZE_NUM_KEY("calib.batch_size", calib.batch_size, int),
      MIXSIZE_BOOL_KEY("calib.augment", calib.augment),
  };
  return table;
}

#undef MIXSIZE_NUM_KEY
#undef MIXSIZE_BOOL_KEY
#undef MIXSIZE_STR_KEY

}  // namespace detail

/// Sets one dotted key; unknown keys and malformed values throw ConfigError.
inline void set_config_value(RunConfig& cfg, const std::string& key, const std::string& value) {
  for (const auto& k : detail::keys()) {
    if (key == k.name) {
      k.set(cfg, value);
      return;
    }
  }
  throw ConfigError("config: unknown key '" + key + "'");
}

/// Applies "key=value".
inline void apply_override(RunConfig& cfg, std::string_view assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string_view::npos) throw ConfigError("config: expected key=value, got '" + std::string(assignment) + "'");
  set_config_value(cfg, detail::trim(assignment.substr(0, eq)), detail::trim(assignment.substr(eq + 1)));
}

/// Parses config text on top of `cfg`: one `key = value` per line, `#`
/// starts a comment, `[section]` headers prefix subsequent keys.
inline void parse_config(RunConfig& cfg, std::string_view text, const std::string& origin = "<config>") {
  std::istringstream in{std::string(text)};
  std::string line, section;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    try {
      if (line.front() == '[') {
        if (line.back() != ']') throw ConfigError("config: unterminated section header");
        section = detail::trim(std::string_view(line).substr(1, line.size() - 2));
        continue;
      }
      const auto eq = line.find('=');
      if (eq == std::string::npos) throw ConfigError("config: expected key = value");
      auto key = detail::trim(std::string_view(line).substr(0, eq));
      if (!section.empty()) key = section + "." + key;
      set_config_value(cfg, key, detail::trim(std::string_view(line).substr(eq + 1)));
    } catch (const ConfigError& e) {
      throw ConfigError(origin + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
}

inline RunConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  RunConfig cfg;
  parse_config(cfg, ss.str(), path.string());
  return cfg;
}

/// Every key with its current value, in a form parse_config reads back.
inline std::string format_config(const RunConfig& cfg) {
  std::string out;
  for (const auto& k : detail::keys()) out += std::string(k.name) + " = " + k.get(cfg) + "\n";
  return out;
}

inline sched::MixSizeDistribution make_distribution(const RunConfig& cfg) {
  sched::MixSizeDistribution dist;
  if (!cfg.regime.preset.empty()) {
    dist = sched::preset(cfg.regime.preset, cfg.regime.mode);
  } else {
    dist.entries = cfg.regime.sizes;
    dist.base_size = cfg.regime.base_size;
    dist.base_batch = cfg.regime.base_batch;
    dist.mode = cfg.regime.mode;
  }
  dist.base_duplicates = cfg.regime.base_duplicates;
  sched::validate(dist);
  return dist;
}

/// Checks cross-field constraints and returns the training options.
inline TrainOptions make_train_options(const RunConfig& cfg) {
  cfg.model.validate();
  if (cfg.run.epochs < 1) throw ConfigError("config: run.epochs must be at least 1");
  if (cfg.calib.batches < 1 || cfg.calib.batch_size < 1) throw ConfigError("config: calib sizes must be positive");
  TrainOptions opt;
  opt.regime = make_distribution(cfg);
  opt.strategy = cfg.regime.strategy;
  opt.use_schedule = cfg.run.use_schedule;
  opt.sgd.lr = cfg.optim.lr;
  opt.sgd.momentum = cfg.optim.momentum;
  opt.sgd.weight_decay = cfg.optim.weight_decay;
  opt.sgd.smoothing = cfg.optim.smoothing == SmoothingMode::on ||
                      (cfg.optim.smoothing == SmoothingMode::automatic && opt.regime.mode == sched::RegimeMode::b_plus);
  opt.sgd.alpha = cfg.optim.alpha;
  opt.sgd.order = cfg.optim.order;
  opt.sgd.validate();
  opt.lr_schedule = cfg.optim.schedule;
  opt.milestones = cfg.optim.milestones;
  opt.lr_gamma = cfg.optim.gamma;
  opt.scale_lr = cfg.regime.scale_lr;
  opt.epochs = cfg.run.epochs;
  opt.seed = cfg.run.seed;
  opt.augment = cfg.data.augment;
  opt.augment.validate();
  return opt;
}

/// Data root from the config, falling back to $MIXSIZE_DATA.
inline std::filesystem::path data_root(const RunConfig& cfg) {
  if (!cfg.data.path.empty()) return cfg.data.path;
  if (const char* env = std::getenv(kDataRootEnv); env && *env) return env;
  throw DataError(std::string("no data path: set data.path or ") + kDataRootEnv);
}

/// Train / test splits as the config describes them. Synthetic splits use
/// disjoint seeds; a subset keeps the full-train normalization.
inline data::TrainTest load_data(const RunConfig& cfg) {
  data::TrainTest tt;
  if (cfg.data.synthetic) {
    const int classes = cfg.model.num_classes;
    tt.train = data::synth_dataset(cfg.data.synthetic_n, classes, cfg.data.seed, data::Split::train);
    tt.test = data::synth_dataset(cfg.data.synthetic_test_n, classes, cfg.data.seed + 1000003, data::Split::test);
    tt.train.norm = data::compute_normalization(tt.train);
    tt.test.norm = tt.train.norm;
  } else {
    const auto root = data_root(cfg);
    if (cfg.data.dataset == "cifar10") tt = data::load_cifar10(root);
    else if (cfg.data.dataset == "cifar100") tt = data::load_cifar100(root);
    else throw ConfigError("config: data.dataset must be cifar10 or cifar100");
  }
  if (tt.train.num_classes != cfg.model.num_classes) {
    throw ConfigError("config: model.classes = " + std::to_string(cfg.model.num_classes) + " but dataset has " +
                      std::to_string(tt.train.num_classes));
  }
  if (cfg.data.subset > 0 && cfg.data.subset < tt.train.size()) {
    auto norm = tt.train.norm;
    tt.train = data::subset(tt.train, cfg.data.subset, cfg.data.seed);
    tt.train.norm = norm;
  }
  return tt;
}

}  // namespace mixsize
