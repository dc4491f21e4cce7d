// mixsize: train / eval-sweep / calibrate / analyze-gradients.

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <sstream>

#include "mixsize/mixsize.hpp"

namespace fs = std::filesystem;
using namespace mixsize;

namespace {

enum Exit { kOk = 0, kOther = 1, kConfig = 2, kData = 3, kNumeric = 4 };

// Flags shared by every command that needs a RunConfig.
struct ConfigFlags {
  std::string config_file;
  std::vector<std::string> sets;
  std::string data;
  std::optional<std::int64_t> subset;
  bool synthetic = false;
  std::string precision;

  void add_to(CLI::App& cmd) {
    cmd.add_option("--set", sets, "Override a config key (key=value), repeatable");
    cmd.add_option("--data", data, std::string("Data directory (default: $") + kDataRootEnv + ")");
    cmd.add_option("--subset", subset, "Class-balanced training subset size");
    cmd.add_flag("--synthetic", synthetic, "Use the built-in synthetic shape dataset");
    cmd.add_option("--precision", precision, "f32 or f64")->check(CLI::IsMember({"f32", "f64"}));
  }

  void apply(RunConfig& cfg) const {
    for (const auto& s : sets) apply_override(cfg, s);
    if (!data.empty()) cfg.data.path = data;
    if (subset) cfg.data.subset = *subset;
    if (synthetic) cfg.data.synthetic = true;
    if (!precision.empty()) set_config_value(cfg, "run.precision", precision);
  }
};

// Config recorded in a checkpoint, with command-line overrides on top.
RunConfig config_from_checkpoint(const Metadata& meta, const ConfigFlags& flags) {
  RunConfig cfg;
  if (auto it = meta.find("config"); it != meta.end()) parse_config(cfg, it->second, "checkpoint");
  flags.apply(cfg);
  return cfg;
}

Metadata peek_metadata(const fs::path& path) {
  return load_checkpoint<float>(path).meta;
}

template <class F>
auto with_precision(const RunConfig& cfg, F&& f) {
  if (cfg.run.precision == Precision::f64) return f(double{});
  return f(float{});
}

// ---- train ----------------------------------------------------------------

struct TrainFlags {
  ConfigFlags common;
  std::string out;
  std::optional<int> epochs;
  std::optional<std::uint64_t> seed;
  bool print_config = false;
};

template <class T>
int run_train(const RunConfig& cfg) {
  auto opt = make_train_options(cfg);
  const auto tt = load_data(cfg);
  const fs::path out = cfg.run.out;
  fs::create_directories(out);
  const auto cfg_text = format_config(cfg);
  std::ofstream(out / "config.txt") << cfg_text;

  ResNet<T> model(cfg.model, cfg.run.seed);
  Metadata meta{{"config", cfg_text}, {"tag", "initial"}, {"epoch", "-1"}};
  save_checkpoint(out / "init.ckpt", model, tt.train.norm, meta);

  CsvFile steps(out / "steps.csv", kTrainMetricsSchema, MetricsRecord::header());
  CsvFile epochs(out / "epochs.csv", kEpochMetricsSchema, EpochRecord::header(), 1);
  opt.on_step = [&](const MetricsRecord& r) { steps.append(r); };
  fs::path last_good;
  opt.on_epoch = [&](int epoch, const EpochRecord& r) {
    auto row = r;
    const bool last = epoch + 1 == cfg.run.epochs;
    if (last || (cfg.run.eval_every > 0 && (epoch + 1) % cfg.run.eval_every == 0)) {
      row.test_top1 = analysis::evaluate(model, tt.test, cfg.regime.base_size);
    }
    epochs.append(row);
    steps.flush();
    meta["tag"] = last ? "final" : "partial";
    meta["epoch"] = std::to_string(epoch);
    char name[32];
    std::snprintf(name, sizeof name, "epoch_%03d.ckpt", epoch);
    save_checkpoint(out / name, model, tt.train.norm, meta);
    last_good = out / name;
    std::cout << "epoch " << std::setw(3) << epoch << "  steps " << std::setw(7) << r.steps << "  loss "
              << std::fixed << std::setprecision(4) << r.train_loss;
    if (row.test_top1 >= 0) std::cout << "  top1@" << cfg.regime.base_size << " " << std::setprecision(2) << row.test_top1;
    std::cout << std::defaultfloat << std::endl;
  };

  std::cout << "train: " << tt.train.size() << " images, " << opt.regime.entries.size() << " sizes, mode "
            << sched::to_string(opt.regime.mode) << ", base lr " << effective_base_lr(opt) << std::endl;
  try {
    const auto result = train(model, tt.train, opt);
    save_checkpoint(out / "final.ckpt", model, tt.train.norm, meta);
    std::cout << "done: " << result.steps << " optimizer steps, checksum " << std::hex << parameter_checksum(model)
              << std::dec << ", checkpoint " << (out / "final.ckpt").string() << std::endl;
  } catch (const NumericError&) {
    steps.flush();
    if (!last_good.empty()) std::cerr << "last good checkpoint: " << last_good.string() << '\n';
    throw;
  }
  return kOk;
}

int cmd_train(const TrainFlags& f) {
  RunConfig cfg = f.common.config_file.empty() ? RunConfig{} : load_config(f.common.config_file);
  f.common.apply(cfg);
  if (!f.out.empty()) cfg.run.out = f.out;
  if (f.epochs) cfg.run.epochs = *f.epochs;
  if (f.seed) cfg.run.seed = *f.seed;
  if (f.print_config) {
    make_train_options(cfg);
    std::cout << format_config(cfg);
    return kOk;
  }
  return with_precision(cfg, [&](auto tag) { return run_train<decltype(tag)>(cfg); });
}

// ---- eval-sweep -----------------------------------------------------------

struct SweepFlags {
  ConfigFlags common;
  std::string checkpoint;
  std::vector<int> sizes;
  bool imagenet_sizes = false;
  bool no_calibrate = false;
  std::optional<int> batches;
  std::string preprocess = "resize";
  std::string out;
  std::uint64_t seed = 0;
};

std::vector<int> imagenet_sweep_sizes() {
  std::vector<int> s;
  for (int m = -6; m <= 6; ++m) s.push_back(224 + 32 * m);
  return s;
}

template <class T>
int run_sweep(const SweepFlags& f, const RunConfig& cfg) {
  auto ck = load_checkpoint<T>(f.checkpoint);
  auto tt = load_data(cfg);
  tt.train.norm = tt.test.norm = ck.norm;
  analysis::SweepOptions opt;
  opt.calibrate = !f.no_calibrate;
  opt.calib_batches = f.batches.value_or(cfg.calib.batches);
  opt.calib_batch_size = cfg.calib.batch_size;
  opt.calib_augment = cfg.calib.augment;
  opt.calib_seed = f.seed;
  opt.preprocess = analysis::parse_preprocess(f.preprocess);
  const auto sizes = !f.sizes.empty() ? f.sizes : f.imagenet_sizes ? imagenet_sweep_sizes() : std::vector<int>{16, 24, 32, 40};
  const auto points = analysis::eval_size_sweep(ck.model, tt.train, tt.test, sizes, opt);

  std::ostringstream csv;
  csv.precision(10);
  csv << "# schema=" << kSweepSchema << "\nsize,top1,flops,calibrated\n";
  for (const auto& p : points) csv << p.size << ',' << p.top1 << ',' << p.flops << ',' << (p.calibrated ? 1 : 0) << '\n';
  if (f.out.empty()) {
    std::cout << csv.str();
  } else {
    const fs::path tmp = f.out + ".tmp";
    std::ofstream(tmp) << csv.str();
    fs::rename(tmp, f.out);
  }
  return kOk;
}

int cmd_sweep(const SweepFlags& f) {
  const auto cfg = config_from_checkpoint(peek_metadata(f.checkpoint), f.common);
  return with_precision(cfg, [&](auto tag) { return run_sweep<decltype(tag)>(f, cfg); });
}

// ---- calibrate ------------------------------------------------------------

struct CalibFlags {
  ConfigFlags common;
  std::string checkpoint;
  int size = 0;
  std::optional<int> batches;
  std::string out;
  std::uint64_t seed = 0;
};

template <class T>
int run_calibrate(const CalibFlags& f, const RunConfig& cfg) {
  auto ck = load_checkpoint<T>(f.checkpoint);
  auto tt = load_data(cfg);
  tt.train.norm = ck.norm;
  const auto before = parameter_checksum(ck.model);
  data::AugmentConfig aug = cfg.data.augment;
  aug.enabled = cfg.calib.augment;
  const int batches = f.batches.value_or(cfg.calib.batches);
  calib::calibrate<T>(ck.model, data::batch_stream<T>(tt.train, f.size, cfg.calib.batch_size, aug, f.seed), f.size,
                      batches);
  if (parameter_checksum(ck.model) != before) throw std::logic_error("calibration changed the weights");
  const fs::path out = f.out.empty() ? calibrated_path(f.checkpoint, f.size) : fs::path(f.out);
  ck.meta["calibrated_size"] = std::to_string(f.size);
  ck.meta["calibration_batches"] = std::to_string(batches);
  save_checkpoint(out, ck.model, ck.norm, ck.meta);
  std::cout << out.string() << '\n';
  return kOk;
}

int cmd_calibrate(const CalibFlags& f) {
  const auto cfg = config_from_checkpoint(peek_metadata(f.checkpoint), f.common);
  return with_precision(cfg, [&](auto tag) { return run_calibrate<decltype(tag)>(f, cfg); });
}

// ---- analyze-gradients ----------------------------------------------------

struct AnalyzeFlags {
  ConfigFlags common;
  std::string checkpoint;
  std::vector<int> sizes{32, 24};
  int pairs = 200;
  std::uint64_t seed = 0;
  std::string out;
};

analysis::CheckpointTag tag_of(const Metadata& meta) {
  const auto it = meta.find("tag");
  if (it == meta.end() || it->second == "initial") return analysis::CheckpointTag::initial;
  return it->second == "final" ? analysis::CheckpointTag::final_state : analysis::CheckpointTag::partial;
}

void print_summary(std::ostream& os, const analysis::CorrelationReport& r) {
  const auto a = std::to_string(r.size_a), b = std::to_string(r.size_b);
  os << "gradient statistics (" << analysis::to_string(r.checkpoint_tag) << ", " << r.n_pairs << " pairs)\n";
  os << std::left << std::setw(22) << ("rho(x^" + a + ", x^" + b + ")") << std::right << std::setw(12)
     << std::setprecision(4) << r.rho_same_image_cross_size << '\n';
  os << std::left << std::setw(22) << ("rho(x^" + a + ", y^" + a + ")") << std::right << std::setw(12)
     << r.rho_diff_image_same_size << '\n';
  for (const auto& [s, v] : r.var_per_size) {
    os << std::left << std::setw(22) << ("V(x^" + std::to_string(s) + ")") << std::right << std::setw(12)
       << std::scientific << std::setprecision(3) << v << std::defaultfloat << '\n';
  }
}

template <class T>
int run_analyze(const AnalyzeFlags& f, const RunConfig& cfg) {
  if (f.sizes.size() != 2) throw ConfigError("--sizes takes exactly two sizes");
  auto ck = load_checkpoint<T>(f.checkpoint);
  auto tt = load_data(cfg);
  tt.train.norm = ck.norm;
  const auto r = analysis::grad_correlation_experiment(ck.model, tt.train, f.sizes[0], f.sizes[1], f.pairs, f.seed,
                                                       tag_of(ck.meta));
  std::ostringstream csv;
  csv << "# schema=" << kGradientSchema << "\npair,rho_same_image_cross_size,rho_diff_image_same_size\n";
  csv.precision(10);
  for (std::size_t i = 0; i < r.rho_same_per_pair.size(); ++i) {
    csv << i << ',' << r.rho_same_per_pair[i] << ',' << r.rho_diff_per_pair[i] << '\n';
  }
  csv << "# mean," << r.rho_same_image_cross_size << ',' << r.rho_diff_image_same_size << '\n';
  for (const auto& [s, v] : r.var_per_size) csv << "# var," << s << ',' << v << '\n';
  if (f.out.empty()) {
    std::cout << csv.str();
    print_summary(std::cerr, r);
  } else {
    const fs::path tmp = f.out + ".tmp";
    std::ofstream(tmp) << csv.str();
    fs::rename(tmp, f.out);
    print_summary(std::cout, r);
  }
  return kOk;
}

int cmd_analyze(const AnalyzeFlags& f) {
  const auto cfg = config_from_checkpoint(peek_metadata(f.checkpoint), f.common);
  return with_precision(cfg, [&](auto tag) { return run_analyze<decltype(tag)>(f, cfg); });
}

}  // namespace

int main(int argc, char** argv) {
  tune_allocator();
  CLI::App app{"Mixed-size CNN training and evaluation"};
  app.require_subcommand(1);

  TrainFlags tf;
  auto* train_cmd = app.add_subcommand("train", "Train a ResNet under a size regime");
  train_cmd->add_option("--config", tf.common.config_file, "Config file")->check(CLI::ExistingFile);
  tf.common.add_to(*train_cmd);
  train_cmd->add_option("--out", tf.out, "Output directory");
  train_cmd->add_option("--epochs", tf.epochs, "Epoch budget");
  train_cmd->add_option("--seed", tf.seed, "Run seed");
  train_cmd->add_flag("--print-config", tf.print_config, "Print the effective config and exit");

  SweepFlags sf;
  auto* sweep_cmd = app.add_subcommand("eval-sweep", "Top-1 and flops per evaluation size");
  sweep_cmd->add_option("checkpoint", sf.checkpoint, "Checkpoint file")->required();
  sf.common.add_to(*sweep_cmd);
  sweep_cmd->add_option("--sizes", sf.sizes, "Evaluation sizes (default 16,24,32,40)")->delimiter(',');
  sweep_cmd->add_flag("--imagenet-sizes", sf.imagenet_sizes, "Use S = 224 + 32m, m = -6..6");
  sweep_cmd->add_flag("--no-calibrate", sf.no_calibrate, "Keep the stored batch-norm statistics");
  sweep_cmd->add_option("--batches", sf.batches, "Calibration batches per size");
  sweep_cmd->add_option("--preprocess", sf.preprocess, "resize or crop")->check(CLI::IsMember({"resize", "crop"}));
  sweep_cmd->add_option("--seed", sf.seed, "Calibration stream seed");
  sweep_cmd->add_option("-o,--out", sf.out, "CSV file (default stdout)");

  CalibFlags cf;
  auto* calib_cmd = app.add_subcommand("calibrate", "Re-estimate batch-norm statistics at one size");
  calib_cmd->add_option("checkpoint", cf.checkpoint, "Checkpoint file")->required();
  cf.common.add_to(*calib_cmd);
  calib_cmd->add_option("--size", cf.size, "Input size")->required();
  calib_cmd->add_option("--batches", cf.batches, "Calibration batches (default 200)");
  calib_cmd->add_option("--seed", cf.seed, "Calibration stream seed");
  calib_cmd->add_option("-o,--out", cf.out, "Output checkpoint (default <stem>_calib<S>.ckpt)");

  AnalyzeFlags af;
  auto* analyze_cmd = app.add_subcommand("analyze-gradients", "Gradient correlation across sizes and images");
  analyze_cmd->add_option("checkpoint", af.checkpoint, "Checkpoint file")->required();
  af.common.add_to(*analyze_cmd);
  analyze_cmd->add_option("--sizes", af.sizes, "Size pair (default 32,24)")->delimiter(',')->expected(2);
  analyze_cmd->add_option("--pairs", af.pairs, "Number of image pairs");
  analyze_cmd->add_option("--seed", af.seed, "Pair sampling seed");
  analyze_cmd->add_option("-o,--out", af.out, "CSV file (default stdout, summary on stderr)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kOk : kConfig;
  }

  try {
    if (*train_cmd) return cmd_train(tf);
    if (*sweep_cmd) return cmd_sweep(sf);
    if (*calib_cmd) return cmd_calibrate(cf);
    if (*analyze_cmd) return cmd_analyze(af);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kConfig;
  } catch (const DomainError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kConfig;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << '\n';
    return kData;
  } catch (const NumericError& e) {
    std::cerr << "numeric error: " << e.what() << '\n';
    return kNumeric;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kOther;
  }
  return kOther;
}
