#include <gtest/gtest.h>

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <sys/wait.h>

#include "mixsize/checkpoint.hpp"
#include "mixsize/config.hpp"
#include "mixsize/train.hpp"
#include "support.hpp"

using namespace mixsize;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  TempDir() {
    path = fs::temp_directory_path() /
           (std::string("mixsize_cli_") + ::testing::UnitTest::GetInstance()->current_test_info()->name());
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

struct Run {
  int code;
  std::string out;
};

Run run_cli(const std::string& args) {
  const std::string cmd = std::string(MIXSIZE_CLI_PATH) + " " + args + " 2>&1";
  FILE* pipe = popen(cmd.c_str(), "r");
  std::string out;
  char buf[4096];
  while (std::size_t n = std::fread(buf, 1, sizeof buf, pipe)) out.append(buf, n);
  const int status = pclose(pipe);
  return {WIFEXITED(status) ? WEXITSTATUS(status) : -1, out};
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

const std::string kTiny =
    "--synthetic --set data.synthetic_n=120 --set data.synthetic_test_n=40 --set model.width=4 --epochs 2";

}  // namespace

// ---- config ----

TEST(Config, DefaultsAreTheBaseline) {
  RunConfig cfg;
  const auto opt = make_train_options(cfg);
  EXPECT_EQ(opt.regime.entries.size(), 1u);
  EXPECT_EQ(opt.regime.entries[0].size, 32);
  EXPECT_EQ(opt.regime.mode, sched::RegimeMode::fixed);
  EXPECT_EQ(opt.regime.base_batch, 64);
  EXPECT_DOUBLE_EQ(opt.sgd.lr, 0.1);
  EXPECT_FALSE(opt.sgd.smoothing);
}

TEST(Config, ParsesSectionsCommentsAndDottedKeys) {
  RunConfig cfg;
  parse_config(cfg,
               "# comment\n"
               "run.epochs = 12\n"
               "[regime]\n"
               "preset = cifar28   # trailing\n"
               "mode = B+\n"
               "\n"
               "[optim]\n"
               "alpha = 0.95\n"
               "milestones = 3, 6\n",
               "test.cfg");
  EXPECT_EQ(cfg.run.epochs, 12);
  EXPECT_EQ(cfg.regime.preset, "cifar28");
  EXPECT_EQ(cfg.regime.mode, sched::RegimeMode::b_plus);
  EXPECT_DOUBLE_EQ(cfg.optim.alpha, 0.95);
  EXPECT_EQ(cfg.optim.milestones, (std::vector<int>{3, 6}));
  const auto opt = make_train_options(cfg);
  EXPECT_TRUE(opt.sgd.smoothing);  // automatic: on in B+
  EXPECT_DOUBLE_EQ(effective_base_lr(opt), 0.1 * 112.8 / 64);
}

TEST(Config, ErrorsCarryOriginAndLine) {
  RunConfig cfg;
  try {
    parse_config(cfg, "run.epochs = 3\nrun.epochz = 4\n", "bad.cfg");
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("bad.cfg:2"), std::string::npos) << e.what();
  }
  EXPECT_THROW(parse_config(cfg, "run.epochs = three\n"), ConfigError);
  EXPECT_THROW(parse_config(cfg, "just words\n"), ConfigError);
  EXPECT_THROW(apply_override(cfg, "run.epochs"), ConfigError);
  EXPECT_THROW(apply_override(cfg, "optim.smoothing=maybe"), ConfigError);
}

TEST(Config, FormatRoundTrips) {
  RunConfig cfg;
  apply_override(cfg, "regime.sizes=40:0.2,32:0.3,24:0.3,16:0.2");
  apply_override(cfg, "optim.lr=0.05");
  apply_override(cfg, "run.precision=f64");
  apply_override(cfg, "data.flip_prob=0.25");
  const auto text = format_config(cfg);
  RunConfig again;
  parse_config(again, text);
  EXPECT_EQ(format_config(again), text);
  EXPECT_EQ(again.regime.sizes.size(), 4u);
  EXPECT_EQ(again.run.precision, Precision::f64);
}

TEST(Config, CrossFieldValidation) {
  RunConfig cfg;
  apply_override(cfg, "regime.sizes=32:0.5,16:0.4");
  EXPECT_THROW(make_train_options(cfg), ConfigError);
  RunConfig depth;
  apply_override(depth, "model.depth=10");
  EXPECT_THROW(make_train_options(depth), ConfigError);
  RunConfig classes;
  apply_override(classes, "data.synthetic=true");
  apply_override(classes, "model.classes=12");
  EXPECT_THROW(load_data(classes), ConfigError);
}

TEST(Config, SyntheticSplitsAreDisjointAndShareNormalization) {
  RunConfig cfg;
  apply_override(cfg, "data.synthetic=true");
  apply_override(cfg, "data.synthetic_n=50");
  apply_override(cfg, "data.synthetic_test_n=20");
  apply_override(cfg, "data.subset=30");
  const auto tt = load_data(cfg);
  EXPECT_EQ(tt.train.size(), 30);
  EXPECT_EQ(tt.test.size(), 20);
  EXPECT_EQ(tt.train.norm.mean, tt.test.norm.mean);
  EXPECT_EQ(tt.train.norm.mean, data::compute_normalization(data::synth_dataset(50, 10, 0)).mean);
  EXPECT_FALSE(std::equal(tt.test.pixels.begin(), tt.test.pixels.begin() + 3072, tt.train.pixels.begin()));
}

// ---- checkpoints ----

TEST(Checkpoint, RoundTripPreservesEverything) {
  TempDir tmp;
  ResNet<double> m(ResNetConfig{8, 4, 10, 3}, 9);
  m.forward(testing_support::random_tensor(Shape{2, 3, 16, 16}, 1), BnMode::train);
  data::Normalization norm{{0.1, 0.2, 0.3}, {0.4, 0.5, 0.6}};
  save_checkpoint(tmp.path / "m.ckpt", m, norm, {{"tag", "final"}, {"config", "a = b\n"}});
  EXPECT_FALSE(fs::exists(tmp.path / "m.ckpt.tmp"));
  const auto ck = load_checkpoint<double>(tmp.path / "m.ckpt");
  EXPECT_EQ(parameter_checksum(ck.model, true), parameter_checksum(m, true));
  EXPECT_EQ(ck.norm.std, norm.std);
  EXPECT_EQ(ck.meta.at("config"), "a = b\n");
  EXPECT_EQ(ck.model.config().base_width, 4);
}

TEST(Checkpoint, CrossPrecisionLoad) {
  TempDir tmp;
  ResNet<float> m(ResNetConfig{8, 4, 10, 3}, 9);
  save_checkpoint(tmp.path / "f.ckpt", m, {}, {});
  const auto ck = load_checkpoint<double>(tmp.path / "f.ckpt");
  EXPECT_EQ(ck.model.parameters()[0].tensor[3], static_cast<double>(m.parameters()[0].tensor[3]));
  EXPECT_FALSE(ck.model.bn_layers()[0]->stats.initialized);
}

TEST(Checkpoint, CorruptFilesAreDataErrors) {
  TempDir tmp;
  std::ofstream(tmp.path / "junk.ckpt") << "not a checkpoint at all";
  EXPECT_THROW(load_checkpoint<float>(tmp.path / "junk.ckpt"), DataError);
  ResNet<float> m(ResNetConfig{8, 4, 10, 3}, 9);
  save_checkpoint(tmp.path / "t.ckpt", m, {}, {});
  fs::resize_file(tmp.path / "t.ckpt", fs::file_size(tmp.path / "t.ckpt") - 10);
  try {
    load_checkpoint<float>(tmp.path / "t.ckpt");
    FAIL();
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find("truncated checkpoint at byte"), std::string::npos) << e.what();
  }
  EXPECT_THROW(load_checkpoint<float>(tmp.path / "missing.ckpt"), DataError);
}

TEST(Checkpoint, CalibratedName) {
  EXPECT_EQ(calibrated_path("runs/a/final.ckpt", 24), fs::path("runs/a/final_calib24.ckpt"));
  EXPECT_EQ(calibrated_path("x.ckpt", 160), fs::path("x_calib160.ckpt"));
}

// ---- the executable ----

TEST(Cli, TrainWritesMetricsAndCheckpoints) {
  TempDir tmp;
  const auto r = run_cli("train " + kTiny + " --out " + (tmp.path / "run").string());
  ASSERT_EQ(r.code, 0) << r.out;
  for (const char* f : {"config.txt", "steps.csv", "epochs.csv", "init.ckpt", "epoch_000.ckpt", "epoch_001.ckpt",
                        "final.ckpt"}) {
    EXPECT_TRUE(fs::exists(tmp.path / "run" / f)) << f;
  }
  const auto steps = slurp(tmp.path / "run" / "steps.csv");
  EXPECT_EQ(steps.rfind("# schema=mixsize.train-steps.v1\nstep,epoch,size,batch,duplicates,lr,", 0), 0u);
  // 120 images at batch 64: two steps per epoch.
  EXPECT_EQ(std::count(steps.begin(), steps.end(), '\n'), 2 + 4);
  const auto ck = load_checkpoint<float>(tmp.path / "run" / "final.ckpt");
  EXPECT_EQ(ck.meta.at("tag"), "final");
}

TEST(Cli, SameSeedSameChecksumInDoublePrecision) {
  TempDir tmp;
  const auto args = "train " + kTiny + " --precision f64 --set regime.preset=cifar28 --set regime.mode=D+ --out ";
  const auto a = run_cli(args + (tmp.path / "a").string());
  const auto b = run_cli(args + (tmp.path / "b").string());
  ASSERT_EQ(a.code, 0) << a.out;
  ASSERT_EQ(b.code, 0) << b.out;
  const auto ca = load_checkpoint<double>(tmp.path / "a" / "final.ckpt");
  const auto cb = load_checkpoint<double>(tmp.path / "b" / "final.ckpt");
  EXPECT_EQ(parameter_checksum(ca.model, true), parameter_checksum(cb.model, true));
}

TEST(Cli, EvalSweepCalibrateAndAnalyze) {
  TempDir tmp;
  ASSERT_EQ(run_cli("train " + kTiny + " --out " + (tmp.path / "run").string()).code, 0);
  const auto final_ckpt = (tmp.path / "run" / "final.ckpt").string();

  const auto sweep = run_cli("eval-sweep " + final_ckpt + " --batches 2 -o " + (tmp.path / "sweep.csv").string());
  ASSERT_EQ(sweep.code, 0) << sweep.out;
  const auto csv = slurp(tmp.path / "sweep.csv");
  EXPECT_NE(csv.find("size,top1,flops,calibrated\n16,"), std::string::npos) << csv;
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 2 + 4);

  const auto cal = run_cli("calibrate " + final_ckpt + " --size 24 --batches 2");
  ASSERT_EQ(cal.code, 0) << cal.out;
  const auto calibrated = load_checkpoint<float>(tmp.path / "run" / "final_calib24.ckpt");
  const auto original = load_checkpoint<float>(final_ckpt);
  EXPECT_EQ(parameter_checksum(calibrated.model), parameter_checksum(original.model));
  EXPECT_NE(parameter_checksum(calibrated.model, true), parameter_checksum(original.model, true));
  EXPECT_EQ(calibrated.meta.at("calibrated_size"), "24");

  const auto g1 = run_cli("analyze-gradients " + (tmp.path / "run" / "init.ckpt").string() + " --pairs 3 --seed 4 -o " +
                          (tmp.path / "g1.csv").string());
  const auto g2 = run_cli("analyze-gradients " + (tmp.path / "run" / "init.ckpt").string() + " --pairs 3 --seed 4 -o " +
                          (tmp.path / "g2.csv").string());
  ASSERT_EQ(g1.code, 0) << g1.out;
  EXPECT_NE(g1.out.find("rho(x^32, x^24)"), std::string::npos) << g1.out;
  EXPECT_NE(g1.out.find("V(x^24)"), std::string::npos);
  EXPECT_EQ(slurp(tmp.path / "g1.csv"), slurp(tmp.path / "g2.csv"));
}

TEST(Cli, FailuresMapToExitCodes) {
  TempDir tmp;
  const auto missing = run_cli("eval-sweep " + (tmp.path / "nope.ckpt").string() + " -o " + (tmp.path / "s.csv").string());
  EXPECT_EQ(missing.code, 3) << missing.out;
  EXPECT_FALSE(fs::exists(tmp.path / "s.csv"));
  EXPECT_FALSE(fs::exists(tmp.path / "s.csv.tmp"));
  EXPECT_EQ(run_cli("train --set run.epochz=3").code, 2);
  EXPECT_EQ(run_cli("train --set regime.sizes=32:0.5").code, 2);
  EXPECT_EQ(run_cli("train --data " + (tmp.path / "empty").string() + " --out " + (tmp.path / "r").string()).code, 3);
  EXPECT_EQ(run_cli("frobnicate").code, 2);
  EXPECT_EQ(run_cli("--help").code, 0);
}

TEST(Cli, PrintConfigShowsOverrides) {
  const auto r = run_cli("train --set optim.alpha=0.9 --epochs 7 --print-config");
  ASSERT_EQ(r.code, 0) << r.out;
  EXPECT_NE(r.out.find("optim.alpha = 0.9\n"), std::string::npos) << r.out;
  EXPECT_NE(r.out.find("run.epochs = 7\n"), std::string::npos);
}
