#include <gtest/gtest.h>

#include <map>

#include "mixsize/calib.hpp"
#include "mixsize/data.hpp"
#include "mixsize/train.hpp"
#include "support.hpp"

using namespace mixsize;
using testing_support::random_tensor;

namespace {

// Every value each BN layer saw, per channel, in arrival order.
struct Recorder {
  std::map<std::string, std::vector<std::vector<double>>> seen;

  void attach(ResNet<double>& m) {
    for (const auto& bn : m.bn_layers()) {
      auto& slot = seen[bn->name];
      slot.assign(static_cast<std::size_t>(bn->stats.channels()), {});
      bn->on_input = [&slot](const Tensor<double>& x) {
        const std::int64_t N = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
        for (std::int64_t n = 0; n < N; ++n)
          for (std::int64_t c = 0; c < C; ++c)
            for (std::int64_t i = 0; i < HW; ++i) slot[c].push_back(x[(n * C + c) * HW + i]);
      };
    }
  }
};

std::pair<double, double> mean_var(const std::vector<double>& v) {
  long double s = 0;
  for (double x : v) s += x;
  const long double m = s / v.size();
  long double q = 0;
  for (double x : v) q += (x - m) * (x - m);
  return {static_cast<double>(m), static_cast<double>(q / v.size())};
}

std::function<Tensor<double>()> random_stream(int size, std::uint64_t seed) {
  auto counter = std::make_shared<std::uint64_t>(seed);
  return [size, counter] { return random_tensor(Shape{3, 3, size, size}, (*counter)++, 1.5); };
}

ResNet<double> trained_like_model() {
  ResNet<double> m(ResNetConfig{8, 4, 10, 3}, 5);
  for (auto& bn : m.bn_layers()) std::fill(bn->gamma.data().begin(), bn->gamma.data().end(), 0.8);
  m.forward(random_tensor(Shape{4, 3, 16, 16}, 1), BnMode::train);
  return m;
}

}  // namespace

TEST(Calibrate, MatchesConcatenateAndComputeOracle) {
  auto m = trained_like_model();
  const auto weights = parameter_checksum(m);
  Recorder rec;
  rec.attach(m);
  calib::calibrate<double>(m, random_stream(12, 100), 12, 5);
  EXPECT_EQ(parameter_checksum(m), weights);
  for (const auto& bn : m.bn_layers()) {
    const auto& per_channel = rec.seen.at(bn->name);
    for (std::size_t c = 0; c < per_channel.size(); ++c) {
      const auto [mean, var] = mean_var(per_channel[c]);
      EXPECT_NEAR(bn->stats.mean[c], mean, 1e-6 * std::max(1.0, std::abs(mean))) << bn->name << " c" << c;
      EXPECT_NEAR(bn->stats.var[c], var, 1e-6 * var) << bn->name << " c" << c;
      EXPECT_EQ(bn->stats.count[c], static_cast<double>(per_channel[c].size()));
    }
  }
}

TEST(Calibrate, SingleBatchIsThatBatchsStatistics) {
  auto m = trained_like_model();
  const auto batch = random_tensor(Shape{4, 3, 16, 16}, 77);
  // Train mode on the same batch normalizes with exactly these statistics.
  auto reference = m.clone();
  calib::reset_bn(reference);
  reference.forward(batch, BnMode::train);  // first EMA update copies batch stats
  calib::calibrate<double>(m, [&] { return batch; }, 16, 1);
  for (std::size_t l = 0; l < m.bn_layers().size(); ++l) {
    const auto& a = m.bn_layers()[l]->stats;
    const auto& b = reference.bn_layers()[l]->stats;
    for (std::int64_t c = 0; c < a.channels(); ++c) {
      EXPECT_NEAR(a.mean[c], b.mean[c], 1e-12);
      EXPECT_NEAR(a.var[c], b.var[c], 1e-12 * std::max(1.0, b.var[c]));
    }
  }
}

TEST(Calibrate, LeavesWeightsAndGradsAlone) {
  auto m = trained_like_model();
  const auto before = parameter_checksum(m);
  {
    Tape<double> tape;  // an active tape must not record calibration passes
    calib::calibrate<double>(m, random_stream(8, 1), 8, 3);
    EXPECT_EQ(tape.size(), 0u);
  }
  EXPECT_EQ(parameter_checksum(m), before);
  for (const auto& p : m.parameters()) EXPECT_FALSE(p.tensor.has_grad()) << p.name;
}

TEST(Calibrate, OverwritesPreviousStatistics) {
  auto a = trained_like_model();
  auto b = a.clone();
  calib::calibrate<double>(a, random_stream(16, 300), 16, 2);
  calib::reset_bn(b);
  calib::calibrate<double>(b, random_stream(16, 300), 16, 2);
  EXPECT_EQ(parameter_checksum(a, true), parameter_checksum(b, true));
}

TEST(Calibrate, Errors) {
  auto m = trained_like_model();
  EXPECT_THROW(calib::calibrate<double>(m, random_stream(16, 1), 16, 0), ConfigError);
  EXPECT_THROW(calib::calibrate<double>(m, random_stream(7, 1), 7, 1), SizeError);
  EXPECT_THROW(calib::calibrate<double>(m, random_stream(12, 1), 16, 1), DimensionError);
  EXPECT_EQ(calib::kDefaultBatches, 200);
}

TEST(ResetBn, EvalNeedsRecalibrationAndWeightsUntouched) {
  auto m = trained_like_model();
  const auto x = random_tensor(Shape{2, 3, 16, 16}, 3);
  EXPECT_NO_THROW(m.forward(x, BnMode::eval));
  const auto before = parameter_checksum(m);
  calib::reset_bn(m);
  EXPECT_EQ(parameter_checksum(m), before);
  EXPECT_THROW(m.forward(x, BnMode::eval), CalibrationRequired);
  calib::calibrate<double>(m, random_stream(16, 9), 16, 2);
  EXPECT_NO_THROW(m.forward(x, BnMode::eval));
}

TEST(Calibrate, DataPipelineStreamOnSyntheticImages) {
  auto ds = data::synth_dataset(64, 10, 3);
  ds.norm = data::compute_normalization(ds);
  auto m = trained_like_model();
  data::AugmentConfig aug;
  for (int s : {16, 24}) {
    auto stream = data::batch_stream<double>(ds, s, 8, aug, 11);
    calib::calibrate<double>(m, stream, s, 3);
    EXPECT_EQ(m.bn_layers()[0]->stats.count[0], 3.0 * 8 * s * s);
  }
}
