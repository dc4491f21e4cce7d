#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numbers>

#include "mixsize/bn_stats.hpp"
#include "mixsize/ops.hpp"
#include "support.hpp"

using namespace mixsize;
using testing_support::gradcheck;
using testing_support::project;
using testing_support::random_tensor;

namespace {

constexpr double kGradTol = 1e-6;

// Straight scalar transcription of the pixel-center rule for one output pixel.
double resize_pixel(const Tensor<double>& x, std::int64_t H, std::int64_t W, std::int64_t oh, std::int64_t ow,
                    std::int64_t i, std::int64_t j) {
  double sy = (i + 0.5) * (static_cast<double>(H) / oh) - 0.5;
  double sx = (j + 0.5) * (static_cast<double>(W) / ow) - 0.5;
  sy = std::min(std::max(sy, 0.0), H - 1.0);
  sx = std::min(std::max(sx, 0.0), W - 1.0);
  const auto y0 = static_cast<std::int64_t>(std::floor(sy));
  const auto x0 = static_cast<std::int64_t>(std::floor(sx));
  const auto y1 = std::min(y0 + 1, H - 1);
  const auto x1 = std::min(x0 + 1, W - 1);
  const double fy = sy - y0, fx = sx - x0;
  auto v = [&](std::int64_t y, std::int64_t xx) { return x[y * W + xx]; };
  return (1 - fy) * ((1 - fx) * v(y0, x0) + fx * v(y0, x1)) + fy * ((1 - fx) * v(y1, x0) + fx * v(y1, x1));
}

}  // namespace

// conv2d

TEST(Conv2d, IdentityKernel) {
  auto x = random_tensor(Shape{1, 1, 4, 4}, 1);
  Tensor<double> w(Shape{1, 1, 1, 1}, 1.0);
  auto y = ops::conv2d<double>(x, w, std::nullopt, 1, 0);
  ASSERT_EQ(y.shape(), x.shape());
  for (std::int64_t i = 0; i < x.size(); ++i) EXPECT_EQ(y[i], x[i]);
}

TEST(Conv2d, OnesKernelCountsOverlap) {
  Tensor<double> x(Shape{1, 1, 5, 5}, 1.0);
  Tensor<double> w(Shape{1, 1, 3, 3}, 1.0);
  auto y = ops::conv2d<double>(x, w, std::nullopt, 1, 1);
  ASSERT_EQ(y.shape(), (Shape{1, 1, 5, 5}));
  EXPECT_EQ(y.at(0, 0, 2, 2), 9.0);
  EXPECT_EQ(y.at(0, 0, 0, 0), 4.0);
  EXPECT_EQ(y.at(0, 0, 4, 4), 4.0);
  EXPECT_EQ(y.at(0, 0, 0, 2), 6.0);
}

TEST(Conv2d, OutputExtentFloorFormula) {
  auto x = random_tensor(Shape{2, 3, 7, 9}, 2);
  auto w = random_tensor(Shape{4, 3, 3, 3}, 3);
  auto y = ops::conv2d<double>(x, w, std::nullopt, 2, 1);
  EXPECT_EQ(y.shape(), (Shape{2, 4, 4, 5}));
}

TEST(Conv2d, ChannelMismatchIsDimensionError) {
  auto x = random_tensor(Shape{1, 2, 5, 5}, 4);
  auto w = random_tensor(Shape{3, 3, 3, 3}, 5);
  EXPECT_THROW(ops::conv2d<double>(x, w, std::nullopt, 1, 1), DimensionError);
}

TEST(Conv2d, MatchesDirectLoop) {
  auto x = random_tensor(Shape{2, 2, 6, 5}, 6);
  auto w = random_tensor(Shape{3, 2, 3, 3}, 7);
  auto b = random_tensor(Shape{3}, 8);
  auto y = ops::conv2d<double>(x, w, b, 2, 1);
  for (std::int64_t n = 0; n < 2; ++n)
    for (std::int64_t co = 0; co < 3; ++co)
      for (std::int64_t oy = 0; oy < y.dim(2); ++oy)
        for (std::int64_t ox = 0; ox < y.dim(3); ++ox) {
          double acc = b[co];
          for (std::int64_t ci = 0; ci < 2; ++ci)
            for (std::int64_t ky = 0; ky < 3; ++ky)
              for (std::int64_t kx = 0; kx < 3; ++kx) {
                const std::int64_t iy = oy * 2 - 1 + ky, ix = ox * 2 - 1 + kx;
                if (iy < 0 || iy >= 6 || ix < 0 || ix >= 5) continue;
                acc += x.at(n, ci, iy, ix) * w.at(co, ci, ky, kx);
              }
          EXPECT_NEAR(y.at(n, co, oy, ox), acc, 1e-12);
        }
}

TEST(Conv2d, GradientMatchesFiniteDifferences) {
  auto x = random_tensor(Shape{1, 2, 6, 6}, 9);
  auto w = random_tensor(Shape{3, 2, 3, 3}, 10);
  auto b = random_tensor(Shape{3}, 11);
  auto r = gradcheck([&] { return project(ops::conv2d<double>(x, w, b, 1, 1), 12); }, {x, w, b});
  EXPECT_LE(r.rel_error, kGradTol);
}

TEST(Conv2d, StridedGradientMatchesFiniteDifferences) {
  auto x = random_tensor(Shape{2, 2, 7, 7}, 13);
  auto w = random_tensor(Shape{2, 2, 3, 3}, 14);
  auto r = gradcheck([&] { return project(ops::conv2d<double>(x, w, std::nullopt, 2, 1), 15); }, {x, w});
  EXPECT_LE(r.rel_error, kGradTol);
}

TEST(Conv2d, SpatialScalingLaw) {
  auto w = random_tensor(Shape{2, 3, 3, 3}, 16);
  for (std::int64_t g : {1, 2, 3}) {
    auto x = random_tensor(Shape{1, 3, 5 * g, 4 * g}, 17);
    auto y = ops::conv2d<double>(x, w, std::nullopt, 1, 1);
    EXPECT_EQ(y.dim(2), 5 * g);
    EXPECT_EQ(y.dim(3), 4 * g);
    auto p = ops::max_pool2d(random_tensor(Shape{1, 1, 4 * g, 6 * g}, 18), 2, 2);
    EXPECT_EQ(p.dim(2), 2 * g);
    EXPECT_EQ(p.dim(3), 3 * g);
  }
}

// batchnorm2d

TEST(BatchNorm, StandardizedInputIsFixedPoint) {
  auto x = random_tensor(Shape{4, 2, 5, 5}, 20);
  // Standardize each channel exactly (population variance).
  for (std::int64_t c = 0; c < 2; ++c) {
    double s = 0, s2 = 0;
    for (std::int64_t n = 0; n < 4; ++n)
      for (std::int64_t i = 0; i < 25; ++i) s += x[(n * 2 + c) * 25 + i];
    const double m = s / 100;
    for (std::int64_t n = 0; n < 4; ++n)
      for (std::int64_t i = 0; i < 25; ++i) s2 += std::pow(x[(n * 2 + c) * 25 + i] - m, 2);
    const double sd = std::sqrt(s2 / 100);
    for (std::int64_t n = 0; n < 4; ++n)
      for (std::int64_t i = 0; i < 25; ++i) x[(n * 2 + c) * 25 + i] = (x[(n * 2 + c) * 25 + i] - m) / sd;
  }
  Tensor<double> gamma(Shape{2}, 1.0), beta(Shape{2}, 0.0);
  BNStats<double> stats(2);
  auto y = ops::batchnorm2d(x, gamma, beta, stats, ops::BnMode::train);
  const double k = 1.0 / std::sqrt(1.0 + 1e-5);
  for (std::int64_t i = 0; i < x.size(); ++i) EXPECT_NEAR(y[i], x[i] * k, 1e-12);
  EXPECT_NEAR(y[0], x[0], 1e-5 * std::abs(x[0]) + 1e-12);
}

TEST(BatchNorm, ZeroGammaGivesBeta) {
  auto x = random_tensor(Shape{3, 2, 4, 4}, 21);
  Tensor<double> gamma(Shape{2}, 0.0), beta(Shape{2}, std::vector<double>{0.25, -1.5});
  BNStats<double> stats(2);
  auto y = ops::batchnorm2d(x, gamma, beta, stats, ops::BnMode::train);
  for (std::int64_t n = 0; n < 3; ++n)
    for (std::int64_t c = 0; c < 2; ++c)
      for (std::int64_t i = 0; i < 16; ++i) EXPECT_EQ(y[(n * 2 + c) * 16 + i], beta[c]);
}

TEST(BatchNorm, TrainGradientMatchesFiniteDifferences) {
  auto x = random_tensor(Shape{4, 3, 8, 8}, 22);
  auto gamma = random_tensor(Shape{3}, 23);
  auto beta = random_tensor(Shape{3}, 24);
  BNStats<double> stats(3);
  auto r = gradcheck([&] { return project(ops::batchnorm2d(x, gamma, beta, stats, ops::BnMode::train), 25); },
                     {x, gamma, beta});
  EXPECT_LE(r.rel_error, kGradTol);
}

TEST(BatchNorm, EvalGradientMatchesFiniteDifferences) {
  auto x = random_tensor(Shape{2, 3, 4, 4}, 26);
  auto gamma = random_tensor(Shape{3}, 27);
  auto beta = random_tensor(Shape{3}, 28);
  BNStats<double> stats(3);
  ops::batchnorm2d(random_tensor(Shape{4, 3, 4, 4}, 29), gamma, beta, stats, ops::BnMode::train);
  auto r = gradcheck([&] { return project(ops::batchnorm2d(x, gamma, beta, stats, ops::BnMode::eval), 30); },
                     {x, gamma, beta});
  EXPECT_LE(r.rel_error, kGradTol);
}

TEST(BatchNorm, EmaUpdateAndEvalUseRunningStats) {
  Tensor<double> gamma(Shape{1}, 1.0), beta(Shape{1}, 0.0);
  BNStats<double> stats(1);
  Tensor<double> a(Shape{2, 1, 1, 1}, std::vector<double>{1.0, 3.0});  // mean 2, var 1
  Tensor<double> b(Shape{2, 1, 1, 1}, std::vector<double>{4.0, 8.0});  // mean 6, var 4
  ops::batchnorm2d(a, gamma, beta, stats, ops::BnMode::train);
  EXPECT_DOUBLE_EQ(stats.mean[0], 2.0);
  EXPECT_DOUBLE_EQ(stats.var[0], 1.0);
  ops::batchnorm2d(b, gamma, beta, stats, ops::BnMode::train);
  EXPECT_DOUBLE_EQ(stats.mean[0], 0.9 * 2.0 + 0.1 * 6.0);
  EXPECT_DOUBLE_EQ(stats.var[0], 0.9 * 1.0 + 0.1 * 4.0);
  auto y = ops::batchnorm2d(Tensor<double>(Shape{1, 1, 1, 1}, 5.0), gamma, beta, stats, ops::BnMode::eval);
  EXPECT_NEAR(y[0], (5.0 - 2.4) / std::sqrt(1.3 + 1e-5), 1e-12);
}

TEST(BatchNorm, EvalWithoutStatsNeedsCalibration) {
  Tensor<double> gamma(Shape{2}, 1.0), beta(Shape{2}, 0.0);
  BNStats<double> stats(2);
  EXPECT_THROW(ops::batchnorm2d(random_tensor(Shape{2, 2, 3, 3}, 31), gamma, beta, stats, ops::BnMode::eval),
               CalibrationRequired);
}

TEST(BatchNorm, SingleValuePerChannelRejectedInTrainMode) {
  Tensor<double> gamma(Shape{2}, 1.0), beta(Shape{2}, 0.0);
  BNStats<double> stats(2);
  EXPECT_THROW(ops::batchnorm2d(random_tensor(Shape{1, 2, 1, 1}, 32), gamma, beta, stats, ops::BnMode::train),
               DomainError);
}

// bilinear_resize

TEST(Resize, SameSizeIsExactIdentity) {
  auto x = random_tensor(Shape{2, 3, 7, 7}, 40);
  auto y = ops::bilinear_resize(x, 7);
  for (std::int64_t i = 0; i < x.size(); ++i) EXPECT_EQ(y[i], x[i]);
}

TEST(Resize, ConstantStaysConstant) {
  Tensor<double> x(Shape{1, 2, 6, 6}, 0.375);
  for (int s : {1, 3, 5, 6, 11, 24}) {
    auto y = ops::bilinear_resize(x, s);
    ASSERT_EQ(y.shape(), (Shape{1, 2, s, s}));
    for (double v : y.data()) EXPECT_NEAR(v, 0.375, 1e-15);
  }
}

TEST(Resize, KnownFourByFourToTwo) {
  Tensor<double> x(Shape{1, 1, 4, 4});
  for (std::int64_t i = 0; i < 16; ++i) x[i] = static_cast<double>(i);
  auto y = ops::bilinear_resize(x, 2);
  // Source coordinate 0.5 and 2.5 on both axes: averages of 2x2 blocks.
  EXPECT_DOUBLE_EQ(y[0], (0 + 1 + 4 + 5) / 4.0);
  EXPECT_DOUBLE_EQ(y[1], (2 + 3 + 6 + 7) / 4.0);
  EXPECT_DOUBLE_EQ(y[2], (8 + 9 + 12 + 13) / 4.0);
  EXPECT_DOUBLE_EQ(y[3], (10 + 11 + 14 + 15) / 4.0);
}

TEST(Resize, MatchesScalarOracleUpAndDown) {
  auto x = random_tensor(Shape{1, 1, 5, 7}, 41);
  for (auto [oh, ow] : {std::pair{2, 3}, {3, 3}, {8, 11}, {16, 16}, {1, 1}}) {
    auto y = ops::bilinear_resize(x, oh, ow);
    for (std::int64_t i = 0; i < oh; ++i)
      for (std::int64_t j = 0; j < ow; ++j) EXPECT_NEAR(y[i * ow + j], resize_pixel(x, 5, 7, oh, ow, i, j), 1e-14);
  }
}

TEST(Resize, GradientMatchesFiniteDifferences) {
  auto x = random_tensor(Shape{2, 2, 6, 5}, 42);
  for (int s : {3, 4, 9}) {
    auto r = gradcheck([&] { return project(ops::bilinear_resize(x, s), 43); }, {x});
    EXPECT_LE(r.rel_error, kGradTol) << "size " << s;
  }
}

TEST(Resize, NonPositiveSizeIsDomainError) {
  auto x = random_tensor(Shape{1, 1, 4, 4}, 44);
  EXPECT_THROW(ops::bilinear_resize(x, 0), DomainError);
  EXPECT_THROW(ops::bilinear_resize(x, -3), DomainError);
}

// softmax_cross_entropy

TEST(CrossEntropy, UniformLogitsGiveLogK) {
  Tensor<double> logits(Shape{3, 10}, 0.7);
  std::vector<int> y{0, 4, 9};
  EXPECT_NEAR(ops::softmax_cross_entropy(logits, std::span<const int>(y)).item(), std::log(10.0), 1e-12);
  EXPECT_NEAR(std::log(10.0), 2.302585, 1e-6);
}

TEST(CrossEntropy, MonotoneInMarginAndVanishes) {
  std::vector<int> y{2};
  auto loss_at = [&](double margin) {
    Tensor<double> logits(Shape{1, 5}, 0.0);
    logits[2] = margin;
    return ops::softmax_cross_entropy(logits, std::span<const int>(y)).item();
  };
  double prev = std::numeric_limits<double>::infinity();
  for (double margin : {0.0, 0.5, 1.0, 5.0, 10.0, 20.0, 30.0}) {
    const double loss = loss_at(margin);
    EXPECT_LT(loss, prev) << "margin " << margin;
    prev = loss;
  }
  // Past double resolution the loss keeps shrinking until it rounds to zero.
  for (double margin : {100.0, 800.0, 1e6}) {
    const double loss = loss_at(margin);
    EXPECT_LE(loss, prev);
    EXPECT_GE(loss, 0.0);
    prev = loss;
  }
  EXPECT_LT(prev, 1e-300);
}

TEST(CrossEntropy, GradientMatchesFiniteDifferences) {
  auto logits = random_tensor(Shape{4, 10}, 50, 2.0);
  std::vector<int> y{3, 0, 9, 3};
  auto r = gradcheck([&] { return ops::softmax_cross_entropy(logits, std::span<const int>(y)); }, {logits});
  EXPECT_LE(r.rel_error, kGradTol);
}

TEST(CrossEntropy, LabelOutOfRangeIsDomainError) {
  Tensor<double> logits(Shape{2, 3}, 0.0);
  std::vector<int> bad{0, 3};
  EXPECT_THROW(ops::softmax_cross_entropy(logits, std::span<const int>(bad)), DomainError);
  std::vector<int> neg{-1, 0};
  EXPECT_THROW(ops::softmax_cross_entropy(logits, std::span<const int>(neg)), DomainError);
}

// standard ops

TEST(StandardOps, GlobalAvgPoolOfConstant) {
  for (std::int64_t h : {1, 2, 3, 5})
    for (std::int64_t w : {1, 2, 3, 5}) {
      Tensor<double> x(Shape{2, 3, h, w}, -1.25);
      auto y = ops::global_avg_pool(x);
      ASSERT_EQ(y.shape(), (Shape{2, 3, 1, 1}));
      for (double v : y.data()) EXPECT_DOUBLE_EQ(v, -1.25);
    }
}

TEST(StandardOps, ReluIdentity) {
  auto x = random_tensor(Shape{50}, 60);
  auto pos = ops::relu(x);
  auto neg = ops::relu(ops::scale(x, -1.0));
  for (std::int64_t i = 0; i < x.size(); ++i) EXPECT_EQ(pos[i] + neg[i], std::abs(x[i]));
}

TEST(StandardOps, LinearGradient) {
  auto x = random_tensor(Shape{3, 5}, 61);
  auto w = random_tensor(Shape{4, 5}, 62);
  auto b = random_tensor(Shape{4}, 63);
  auto r = gradcheck([&] { return project(ops::linear<double>(x, w, b), 64); }, {x, w, b});
  EXPECT_LE(r.rel_error, kGradTol);
}

TEST(StandardOps, ReluGradient) {
  auto x = random_tensor(Shape{2, 3, 4, 4}, 65);
  auto r = gradcheck([&] { return project(ops::relu(x), 66); }, {x});
  EXPECT_LE(r.rel_error, kGradTol);
}

TEST(StandardOps, MaxPoolGradient) {
  auto x = random_tensor(Shape{2, 2, 6, 7}, 67);
  auto r = gradcheck([&] { return project(ops::max_pool2d(x, 3, 2), 68); }, {x});
  EXPECT_LE(r.rel_error, kGradTol);
}

TEST(StandardOps, GlobalAvgPoolGradient) {
  auto x = random_tensor(Shape{2, 3, 5, 3}, 69);
  auto r = gradcheck([&] { return project(ops::global_avg_pool(x), 70); }, {x});
  EXPECT_LE(r.rel_error, kGradTol);
}

TEST(StandardOps, AddGradient) {
  auto a = random_tensor(Shape{2, 3, 4}, 71);
  auto b = random_tensor(Shape{2, 3, 4}, 72);
  auto r = gradcheck([&] { return project(ops::add(a, b), 73); }, {a, b});
  EXPECT_LE(r.rel_error, kGradTol);
  EXPECT_THROW(ops::add(a, random_tensor(Shape{2, 4, 3}, 74)), DimensionError);
}

TEST(StandardOps, PadCropFlipGradients) {
  auto x = random_tensor(Shape{1, 2, 5, 6}, 75);
  EXPECT_LE(gradcheck([&] { return project(ops::pad(x, 2), 76); }, {x}).rel_error, kGradTol);
  EXPECT_LE(gradcheck([&] { return project(ops::crop(x, 1, 2, 3, 4), 77); }, {x}).rel_error, kGradTol);
  EXPECT_LE(gradcheck([&] { return project(ops::horizontal_flip(x), 78); }, {x}).rel_error, kGradTol);
}

TEST(StandardOps, PadCropFlipValues) {
  auto x = random_tensor(Shape{2, 3, 4, 5}, 79);
  auto p = ops::pad(x, 3);
  ASSERT_EQ(p.shape(), (Shape{2, 3, 10, 11}));
  EXPECT_EQ(p.at(1, 2, 0, 0), 0.0);
  EXPECT_EQ(p.at(1, 2, 3 + 2, 3 + 4), x.at(1, 2, 2, 4));
  auto c = ops::crop(p, 3, 3, 4, 5);
  for (std::int64_t i = 0; i < x.size(); ++i) EXPECT_EQ(c[i], x[i]);
  auto f = ops::horizontal_flip(x);
  EXPECT_EQ(f.at(0, 1, 2, 0), x.at(0, 1, 2, 4));
  auto ff = ops::horizontal_flip(f);
  for (std::int64_t i = 0; i < x.size(); ++i) EXPECT_EQ(ff[i], x[i]);
}

TEST(StandardOps, CropOutsideBoundsIsDomainError) {
  auto x = random_tensor(Shape{1, 1, 4, 4}, 80);
  EXPECT_THROW(ops::crop(x, 1, 1, 4, 2), DomainError);
  EXPECT_THROW(ops::crop(x, -1, 0, 2, 2), DomainError);
  EXPECT_THROW(ops::crop(x, 0, 3, 2, 2), DomainError);
}

// A composite network: conv -> BN -> relu -> strided conv -> max pool -> GAP -> linear -> CE.
TEST(Composite, SmallCnnGradient) {
  auto x = random_tensor(Shape{3, 2, 8, 8}, 90);
  auto w1 = random_tensor(Shape{4, 2, 3, 3}, 91, 0.5);
  auto g1 = random_tensor(Shape{4}, 92);
  auto b1 = random_tensor(Shape{4}, 93);
  auto w2 = random_tensor(Shape{3, 4, 3, 3}, 94, 0.5);
  auto fw = random_tensor(Shape{5, 3}, 95);
  auto fb = random_tensor(Shape{5}, 96);
  BNStats<double> stats(4);
  std::vector<int> labels{1, 4, 0};
  auto loss = [&] {
    auto h = ops::conv2d<double>(x, w1, std::nullopt, 1, 1);
    h = ops::relu(ops::batchnorm2d(h, g1, b1, stats, ops::BnMode::train));
    h = ops::conv2d<double>(h, w2, std::nullopt, 2, 1);
    h = ops::max_pool2d(h, 2, 1);
    auto logits = ops::linear<double>(ops::flatten(ops::global_avg_pool(h)), fw, fb);
    return ops::softmax_cross_entropy(logits, std::span<const int>(labels));
  };
  auto r = gradcheck(loss, {x, w1, g1, b1, w2, fw, fb});
  EXPECT_LE(r.rel_error, 1e-5);
}
