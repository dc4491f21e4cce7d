#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "mixsize/bn_stats.hpp"
#include "mixsize/calib.hpp"
#include "mixsize/data.hpp"
#include "mixsize/error.hpp"
#include "mixsize/model.hpp"
#include "mixsize/ops.hpp"
#include "mixsize/rng.hpp"

namespace mixsize::analysis {

/// Ranks 1..n; tied values share the average of their positions.
inline std::vector<double> average_ranks(std::span<const double> v) {
  std::vector<std::size_t> order(v.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
  std::vector<double> ranks(v.size());
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j + 1 < order.size() && v[order[j + 1]] == v[order[i]]) ++j;
    const double r = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) ranks[order[k]] = r;
    i = j + 1;
  }
  return ranks;
}

inline double pearson(std::span<const double> a, std::span<const double> b) {
  const auto n = static_cast<double>(a.size());
  const double ma = std::accumulate(a.begin(), a.end(), 0.0) / n;
  const double mb = std::accumulate(b.begin(), b.end(), 0.0) / n;
  double sab = 0.0, saa = 0.0, sbb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    sab += (a[i] - ma) * (b[i] - mb);
    saa += (a[i] - ma) * (a[i] - ma);
    sbb += (b[i] - mb) * (b[i] - mb);
  }
  if (saa == 0.0 || sbb == 0.0) throw DomainError("correlation undefined for a constant vector");
  return sab / std::sqrt(saa * sbb);
}

/// Spearman rank correlation (Pearson correlation of average ranks).
inline double spearman(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw DimensionError("spearman: vectors differ in length");
  if (a.size() < 2) throw DomainError("spearman: need at least two observations");
  const auto ra = average_ranks(a);
  const auto rb = average_ranks(b);
  return pearson(ra, rb);
}

enum class CheckpointTag { initial, partial, final_state };

inline std::string to_string(CheckpointTag t) {
  switch (t) {
    case CheckpointTag::initial: return "initial";
    case CheckpointTag::partial: return "partial";
    case CheckpointTag::final_state: return "final";
  }
  return "?";
}

struct CorrelationReport {
  int size_a = 32;
  int size_b = 24;
  double rho_same_image_cross_size = 0.0;  // mean rho(x^(a), x^(b))
  double rho_diff_image_same_size = 0.0;   // mean rho(x^(a), y^(a))
  std::map<int, double> var_per_size;      // V(x^(s))
  int n_pairs = 0;
  CheckpointTag checkpoint_tag = CheckpointTag::initial;
  std::vector<double> rho_same_per_pair;
  std::vector<double> rho_diff_per_pair;
};

/// Whole-network gradient of the mean loss on a single-image batch, in
/// parameter order. Batch norm runs in train mode; running statistics are
/// updated, so pass a model copy when that matters.
template <class T>
std::vector<double> gradient_vector(ResNet<T>& model, const Tensor<T>& image, int label) {
  model.zero_grad();
  Tensor<T> batch(Shape{1, image.dim(0), image.dim(1), image.dim(2)}, image.values());
  {
    Tape<T> tape;
    const int labels[1] = {label};
    auto loss = ops::softmax_cross_entropy(model.forward(batch, BnMode::train), std::span<const int>(labels));
    tape.backward(loss);
  }
  std::vector<double> g;
  g.reserve(static_cast<std::size_t>(model.parameter_count()));
  for (auto& p : model.parameters()) {
    if (p.tensor.has_grad()) {
      for (auto v : p.tensor.grad()) g.push_back(static_cast<double>(v));
    } else {
      g.insert(g.end(), static_cast<std::size_t>(p.tensor.size()), 0.0);
    }
  }
  return g;
}

// Per-coordinate running moments; variance() is the mean over coordinates of
// the across-sample population variance.
class CoordinateVariance {
 public:
  void add(std::span<const double> v) {
    if (mean_.empty()) {
      mean_.assign(v.size(), 0.0);
      m2_.assign(v.size(), 0.0);
    }
    n_ += 1.0;
    for (std::size_t i = 0; i < v.size(); ++i) {
      const double d = v[i] - mean_[i];
      mean_[i] += d / n_;
      m2_[i] += d * (v[i] - mean_[i]);
    }
  }

  double variance() const {
    if (n_ == 0.0 || m2_.empty()) return 0.0;
    double total = 0.0;
    for (double m : m2_) total += m / n_;
    return total / static_cast<double>(m2_.size());
  }

  double count() const { return n_; }

 private:
  std::vector<double> mean_, m2_;
  double n_ = 0.0;
};

/// Gradient agreement across image sizes vs across images.
///
/// For each of n_pairs random pairs (x, y) of distinct images: gradients for
/// x at size_a, x at size_b and y at size_a (bilinear resize from the stored
/// 32x32 image, batch of one). Reports the mean Spearman rho of
/// (x^a, x^b) and (x^a, y^a), and per size the gradient variance V over the
/// x images. The model is not modified.
template <class T>
CorrelationReport grad_correlation_experiment(const ResNet<T>& model, const data::Dataset& ds, int size_a,
                                              int size_b, int n_pairs, std::uint64_t seed,
                                              CheckpointTag tag = CheckpointTag::initial) {
  if (n_pairs < 2) throw ConfigError("gradient correlation needs at least 2 pairs");
  if (ds.size() < 2) throw DataError("gradient correlation needs at least 2 images");
  auto work = model.clone();
  Rng rng(seed);
  auto prepared = [&](std::int64_t i, int size) {
    auto img = ds.image<T>(i);
    if (size != img.dim(-1)) img = ops::bilinear_resize(img, size);
    ds.normalize(img);
    return img;
  };
  CorrelationReport r;
  r.size_a = size_a;
  r.size_b = size_b;
  r.n_pairs = n_pairs;
  r.checkpoint_tag = tag;
  CoordinateVariance var_a, var_b;
  for (int k = 0; k < n_pairs; ++k) {
    const auto x = static_cast<std::int64_t>(rng.below(static_cast<std::uint64_t>(ds.size())));
    auto y = static_cast<std::int64_t>(rng.below(static_cast<std::uint64_t>(ds.size() - 1)));
    if (y >= x) ++y;
    const int lx = ds.labels[static_cast<std::size_t>(x)];
    const int ly = ds.labels[static_cast<std::size_t>(y)];
    const auto gxa = gradient_vector(work, prepared(x, size_a), lx);
    const auto gxb = gradient_vector(work, prepared(x, size_b), lx);
    const auto gya = gradient_vector(work, prepared(y, size_a), ly);
    r.rho_same_per_pair.push_back(spearman(gxa, gxb));
    r.rho_diff_per_pair.push_back(spearman(gxa, gya));
    var_a.add(gxa);
    var_b.add(gxb);
  }
  auto mean = [](const std::vector<double>& v) { return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size()); };
  r.rho_same_image_cross_size = mean(r.rho_same_per_pair);
  r.rho_diff_image_same_size = mean(r.rho_diff_per_pair);
  r.var_per_size[size_a] = var_a.variance();
  r.var_per_size[size_b] = var_b.variance();
  return r;
}

/// Side the shorter image dimension is scaled to before the center crop.
inline std::int64_t eval_short_side(std::int64_t size) { return (8 * size) / 7; }

struct ResizeTarget {
  std::int64_t height;
  std::int64_t width;
};

// Shorter side -> floor(8S/7), longer side scaled to keep the aspect ratio
// (rounded to nearest, never below the shorter side).
inline ResizeTarget eval_resize_target(std::int64_t h, std::int64_t w, std::int64_t size) {
  const std::int64_t s = eval_short_side(size);
  if (h <= w) {
    const auto other = static_cast<std::int64_t>(std::floor(static_cast<double>(w) * s / static_cast<double>(h) + 0.5));
    return {s, std::max(s, other)};
  }
  const auto other = static_cast<std::int64_t>(std::floor(static_cast<double>(h) * s / static_cast<double>(w) + 0.5));
  return {std::max(s, other), s};
}

/// Resize so the shorter side is floor(8S/7), then crop the center S x S.
template <class T>
Tensor<T> eval_preprocess(const Tensor<T>& image, int size) {
  if (size < 1) throw DomainError("eval_preprocess: size must be positive");
  const auto target = eval_resize_target(image.dim(-2), image.dim(-1), size);
  auto resized = ops::bilinear_resize(image, target.height, target.width);
  return ops::crop(resized, (target.height - size) / 2, (target.width - size) / 2, size, size);
}

enum class Preprocess {
  resize,       // bilinear resize of the whole image to S x S
  resize_crop,  // eval_preprocess: shorter side to floor(8S/7), center crop
};

inline Preprocess parse_preprocess(std::string_view s) {
  if (s == "resize") return Preprocess::resize;
  if (s == "crop" || s == "resize_crop") return Preprocess::resize_crop;
  throw ConfigError("unknown preprocessing '" + std::string(s) + "'");
}

/// Top-1 accuracy (percent) in eval mode at input side `size`.
template <class T>
double evaluate(ResNet<T>& model, const data::Dataset& ds, int size, Preprocess pre = Preprocess::resize,
                int batch_size = 250) {
  NoGradGuard<T> no_grad;
  std::int64_t correct = 0;
  const std::int64_t plane = std::int64_t{data::Dataset::kChannels} * size * size;
  for (std::int64_t start = 0; start < ds.size(); start += batch_size) {
    const std::int64_t n = std::min<std::int64_t>(batch_size, ds.size() - start);
    Tensor<T> batch(Shape{n, data::Dataset::kChannels, size, size});
    for (std::int64_t j = 0; j < n; ++j) {
      auto img = ds.image<T>(start + j);
      if (pre == Preprocess::resize_crop) {
        img = eval_preprocess(img, size);
      } else if (img.dim(-1) != size || img.dim(-2) != size) {
        img = ops::bilinear_resize(img, size);
      }
      std::copy(img.data().begin(), img.data().end(), batch.data().begin() + j * plane);
    }
    ds.normalize(batch);
    const auto logits = model.forward(batch, BnMode::eval);
    const std::int64_t K = logits.dim(1);
    for (std::int64_t j = 0; j < n; ++j) {
      const T* row = logits.data().data() + j * K;
      const auto pred = std::max_element(row, row + K) - row;
      if (pred == ds.labels[static_cast<std::size_t>(start + j)]) ++correct;
    }
  }
  return 100.0 * static_cast<double>(correct) / static_cast<double>(ds.size());
}

struct SweepOptions {
  bool calibrate = true;
  int calib_batches = calib::kDefaultBatches;
  int calib_batch_size = 64;
  bool calib_augment = true;
  std::uint64_t calib_seed = 0;
  Preprocess preprocess = Preprocess::resize;
};

struct SweepPoint {
  int size = 0;
  double top1 = 0.0;
  double flops = 0.0;
  bool calibrated = false;
};

/// Accuracy and flops per evaluation size. With calibration, each size gets
/// its own copy of the model with batch-norm statistics measured at that size
/// on augmented training batches; the input model is never modified.
template <class T>
std::vector<SweepPoint> eval_size_sweep(const ResNet<T>& model, const data::Dataset& train,
                                        const data::Dataset& test, const std::vector<int>& sizes,
                                        const SweepOptions& opt = {}) {
  if (sizes.empty()) throw ConfigError("eval sweep: no sizes given");
  for (int s : sizes) {
    if (s < kMinInputSize) throw SizeError("eval sweep: size " + std::to_string(s) + " below minimum");
  }
  std::vector<SweepPoint> out;
  for (int s : sizes) {
    auto copy = model.clone();
    if (opt.calibrate) {
      data::AugmentConfig aug;
      aug.enabled = opt.calib_augment;
      const auto stream = data::batch_stream<T>(train, s, opt.calib_batch_size, aug, opt.calib_seed);
      calib::calibrate<T>(copy, stream, s, opt.calib_batches);
    }
    out.push_back(SweepPoint{s, evaluate(copy, test, s, opt.preprocess), model.flops(s), opt.calibrate});
  }
  return out;
}

}  // namespace mixsize::analysis
