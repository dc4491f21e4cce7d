#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iterator>
#include <memory>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "mixsize/error.hpp"
#include "mixsize/ops.hpp"
#include "mixsize/rng.hpp"
#include "mixsize/tensor.hpp"

namespace mixsize::data {

enum class Split { train, test };

struct Normalization {
  std::array<double, 3> mean{0.0, 0.0, 0.0};
  std::array<double, 3> std{1.0, 1.0, 1.0};
};

/// 32x32 RGB images stored as raw bytes (CHW per image) plus integer labels.
struct Dataset {
  static constexpr int kSide = 32;
  static constexpr int kChannels = 3;
  static constexpr std::int64_t kImageBytes = kChannels * kSide * kSide;

  std::vector<std::uint8_t> pixels;
  std::vector<int> labels;
  int num_classes = 10;
  Split split = Split::train;
  Normalization norm;

  std::int64_t size() const { return static_cast<std::int64_t>(labels.size()); }

  // Image i as [3, 32, 32] with values in [0, 1].
  template <class T>
  Tensor<T> image(std::int64_t i) const {
    if (i < 0 || i >= size()) throw DomainError("image index " + std::to_string(i) + " out of range");
    Tensor<T> out(Shape{kChannels, kSide, kSide});
    const std::uint8_t* src = pixels.data() + i * kImageBytes;
    for (std::int64_t j = 0; j < kImageBytes; ++j) out[j] = static_cast<T>(src[j]) / T(255);
    return out;
  }

  // Per-channel (x - mean) / std on a [..., 3, H, W] tensor, in place.
  template <class T>
  void normalize(Tensor<T>& x) const {
    const std::int64_t H = x.dim(-2), W = x.dim(-1), plane = H * W;
    const std::int64_t planes = x.size() / plane;
    for (std::int64_t p = 0; p < planes; ++p) {
      const auto c = static_cast<std::size_t>(p % kChannels);
      const T m = static_cast<T>(norm.mean[c]);
      const T inv = static_cast<T>(1.0 / norm.std[c]);
      T* d = x.data().data() + p * plane;
      for (std::int64_t i = 0; i < plane; ++i) d[i] = (d[i] - m) * inv;
    }
  }

  void validate() const {
    if (labels.empty()) throw DataError("dataset is empty");
    if (static_cast<std::int64_t>(pixels.size()) != size() * kImageBytes) {
      throw DataError("dataset pixel buffer does not match label count");
    }
    for (int l : labels) {
      if (l < 0 || l >= num_classes) throw DataError("label " + std::to_string(l) + " out of range");
    }
  }
};

/// Per-channel mean / std of the [0,1]-scaled pixels.
inline Normalization compute_normalization(const Dataset& ds) {
  Normalization n;
  const std::int64_t plane = Dataset::kSide * Dataset::kSide;
  for (int c = 0; c < Dataset::kChannels; ++c) {
    double sum = 0.0, sq = 0.0;
    for (std::int64_t i = 0; i < ds.size(); ++i) {
      const std::uint8_t* p = ds.pixels.data() + i * Dataset::kImageBytes + c * plane;
      for (std::int64_t j = 0; j < plane; ++j) {
        const double v = p[j] / 255.0;
        sum += v;
        sq += v * v;
      }
    }
    const double count = static_cast<double>(ds.size() * plane);
    n.mean[c] = sum / count;
    n.std[c] = std::sqrt(std::max(sq / count - n.mean[c] * n.mean[c], 1e-12));
  }
  return n;
}

namespace detail {

inline std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

// Appends records of `label_bytes` label bytes (the last one is used) + 3072 pixels.
inline void append_records(const std::filesystem::path& path, int label_bytes, Dataset& ds) {
  const auto bytes = read_file(path);
  const std::int64_t record = label_bytes + Dataset::kImageBytes;
  const auto total = static_cast<std::int64_t>(bytes.size());
  if (total == 0 || total % record != 0) {
    throw DataError(path.string() + ": truncated record at byte offset " + std::to_string(total - total % record) +
                    " (file size " + std::to_string(total) + ", record size " + std::to_string(record) + ")");
  }
  for (std::int64_t off = 0; off < total; off += record) {
    const int label = bytes[static_cast<std::size_t>(off + label_bytes - 1)];
    if (label >= ds.num_classes) {
      throw DataError(path.string() + ": label " + std::to_string(label) + " out of range at byte offset " +
                      std::to_string(off + label_bytes - 1));
    }
    ds.labels.push_back(label);
    ds.pixels.insert(ds.pixels.end(), bytes.begin() + off + label_bytes, bytes.begin() + off + record);
  }
}

}  // namespace detail

/// Reads one file in the CIFAR-10 binary layout (1 label byte + 3072 bytes
/// of R, G, B planes, row-major).
inline Dataset read_cifar10_file(const std::filesystem::path& path, Split split = Split::train) {
  Dataset ds;
  ds.split = split;
  detail::append_records(path, 1, ds);
  return ds;
}

struct TrainTest {
  Dataset train;
  Dataset test;
};

/// data_batch_{1..5}.bin + test_batch.bin. Test normalization is copied from train.
inline TrainTest load_cifar10(const std::filesystem::path& dir) {
  TrainTest out;
  out.train.split = Split::train;
  out.test.split = Split::test;
  for (int i = 1; i <= 5; ++i) detail::append_records(dir / ("data_batch_" + std::to_string(i) + ".bin"), 1, out.train);
  detail::append_records(dir / "test_batch.bin", 1, out.test);
  out.train.norm = compute_normalization(out.train);
  out.test.norm = out.train.norm;
  return out;
}

/// CIFAR-100 binary layout: coarse label byte (skipped), fine label byte, pixels.
inline TrainTest load_cifar100(const std::filesystem::path& dir) {
  TrainTest out;
  out.train.num_classes = out.test.num_classes = 100;
  out.train.split = Split::train;
  out.test.split = Split::test;
  detail::append_records(dir / "train.bin", 2, out.train);
  detail::append_records(dir / "test.bin", 2, out.test);
  out.train.norm = compute_normalization(out.train);
  out.test.norm = out.train.norm;
  return out;
}

/// Class-balanced sample of n images (n / K per class, the first n % K
/// classes get one extra), returned in original index order.
inline Dataset subset(const Dataset& ds, std::int64_t n, std::uint64_t seed) {
  if (n <= 0 || n >= ds.size()) return ds;
  std::vector<std::vector<std::int64_t>> by_class(static_cast<std::size_t>(ds.num_classes));
  for (std::int64_t i = 0; i < ds.size(); ++i) by_class[static_cast<std::size_t>(ds.labels[i])].push_back(i);
  Rng rng(seed);
  std::vector<std::int64_t> chosen;
  for (int c = 0; c < ds.num_classes; ++c) {
    auto& idx = by_class[static_cast<std::size_t>(c)];
    rng.shuffle(idx.begin(), idx.end());
    const std::int64_t quota = n / ds.num_classes + (c < n % ds.num_classes ? 1 : 0);
    const auto take = std::min<std::int64_t>(quota, static_cast<std::int64_t>(idx.size()));
    chosen.insert(chosen.end(), idx.begin(), idx.begin() + take);
  }
  std::sort(chosen.begin(), chosen.end());
  Dataset out;
  out.num_classes = ds.num_classes;
  out.split = ds.split;
  out.norm = ds.norm;
  for (auto i : chosen) {
    out.labels.push_back(ds.labels[i]);
    out.pixels.insert(out.pixels.end(), ds.pixels.begin() + i * Dataset::kImageBytes,
                      ds.pixels.begin() + (i + 1) * Dataset::kImageBytes);
  }
  return out;
}

inline constexpr int kSyntheticShapes = 10;

/// Geometric shapes on noisy backgrounds; the class is the shape type.
///
/// Image i uses its own RNG substream, so the set is a pure function of
/// (n, classes, seed) and label i is i % classes.
inline Dataset synth_dataset(std::int64_t n, int classes, std::uint64_t seed, Split split = Split::train) {
  if (classes < 2 || classes > kSyntheticShapes) {
    throw ConfigError("synthetic dataset supports 2.." + std::to_string(kSyntheticShapes) + " classes");
  }
  if (n < classes) throw ConfigError("synthetic dataset needs at least one image per class");
  Dataset ds;
  ds.num_classes = classes;
  ds.split = split;
  ds.labels.resize(static_cast<std::size_t>(n));
  ds.pixels.resize(static_cast<std::size_t>(n * Dataset::kImageBytes));
  constexpr int S = Dataset::kSide;
  for (std::int64_t i = 0; i < n; ++i) {
    Rng rng = Rng::stream(seed, static_cast<std::uint64_t>(i));
    const int label = static_cast<int>(i % classes);
    ds.labels[static_cast<std::size_t>(i)] = label;
    std::array<double, 3> bg{}, fg{};
    for (auto& v : bg) v = 0.15 + 0.45 * rng.uniform();
    for (int c = 0; c < 3; ++c) {
      const double shift = 0.25 + 0.3 * rng.uniform();
      fg[c] = bg[c] + (rng.bernoulli(0.5) ? shift : -shift);
    }
    const double r = 6.0 + 5.0 * rng.uniform();
    const double cy = 11.0 + 10.0 * rng.uniform();
    const double cx = 11.0 + 10.0 * rng.uniform();
    const double t = 1.5 + 1.0 * rng.uniform();
    const double noise = 0.06 + 0.06 * rng.uniform();
    std::uint8_t* img = ds.pixels.data() + i * Dataset::kImageBytes;
    for (int y = 0; y < S; ++y) {
      for (int x = 0; x < S; ++x) {
        const double dy = y + 0.5 - cy, dx = x + 0.5 - cx;
        const double ay = std::abs(dy), ax = std::abs(dx), d = std::hypot(dx, dy);
        bool inside = false;
        switch (label) {
          case 0: inside = ax <= r && ay <= r; break;                                        // square
          case 1: inside = d <= r; break;                                                     // disk
          case 2: inside = dy >= -r && dy <= r && ax <= (dy + r) * 0.5; break;               // triangle
          case 3: inside = (ax <= r && ay <= t) || (ay <= r && ax <= t); break;             // plus
          case 4: inside = d <= r && d >= r - t; break;                                       // ring
          case 5: inside = ax <= r && ay <= t; break;                                         // horizontal bar
          case 6: inside = ay <= r && ax <= t; break;                                         // vertical bar
          case 7: inside = ax <= r && ay <= r && std::abs(ax - ay) <= t; break;               // X
          case 8: inside = ax + ay <= r; break;                                               // diamond
          case 9: inside = ax <= r && ay <= r && (ax >= r - t || ay >= r - t); break;         // frame
          default: break;
        }
        for (int c = 0; c < 3; ++c) {
          const double v = (inside ? fg[c] : bg[c]) + noise * rng.normal();
          img[(c * S + y) * S + x] = static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
        }
      }
    }
  }
  ds.norm = compute_normalization(ds);
  return ds;
}

/// Standard CIFAR augmentation followed by a bilinear resize to S x S.
struct AugmentConfig {
  int pad = 4;
  double flip_prob = 0.5;
  bool enabled = true;

  void validate() const {
    if (pad < 0) throw ConfigError("augment: pad must be non-negative");
    if (!(flip_prob >= 0.0 && flip_prob <= 1.0)) throw ConfigError("augment: flip_prob must be in [0,1]");
  }
};

// Random choices of one augmentation: crop origin in the padded image and flip.
struct AugmentDraw {
  int top = 0;
  int left = 0;
  bool flip = false;
};

inline AugmentDraw draw_augment(const AugmentConfig& cfg, Rng& rng) {
  AugmentDraw d;
  const auto span = static_cast<std::uint64_t>(2 * cfg.pad + 1);
  d.top = static_cast<int>(rng.below(span));
  d.left = static_cast<int>(rng.below(span));
  d.flip = rng.bernoulli(cfg.flip_prob);
  return d;
}

/// pad -> crop back to the original extent at (top, left) -> flip -> resize.
/// With the centered crop, no flip and S equal to the input side this returns
/// the input values unchanged.
template <class T>
Tensor<T> apply_augment(const Tensor<T>& image, int size, const AugmentConfig& cfg, const AugmentDraw& d) {
  Tensor<T> out = image;
  if (cfg.enabled) {
    const std::int64_t H = image.dim(-2), W = image.dim(-1);
    out = ops::crop(ops::pad(image, cfg.pad), d.top, d.left, H, W);
    if (d.flip) out = ops::horizontal_flip(out);
  }
  if (out.dim(-2) != size || out.dim(-1) != size) out = ops::bilinear_resize(out, size);
  return out;
}

template <class T>
Tensor<T> augment(const Tensor<T>& image, int size, const AugmentConfig& cfg, Rng& rng) {
  if (!cfg.enabled) return apply_augment(image, size, cfg, AugmentDraw{cfg.pad, cfg.pad, false});
  return apply_augment(image, size, cfg, draw_augment(cfg, rng));
}

template <class T>
struct Batch {
  Tensor<T> images;
  std::vector<int> labels;
};

/// B = indices.size() samples, each repeated D times with independent
/// augmentations, grouped by sample: rows [i*D, (i+1)*D) are sample i.
template <class T>
Batch<T> make_batch(const Dataset& ds, std::span<const std::int64_t> indices, int size, int duplicates,
                    const AugmentConfig& cfg, Rng& rng) {
  if (duplicates < 1) throw ConfigError("make_batch: duplicates must be at least 1");
  const auto B = static_cast<std::int64_t>(indices.size());
  const std::int64_t rows = B * duplicates;
  const std::int64_t plane = std::int64_t{Dataset::kChannels} * size * size;
  Batch<T> batch{Tensor<T>(Shape{rows, Dataset::kChannels, size, size}), {}};
  batch.labels.reserve(static_cast<std::size_t>(rows));
  std::int64_t row = 0;
  for (auto idx : indices) {
    if (idx < 0 || idx >= ds.size()) throw DomainError("make_batch: index " + std::to_string(idx) + " out of range");
    const auto img = ds.image<T>(idx);
    for (int d = 0; d < duplicates; ++d, ++row) {
      const auto aug = augment(img, size, cfg, rng);
      std::copy(aug.data().begin(), aug.data().end(), batch.images.data().begin() + row * plane);
      batch.labels.push_back(ds.labels[static_cast<std::size_t>(idx)]);
    }
  }
  ds.normalize(batch.images);
  return batch;
}

/// Endless stream of augmented batches at one size, reshuffled every pass.
template <class T>
std::function<Tensor<T>()> batch_stream(const Dataset& ds, int size, int batch_size, const AugmentConfig& cfg,
                                        std::uint64_t seed) {
  struct State {
    std::vector<std::int64_t> order;
    std::size_t pos = 0;
    Rng shuffle_rng;
    Rng aug_rng;
  };
  auto st = std::make_shared<State>(State{{}, 0, Rng::stream(seed, 1), Rng::stream(seed, 2)});
  st->order.resize(static_cast<std::size_t>(ds.size()));
  std::iota(st->order.begin(), st->order.end(), std::int64_t{0});
  st->shuffle_rng.shuffle(st->order.begin(), st->order.end());
  const auto bs = static_cast<std::size_t>(std::min<std::int64_t>(batch_size, ds.size()));
  return [&ds, st, size, bs, cfg]() {
    if (st->pos + bs > st->order.size()) {
      st->shuffle_rng.shuffle(st->order.begin(), st->order.end());
      st->pos = 0;
    }
    std::span<const std::int64_t> idx(st->order.data() + st->pos, bs);
    st->pos += bs;
    return make_batch<T>(ds, idx, size, 1, cfg, st->aug_rng).images;
  };
}

}  // namespace mixsize::data
