#pragma once

#include <cstdint>
#include <span>
#include <vector>

namespace mixsize {

// Count / mean / sum of squared deviations for one channel. Merging uses the
// pairwise update of Chan et al., so merge order only affects rounding.
struct Moments {
  double count = 0.0;
  double mean = 0.0;
  double m2 = 0.0;

  void merge(const Moments& other) {
    if (other.count == 0.0) return;
    if (count == 0.0) {
      *this = other;
      return;
    }
    const double n = count + other.count;
    const double delta = other.mean - mean;
    mean += delta * other.count / n;
    m2 += other.m2 + delta * delta * count * other.count / n;
    count = n;
  }

  // Population variance of everything merged so far.
  double variance() const { return count > 0.0 ? m2 / count : 0.0; }

  template <class T>
  static Moments of(std::span<const T> values) {
    Moments m;
    m.count = static_cast<double>(values.size());
    if (values.empty()) return m;
    double sum = 0.0;
    for (auto v : values) sum += static_cast<double>(v);
    m.mean = sum / m.count;
    for (auto v : values) {
      const double d = static_cast<double>(v) - m.mean;
      m.m2 += d * d;
    }
    return m;
  }
};

/// Per-channel running statistics of one batch-norm layer.
///
/// `mean`/`var` are what eval mode normalizes with. During training they track
/// an exponential moving average; after calibration they hold the exact pooled
/// statistics of the calibration stream. Variance is the population (biased)
/// variance in both cases, the same quantity train mode normalizes with.
template <class T>
struct BNStats {
  std::vector<T> mean;
  std::vector<T> var;
  std::vector<double> count;  // elements per channel behind the current estimate
  bool initialized = false;

  BNStats() = default;
  explicit BNStats(std::int64_t channels) { resize(channels); }

  std::int64_t channels() const { return static_cast<std::int64_t>(mean.size()); }

  void resize(std::int64_t channels) {
    mean.assign(static_cast<std::size_t>(channels), T(0));
    var.assign(static_cast<std::size_t>(channels), T(1));
    count.assign(static_cast<std::size_t>(channels), 0.0);
    accum_.clear();
    initialized = false;
  }

  // Back to the uninitialized state; eval mode will refuse to run.
  void reset() { resize(channels()); }

  void ema_update(std::span<const Moments> batch, double momentum) {
    for (std::size_t c = 0; c < mean.size(); ++c) {
      if (!initialized) {
        mean[c] = static_cast<T>(batch[c].mean);
        var[c] = static_cast<T>(batch[c].variance());
      } else {
        mean[c] = static_cast<T>((1.0 - momentum) * mean[c] + momentum * batch[c].mean);
        var[c] = static_cast<T>((1.0 - momentum) * var[c] + momentum * batch[c].variance());
      }
      count[c] += batch[c].count;
    }
    initialized = true;
  }

  void begin_capture() { accum_.assign(mean.size(), Moments{}); }
  bool capturing() const { return !accum_.empty(); }

  void capture(std::span<const Moments> batch) {
    for (std::size_t c = 0; c < accum_.size(); ++c) accum_[c].merge(batch[c]);
  }

  // Replace the estimate with the aggregate of everything captured.
  void end_capture() {
    if (accum_.empty()) return;
    for (std::size_t c = 0; c < mean.size(); ++c) {
      mean[c] = static_cast<T>(accum_[c].mean);
      var[c] = static_cast<T>(accum_[c].variance());
      count[c] = accum_[c].count;
    }
    initialized = true;
    accum_.clear();
  }

 private:
  std::vector<Moments> accum_;
};

}  // namespace mixsize
