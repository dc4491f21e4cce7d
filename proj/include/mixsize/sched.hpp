#pragma once

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "mixsize/error.hpp"
#include "mixsize/limits.hpp"
#include "mixsize/rng.hpp"

namespace mixsize::sched {

/// How the per-step budget freed by a smaller image is spent.
enum class RegimeMode {
  fixed,   // (B0, D0) for every size
  b_plus,  // more samples per batch, fewer steps per epoch
  d_plus,  // more augmented duplicates per sample, same step count
};

enum class Strategy { per_step, per_epoch, progressive };

struct SizeEntry {
  int size = 32;
  double prob = 1.0;
};

/// Discrete distribution over image sides plus the base (S0, B0, D0) it is
/// budgeted against: each step keeps S^2 * B * D close to S0^2 * B0 * D0.
struct MixSizeDistribution {
  std::vector<SizeEntry> entries{{32, 1.0}};
  int base_size = 32;
  int base_batch = 64;
  int base_duplicates = 1;
  RegimeMode mode = RegimeMode::fixed;
};

struct SampledStep {
  int size = 0;
  int batch = 0;
  int duplicates = 0;
  std::int64_t step_index = 0;
};

struct MeanStats {
  double size = 0.0;
  double batch = 0.0;
  double duplicates = 0.0;
};

inline constexpr double kProbTolerance = 1e-9;
inline constexpr double kBudgetTolerance = 0.15;

inline std::string_view to_string(RegimeMode m) {
  switch (m) {
    case RegimeMode::fixed: return "fixed";
    case RegimeMode::b_plus: return "B+";
    case RegimeMode::d_plus: return "D+";
  }
  return "?";
}

inline RegimeMode parse_mode(std::string_view s) {
  if (s == "fixed") return RegimeMode::fixed;
  if (s == "B+" || s == "b_plus" || s == "bplus") return RegimeMode::b_plus;
  if (s == "D+" || s == "d_plus" || s == "dplus") return RegimeMode::d_plus;
  throw ConfigError("unknown regime mode '" + std::string(s) + "'");
}

inline std::string_view to_string(Strategy s) {
  switch (s) {
    case Strategy::per_step: return "per_step";
    case Strategy::per_epoch: return "per_epoch";
    case Strategy::progressive: return "progressive";
  }
  return "?";
}

inline Strategy parse_strategy(std::string_view s) {
  if (s == "per_step") return Strategy::per_step;
  if (s == "per_epoch") return Strategy::per_epoch;
  if (s == "progressive") return Strategy::progressive;
  throw ConfigError("unknown sampling strategy '" + std::string(s) + "'");
}

/// Throws ConfigError unless p_i >= 0, sum p_i = 1 (to 1e-9) and every side
/// is at least the network minimum.
inline void validate(const MixSizeDistribution& dist) {
  if (dist.entries.empty()) throw ConfigError("size distribution has no entries");
  double total = 0.0;
  for (const auto& e : dist.entries) {
    if (!(e.prob >= 0.0)) throw ConfigError("negative probability for size " + std::to_string(e.size));
    if (e.size < kMinInputSize) {
      throw ConfigError("size " + std::to_string(e.size) + " below minimum " + std::to_string(kMinInputSize));
    }
    total += e.prob;
  }
  if (std::abs(total - 1.0) > kProbTolerance) {
    std::ostringstream os;
    os << "size probabilities sum to " << total << ", expected 1";
    throw ConfigError(os.str());
  }
  if (dist.base_size < kMinInputSize) throw ConfigError("base size below minimum");
  if (dist.base_batch < 1) throw ConfigError("base batch must be positive");
  if (dist.base_duplicates < 1) throw ConfigError("base duplicates must be positive");
}

inline int round_half_up(double x) { return static_cast<int>(std::floor(x + 0.5)); }

/// (B, D) for side S: the active dimension is scaled by (S0/S)^2, rounded
/// half-up with a floor of 1.
inline std::pair<int, int> derive_step(int size, const MixSizeDistribution& dist) {
  const double ratio = static_cast<double>(dist.base_size) / static_cast<double>(size);
  const double scale = ratio * ratio;
  switch (dist.mode) {
    case RegimeMode::b_plus:
      return {std::max(1, round_half_up(dist.base_batch * scale)), dist.base_duplicates};
    case RegimeMode::d_plus:
      return {dist.base_batch, std::max(1, round_half_up(dist.base_duplicates * scale))};
    case RegimeMode::fixed:
      break;
  }
  return {dist.base_batch, dist.base_duplicates};
}

// Relative deviation of S^2 B D from the base budget.
inline double budget_deviation(const SampledStep& s, const MixSizeDistribution& dist) {
  const double base = static_cast<double>(dist.base_size) * dist.base_size * dist.base_batch * dist.base_duplicates;
  const double cost = static_cast<double>(s.size) * s.size * s.batch * s.duplicates;
  return std::abs(cost - base) / base;
}

/// Index into dist.entries by inverse CDF of one uniform draw.
inline std::size_t sample_index(const MixSizeDistribution& dist, Rng& rng) {
  const double u = rng.uniform();
  double cdf = 0.0;
  for (std::size_t i = 0; i < dist.entries.size(); ++i) {
    cdf += dist.entries[i].prob;
    if (u < cdf) return i;
  }
  // u landed in the rounding slack above the last cumulative sum
  for (std::size_t i = dist.entries.size(); i-- > 0;)
    if (dist.entries[i].prob > 0.0) return i;
  return dist.entries.size() - 1;
}

inline SampledStep make_step(int size, const MixSizeDistribution& dist, std::int64_t index) {
  const auto [b, d] = derive_step(size, dist);
  return SampledStep{size, b, d, index};
}

inline SampledStep sample_step(const MixSizeDistribution& dist, Rng& rng, std::int64_t index = 0) {
  return make_step(dist.entries[sample_index(dist, rng)].size, dist, index);
}

/// Closed-form expectations of S, B and D under the distribution.
inline MeanStats mean_stats(const MixSizeDistribution& dist) {
  MeanStats m;
  for (const auto& e : dist.entries) {
    const auto [b, d] = derive_step(e.size, dist);
    m.size += e.prob * e.size;
    m.batch += e.prob * b;
    m.duplicates += e.prob * d;
  }
  return m;
}

inline double scaled_learning_rate(double base_lr, double mean_batch, int base_batch) {
  if (base_batch <= 0) throw ConfigError("base batch must be positive");
  return base_lr * mean_batch / static_cast<double>(base_batch);
}

/// Epochs per size for the small-to-large schedule: round(p_i * E), ascending
/// sizes, rounding remainder settled on the largest sizes.
inline std::vector<int> progressive_epochs(const MixSizeDistribution& dist, int total_epochs) {
  auto entries = dist.entries;
  std::stable_sort(entries.begin(), entries.end(), [](auto& a, auto& b) { return a.size < b.size; });
  std::vector<int> epochs;
  int assigned = 0;
  for (const auto& e : entries) {
    epochs.push_back(round_half_up(e.prob * total_epochs));
    assigned += epochs.back();
  }
  int remainder = total_epochs - assigned;
  epochs.back() += remainder;
  for (std::size_t i = epochs.size(); i-- > 1;) {
    if (epochs[i] >= 0) break;
    epochs[i - 1] += epochs[i];
    epochs[i] = 0;
  }
  std::vector<int> sizes;
  for (std::size_t i = 0; i < entries.size(); ++i) sizes.insert(sizes.end(), epochs[i], entries[i].size);
  return sizes;
}

/// Stream of step shapes for one training run.
///
/// per_step draws a size for every optimizer step. per_epoch and progressive
/// fix one size per epoch (B and D derived once from it); both use the
/// p_i * E_total allocation, progressive in ascending order and per_epoch in a
/// seeded random order.
class SizeSchedule {
 public:
  SizeSchedule(MixSizeDistribution dist, Strategy strategy, int total_epochs, Rng rng)
      : dist_(std::move(dist)), strategy_(strategy), rng_(std::move(rng)) {
    validate(dist_);
    if (total_epochs < 1) throw ConfigError("total_epochs must be at least 1");
    if (strategy_ != Strategy::per_step) {
      epoch_sizes_ = progressive_epochs(dist_, total_epochs);
      if (strategy_ == Strategy::per_epoch) rng_.shuffle(epoch_sizes_.begin(), epoch_sizes_.end());
    }
  }

  SampledStep next(int epoch) {
    if (strategy_ == Strategy::per_step) return sample_step(dist_, rng_, index_++);
    const auto e = static_cast<std::size_t>(std::clamp<int>(epoch, 0, static_cast<int>(epoch_sizes_.size()) - 1));
    return make_step(epoch_sizes_[e], dist_, index_++);
  }

  // Flat sequence of `steps_per_epoch` steps for each of `epochs` epochs.
  std::vector<SampledStep> take(int epochs, int steps_per_epoch) {
    std::vector<SampledStep> out;
    out.reserve(static_cast<std::size_t>(epochs) * static_cast<std::size_t>(steps_per_epoch));
    for (int e = 0; e < epochs; ++e)
      for (int s = 0; s < steps_per_epoch; ++s) out.push_back(next(e));
    return out;
  }

  const std::vector<int>& epoch_sizes() const { return epoch_sizes_; }
  const MixSizeDistribution& distribution() const { return dist_; }
  Strategy strategy() const { return strategy_; }

 private:
  MixSizeDistribution dist_;
  Strategy strategy_;
  Rng rng_;
  std::vector<int> epoch_sizes_;
  std::int64_t index_ = 0;
};

inline SizeSchedule make_schedule(const MixSizeDistribution& dist, Strategy strategy, int total_epochs,
                                  std::uint64_t seed) {
  return SizeSchedule(dist, strategy, total_epochs, Rng(seed));
}

/// Parses "40:0.2,32:0.3,..." into entries.
inline std::vector<SizeEntry> parse_entries(std::string_view text) {
  std::vector<SizeEntry> out;
  std::string item;
  std::istringstream is{std::string(text)};
  while (std::getline(is, item, ',')) {
    item.erase(std::remove_if(item.begin(), item.end(), ::isspace), item.end());
    if (item.empty()) continue;
    const auto colon = item.find(':');
    if (colon == std::string::npos) throw ConfigError("size entry '" + item + "' is not size:probability");
    try {
      std::size_t used = 0;
      SizeEntry e;
      e.size = std::stoi(item.substr(0, colon), &used);
      if (used != colon) throw std::invalid_argument(item);
      const auto p = item.substr(colon + 1);
      e.prob = std::stod(p, &used);
      if (used != p.size()) throw std::invalid_argument(item);
      out.push_back(e);
    } catch (const std::logic_error&) {
      throw ConfigError("malformed size entry '" + item + "'");
    }
  }
  if (out.empty()) throw ConfigError("empty size distribution");
  return out;
}

inline std::string format_entries(const std::vector<SizeEntry>& entries) {
  std::ostringstream os;
  os.precision(17);
  for (std::size_t i = 0; i < entries.size(); ++i) os << (i ? "," : "") << entries[i].size << ':' << entries[i].prob;
  return os.str();
}

/// Built-in regimes. cifar28 is based at (32, 64, 1); the ImageNet-scale
/// regimes at (224, 256, 1). S^(224)'s six equal-weight sizes carry 0.8/6 each.
inline MixSizeDistribution preset(std::string_view name, RegimeMode mode = RegimeMode::fixed) {
  MixSizeDistribution d;
  d.mode = mode;
  if (name == "cifar28") {
    d.entries = {{40, 0.2}, {32, 0.3}, {24, 0.3}, {16, 0.2}};
    d.base_size = 32;
    d.base_batch = 64;
  } else if (name == "imagenet144") {
    d.entries = {{256, 0.1}, {224, 0.1}, {128, 0.6}, {96, 0.2}};
    d.base_size = 224;
    d.base_batch = 256;
  } else if (name == "imagenet208") {
    d.entries = {{320, 0.1}, {288, 0.1}, {256, 0.1}, {224, 0.2}, {192, 0.2}, {160, 0.1}, {128, 0.1}, {96, 0.1}};
    d.base_size = 224;
    d.base_batch = 256;
  } else if (name == "imagenet224") {
    const double p = 0.8 / 6.0;
    d.entries = {{320, p}, {288, p}, {256, p}, {224, 0.2}, {192, p}, {160, p}, {128, p}};
    d.base_size = 224;
    d.base_batch = 256;
  } else {
    throw ConfigError("unknown size preset '" + std::string(name) + "'");
  }
  d.base_duplicates = 1;
  return d;
}

inline std::vector<std::string> preset_names() { return {"cifar28", "imagenet144", "imagenet208", "imagenet224"}; }

}  // namespace mixsize::sched
