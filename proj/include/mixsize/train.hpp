#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <span>
#include <vector>

#include "mixsize/data.hpp"
#include "mixsize/error.hpp"
#include "mixsize/metrics.hpp"
#include "mixsize/model.hpp"
#include "mixsize/ops.hpp"
#include "mixsize/optim.hpp"
#include "mixsize/rng.hpp"
#include "mixsize/sched.hpp"

namespace mixsize {

// Independent RNG streams derived from the run seed.
enum class Stream : std::uint64_t { sizes = 0, shuffle = 1, augment = 2 };

struct TrainOptions {
  sched::MixSizeDistribution regime;
  sched::Strategy strategy = sched::Strategy::per_step;
  // When false every step uses (S0, B0, D0) without consulting the sampler.
  bool use_schedule = true;
  optim::SGDConfig sgd;
  optim::LrSchedule lr_schedule = optim::LrSchedule::step_decay;
  std::vector<int> milestones;  // empty: 50% and 75% of the epochs
  double lr_gamma = 0.1;
  // Multiply the base lr by B_mean / B0 in B+ mode.
  bool scale_lr = true;
  int epochs = 30;
  std::uint64_t seed = 1;
  data::AugmentConfig augment;

  std::function<void(const MetricsRecord&)> on_step;
  std::function<void(int epoch, const EpochRecord&)> on_epoch;
};

struct TrainResult {
  std::int64_t steps = 0;
  std::vector<std::int64_t> steps_per_epoch;
  double final_loss = 0.0;
  double base_lr = 0.0;  // after linear scaling
};

inline std::vector<int> default_milestones(int epochs) { return {epochs / 2, (3 * epochs) / 4}; }

/// Base learning rate after the linear batch-size rule (B+ only).
inline double effective_base_lr(const TrainOptions& opt) {
  if (opt.scale_lr && opt.use_schedule && opt.regime.mode == sched::RegimeMode::b_plus) {
    return sched::scaled_learning_rate(opt.sgd.lr, sched::mean_stats(opt.regime).batch, opt.regime.base_batch);
  }
  return opt.sgd.lr;
}

/// Mixed-size training loop.
///
/// Each epoch visits a fresh permutation of the training set. Every step takes
/// (S, B, D) from the size schedule, consumes the next B indices (the last
/// step of an epoch may be short), builds a B*D batch of augmented copies at
/// S x S and applies one SGD step. Size sampling, shuffling and augmentation
/// draw from separate streams of the run seed.
template <class T>
TrainResult train(ResNet<T>& model, const data::Dataset& ds, const TrainOptions& opt) {
  if (opt.epochs < 1) throw ConfigError("train: epochs must be at least 1");
  sched::validate(opt.regime);
  opt.augment.validate();
  ds.validate();

  sched::SizeSchedule schedule(opt.regime, opt.strategy, opt.epochs,
                               Rng::stream(opt.seed, static_cast<std::uint64_t>(Stream::sizes)));
  Rng shuffle_rng = Rng::stream(opt.seed, static_cast<std::uint64_t>(Stream::shuffle));
  Rng aug_rng = Rng::stream(opt.seed, static_cast<std::uint64_t>(Stream::augment));
  optim::SGD<T> sgd(opt.sgd);
  const auto milestones = opt.milestones.empty() ? default_milestones(opt.epochs) : opt.milestones;

  TrainResult result;
  result.base_lr = effective_base_lr(opt);
  std::vector<std::int64_t> order(static_cast<std::size_t>(ds.size()));
  for (int epoch = 0; epoch < opt.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), std::int64_t{0});
    shuffle_rng.shuffle(order.begin(), order.end());
    const double lr = optim::lr_schedule(opt.lr_schedule, result.base_lr, epoch, opt.epochs, milestones, opt.lr_gamma);
    std::size_t pos = 0;
    std::int64_t epoch_steps = 0;
    double loss_sum = 0.0;
    while (pos < order.size()) {
      const auto t0 = std::chrono::steady_clock::now();
      const sched::SampledStep step =
          opt.use_schedule ? schedule.next(epoch)
                           : sched::SampledStep{opt.regime.base_size, opt.regime.base_batch,
                                                opt.regime.base_duplicates, result.steps};
      const std::size_t take = std::min<std::size_t>(static_cast<std::size_t>(step.batch), order.size() - pos);
      const std::span<const std::int64_t> idx(order.data() + pos, take);
      pos += take;
      auto batch = data::make_batch<T>(ds, idx, step.size, step.duplicates, opt.augment, aug_rng);

      model.zero_grad();
      double loss_value = 0.0;
      {
        Tape<T> tape;
        auto loss = ops::softmax_cross_entropy(model.forward(batch.images, BnMode::train),
                                               std::span<const int>(batch.labels));
        loss_value = static_cast<double>(loss.item());
        if (!std::isfinite(loss_value)) {
          throw NumericError("non-finite training loss at step " + std::to_string(result.steps));
        }
        tape.backward(loss);
      }
      const auto info = sgd.step(model.parameters(), lr);
      loss_sum += loss_value;
      ++epoch_steps;
      ++result.steps;
      result.final_loss = loss_value;
      if (opt.on_step) {
        MetricsRecord rec;
        rec.step = result.steps;
        rec.epoch = epoch;
        rec.size = step.size;
        rec.batch = static_cast<int>(take);
        rec.duplicates = step.duplicates;
        rec.lr = lr;
        rec.train_loss = loss_value;
        rec.grad_norm = info.grad_norm;
        rec.smoothed_norm = info.smoothed_norm;
        rec.multiplier = info.multiplier;
        rec.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
        opt.on_step(rec);
      }
    }
    result.steps_per_epoch.push_back(epoch_steps);
    if (opt.on_epoch) {
      EpochRecord rec;
      rec.epoch = epoch;
      rec.steps = result.steps;
      rec.epoch_steps = epoch_steps;
      rec.train_loss = loss_sum / static_cast<double>(std::max<std::int64_t>(1, epoch_steps));
      opt.on_epoch(epoch, rec);
    }
  }
  return result;
}

/// Order-sensitive FNV-1a over the raw bytes of all parameters and BN stats.
template <class T>
std::uint64_t parameter_checksum(const ResNet<T>& model, bool include_bn_stats = false) {
  std::uint64_t h = 1469598103934665603ULL;
  auto feed = [&h](const void* p, std::size_t n) {
    const auto* b = static_cast<const unsigned char*>(p);
    for (std::size_t i = 0; i < n; ++i) {
      h ^= b[i];
      h *= 1099511628211ULL;
    }
  };
  for (const auto& p : model.parameters()) feed(p.tensor.data().data(), p.tensor.data().size_bytes());
  if (include_bn_stats) {
    for (const auto& bn : model.bn_layers()) {
      feed(bn->stats.mean.data(), bn->stats.mean.size() * sizeof(T));
      feed(bn->stats.var.data(), bn->stats.var.size() * sizeof(T));
    }
  }
  return h;
}

}  // namespace mixsize
