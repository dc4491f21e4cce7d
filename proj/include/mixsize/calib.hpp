#pragma once

#include <functional>
#include <string>

#include "mixsize/error.hpp"
#include "mixsize/model.hpp"

namespace mixsize::calib {

inline constexpr int kDefaultBatches = 200;

/// Clears every layer's running statistics; eval mode fails until recalibrated.
template <class T>
void reset_bn(ResNet<T>& model) {
  for (auto& bn : model.bn_layers()) bn->stats.reset();
}

/// Re-estimates batch-norm statistics for input side `size` from
/// `num_batches` batches drawn from `next_batch`.
///
/// Forward only: no tape, no parameter change. Each layer normalizes with the
/// current batch's statistics (as in training) while its input moments are
/// merged across the whole stream; the stored mean / variance become the exact
/// pooled statistics of everything the layer saw.
template <class T>
void calibrate(ResNet<T>& model, const std::function<Tensor<T>()>& next_batch, int size, int num_batches) {
  if (num_batches < 1) throw ConfigError("calibrate: num_batches must be at least 1");
  if (size < kMinInputSize) throw SizeError("calibrate: size " + std::to_string(size) + " below minimum");
  NoGradGuard<T> no_grad;
  for (auto& bn : model.bn_layers()) bn->stats.begin_capture();
  for (int i = 0; i < num_batches; ++i) {
    auto batch = next_batch();
    if (batch.rank() != 4 || batch.dim(2) != size || batch.dim(3) != size) {
      throw DimensionError("calibrate: batch " + to_string(batch.shape()) + " is not at size " + std::to_string(size));
    }
    model.forward(batch, BnMode::calibrate);
  }
  for (auto& bn : model.bn_layers()) bn->stats.end_capture();
}

}  // namespace mixsize::calib
