#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "mixsize/bn_stats.hpp"
#include "mixsize/error.hpp"
#include "mixsize/limits.hpp"
#include "mixsize/ops.hpp"
#include "mixsize/rng.hpp"
#include "mixsize/tensor.hpp"

namespace mixsize {

using ops::BnMode;

/// CIFAR-style residual network: depth = 6n + 2, three stages of n basic
/// blocks with strides (1, 2, 2) and widths (w, 2w, 4w), then global average
/// pooling and a linear classifier.
struct ResNetConfig {
  int depth = 20;
  int base_width = 16;
  int num_classes = 10;
  int in_channels = 3;

  int blocks_per_stage() const { return (depth - 2) / 6; }

  void validate() const {
    if (depth < 8 || (depth - 2) % 6 != 0) {
      throw ConfigError("resnet depth must be 6n+2 with n >= 1, got " + std::to_string(depth));
    }
    if (base_width < 1) throw ConfigError("resnet base_width must be positive");
    if (num_classes < 2) throw ConfigError("resnet num_classes must be at least 2");
    if (in_channels < 1) throw ConfigError("resnet in_channels must be positive");
  }

  friend bool operator==(const ResNetConfig&, const ResNetConfig&) = default;
};

template <class T>
struct NamedParam {
  std::string name;
  Tensor<T> tensor;
  bool decay = false;  // L2 regularization applies (conv / linear weights)
};

template <class T>
class Conv2d {
 public:
  Conv2d(std::int64_t cin, std::int64_t cout, int kernel, int stride, int pad)
      : weight(Shape{cout, cin, kernel, kernel}), stride(stride), pad(pad) {
    weight.set_requires_grad(true);
  }

  Tensor<T> forward(const Tensor<T>& x) const { return ops::conv2d<T>(x, weight, std::nullopt, stride, pad); }

  std::int64_t out_channels() const { return weight.dim(0); }
  std::int64_t in_channels() const { return weight.dim(1); }
  int kernel() const { return static_cast<int>(weight.dim(2)); }

  // Multiply-accumulates x2 for an input of h x w; updates h, w to the output extent.
  double flops(std::int64_t& h, std::int64_t& w) const {
    h = ops::conv_output_extent(h, kernel(), stride, pad);
    w = ops::conv_output_extent(w, kernel(), stride, pad);
    return 2.0 * static_cast<double>(in_channels() * kernel() * kernel() * out_channels() * h * w);
  }

  Tensor<T> weight;
  int stride;
  int pad;
};

template <class T>
class BatchNorm2d {
 public:
  BatchNorm2d(std::string name, std::int64_t channels)
      : name(std::move(name)), gamma(Shape{channels}, T(1)), beta(Shape{channels}, T(0)), stats(channels) {
    gamma.set_requires_grad(true);
    beta.set_requires_grad(true);
  }

  Tensor<T> forward(const Tensor<T>& x, BnMode mode) {
    if (on_input) on_input(x);
    return ops::batchnorm2d<T>(x, gamma, beta, stats, mode, options);
  }

  std::string name;
  Tensor<T> gamma;
  Tensor<T> beta;
  BNStats<T> stats;
  ops::BnOptions options;
  // Observer of every input this layer normalizes (used by analyses and tests).
  std::function<void(const Tensor<T>&)> on_input;
};

template <class T>
class Linear {
 public:
  Linear(std::int64_t in, std::int64_t out) : weight(Shape{out, in}), bias(Shape{out}) {
    weight.set_requires_grad(true);
    bias.set_requires_grad(true);
  }

  Tensor<T> forward(const Tensor<T>& x) const { return ops::linear<T>(x, weight, bias); }

  double flops() const { return 2.0 * static_cast<double>(weight.dim(0) * weight.dim(1)); }

  Tensor<T> weight;
  Tensor<T> bias;
};

/// Residual network over Tensor<T>; see ResNetConfig for the layout.
///
/// Layers live on the heap so the model can be moved without invalidating the
/// named parameter / batch-norm index.
template <class T>
class ResNet {
 public:
  ResNet(const ResNetConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
    cfg_.validate();
    build();
    initialize(seed);
  }

  ResNet(ResNet&&) noexcept = default;
  ResNet& operator=(ResNet&&) noexcept = default;
  ResNet(const ResNet&) = delete;
  ResNet& operator=(const ResNet&) = delete;

  const ResNetConfig& config() const { return cfg_; }

  /// Logits [N, num_classes] for a batch [N, C, S, S'] with min(S, S') >= 8.
  Tensor<T> forward(const Tensor<T>& x, BnMode mode) {
    if (x.rank() != 4) throw DimensionError("resnet forward expects NCHW input, got " + to_string(x.shape()));
    if (x.dim(2) < kMinInputSize || x.dim(3) < kMinInputSize) {
      throw SizeError("resnet forward: spatial size " + std::to_string(x.dim(2)) + "x" +
                      std::to_string(x.dim(3)) + " below minimum " + std::to_string(kMinInputSize));
    }
    auto h = ops::relu(stem_bn_->forward(stem_->forward(x), mode));
    for (auto& b : blocks_) {
      auto branch = ops::relu(b.bn1->forward(b.conv1->forward(h), mode));
      branch = b.bn2->forward(b.conv2->forward(branch), mode);
      auto shortcut = b.down ? b.down_bn->forward(b.down->forward(h), mode) : h;
      h = ops::relu(ops::add(branch, shortcut));
    }
    return fc_->forward(ops::flatten(ops::global_avg_pool(h)));
  }

  std::vector<NamedParam<T>>& parameters() { return params_; }
  const std::vector<NamedParam<T>>& parameters() const { return params_; }

  std::int64_t parameter_count() const {
    std::int64_t n = 0;
    for (const auto& p : params_) n += p.tensor.size();
    return n;
  }

  // Batch-norm layers in forward order.
  const std::vector<std::unique_ptr<BatchNorm2d<T>>>& bn_layers() const { return bns_; }

  BatchNorm2d<T>& bn(const std::string& name) {
    for (auto& b : bns_)
      if (b->name == name) return *b;
    throw DomainError("no batch-norm layer named " + name);
  }

  void zero_grad() {
    for (auto& p : params_) p.tensor.zero_grad();
  }

  /// Deep copy: parameters, running statistics and BN options.
  ResNet clone() const {
    ResNet copy(cfg_);
    for (std::size_t i = 0; i < params_.size(); ++i) {
      copy.params_[i].tensor.values() = params_[i].tensor.values();
    }
    for (std::size_t i = 0; i < bns_.size(); ++i) {
      copy.bns_[i]->stats = bns_[i]->stats;
      copy.bns_[i]->options = bns_[i]->options;
    }
    return copy;
  }

  /// Flop count (2 x multiply-accumulates) of conv and linear layers at input size S x S.
  double flops(std::int64_t size) const {
    if (size < kMinInputSize) throw SizeError("model flops: size below minimum");
    std::int64_t h = size, w = size;
    double total = stem_->flops(h, w);
    for (const auto& b : blocks_) {
      std::int64_t sh = h, sw = w;
      if (b.down) total += b.down->flops(sh, sw);
      total += b.conv1->flops(h, w);
      total += b.conv2->flops(h, w);
    }
    return total + fc_->flops();
  }

 private:
  struct Block {
    Conv2d<T>* conv1;
    BatchNorm2d<T>* bn1;
    Conv2d<T>* conv2;
    BatchNorm2d<T>* bn2;
    Conv2d<T>* down = nullptr;
    BatchNorm2d<T>* down_bn = nullptr;
  };

  explicit ResNet(const ResNetConfig& cfg) : cfg_(cfg) { build(); }

  Conv2d<T>* add_conv(const std::string& name, std::int64_t cin, std::int64_t cout, int k, int stride) {
    convs_.push_back(std::make_unique<Conv2d<T>>(cin, cout, k, stride, k / 2));
    params_.push_back({name + ".weight", convs_.back()->weight, true});
    return convs_.back().get();
  }

  BatchNorm2d<T>* add_bn(const std::string& name, std::int64_t channels) {
    bns_.push_back(std::make_unique<BatchNorm2d<T>>(name, channels));
    params_.push_back({name + ".gamma", bns_.back()->gamma, false});
    params_.push_back({name + ".beta", bns_.back()->beta, false});
    return bns_.back().get();
  }

  void build() {
    const std::int64_t w0 = cfg_.base_width;
    stem_ = add_conv("stem.conv", cfg_.in_channels, w0, 3, 1);
    stem_bn_ = add_bn("stem.bn", w0);
    std::int64_t cin = w0;
    for (int s = 0; s < 3; ++s) {
      const std::int64_t width = w0 << s;
      for (int i = 0; i < cfg_.blocks_per_stage(); ++i) {
        const int stride = (s > 0 && i == 0) ? 2 : 1;
        const std::string p = "stage" + std::to_string(s + 1) + ".block" + std::to_string(i + 1);
        Block b{};
        b.conv1 = add_conv(p + ".conv1", cin, width, 3, stride);
        b.bn1 = add_bn(p + ".bn1", width);
        b.conv2 = add_conv(p + ".conv2", width, width, 3, 1);
        b.bn2 = add_bn(p + ".bn2", width);
        if (stride != 1 || cin != width) {
          b.down = add_conv(p + ".shortcut.conv", cin, width, 1, stride);
          b.down_bn = add_bn(p + ".shortcut.bn", width);
        }
        blocks_.push_back(b);
        cin = width;
      }
    }
    fc_ = std::make_unique<Linear<T>>(cin, cfg_.num_classes);
    params_.push_back({"fc.weight", fc_->weight, true});
    params_.push_back({"fc.bias", fc_->bias, false});
  }

  // He-normal convs, unit / zero BN affine with the last BN of each residual
  // branch zeroed, fan-in scaled classifier, zero biases.
  void initialize(std::uint64_t seed) {
    Rng rng(seed);
    for (auto& c : convs_) {
      const double std_dev = std::sqrt(2.0 / static_cast<double>(c->in_channels() * c->kernel() * c->kernel()));
      for (auto& v : c->weight.data()) v = static_cast<T>(std_dev * rng.normal());
    }
    for (auto& b : blocks_) std::fill(b.bn2->gamma.data().begin(), b.bn2->gamma.data().end(), T(0));
    const double fc_std = 1.0 / std::sqrt(static_cast<double>(fc_->weight.dim(1)));
    for (auto& v : fc_->weight.data()) v = static_cast<T>(fc_std * rng.normal());
  }

  ResNetConfig cfg_;
  std::vector<std::unique_ptr<Conv2d<T>>> convs_;
  std::vector<std::unique_ptr<BatchNorm2d<T>>> bns_;
  std::unique_ptr<Linear<T>> fc_;
  Conv2d<T>* stem_ = nullptr;
  BatchNorm2d<T>* stem_bn_ = nullptr;
  std::vector<Block> blocks_;
  std::vector<NamedParam<T>> params_;
};

template <class T>
ResNet<T> build_resnet(const ResNetConfig& cfg, std::uint64_t seed) {
  return ResNet<T>(cfg, seed);
}

template <class T>
double model_flops(const ResNet<T>& model, std::int64_t size) {
  return model.flops(size);
}

// Flops of a single k x k convolution producing an ho x wo map.
inline double conv_flops(std::int64_t cin, std::int64_t cout, std::int64_t k, std::int64_t ho,
                         std::int64_t wo) {
  return 2.0 * static_cast<double>(cin * k * k * cout * ho * wo);
}

}  // namespace mixsize
