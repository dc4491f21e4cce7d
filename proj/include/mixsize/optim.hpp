#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <string>
#include <string_view>
#include <vector>

#include "mixsize/error.hpp"
#include "mixsize/model.hpp"

namespace mixsize::optim {

/// Where the smoothing multiplier enters a momentum step.
enum class SmoothingOrder {
  pre_momentum,   // scale the raw gradient, then accumulate
  post_momentum,  // accumulate the raw gradient, scale the applied step
};

struct SGDConfig {
  double lr = 0.1;
  double momentum = 0.9;
  double weight_decay = 1e-4;  // conv / linear weights only
  bool smoothing = false;
  double alpha = 0.99;
  SmoothingOrder order = SmoothingOrder::pre_momentum;

  void validate() const {
    if (!(lr > 0.0)) throw ConfigError("sgd: lr must be positive");
    if (!(momentum >= 0.0 && momentum < 1.0)) throw ConfigError("sgd: momentum must be in [0,1)");
    if (!(weight_decay >= 0.0)) throw ConfigError("sgd: weight_decay must be non-negative");
    if (!(alpha >= 0.0 && alpha < 1.0)) throw ConfigError("sgd: smoothing alpha must be in [0,1)");
  }
};

/// Running average of the global gradient norm.
struct SmoothedGradState {
  double g_bar = 0.0;
  double alpha = 0.99;
  bool initialized = false;
};

/// Folds g_t into the average and returns the step multiplier g_bar / g_t.
/// The first non-zero norm seeds g_bar exactly. A zero norm leaves the state
/// untouched and yields 1.
inline double update_smoothing(SmoothedGradState& state, double g_t) {
  if (!(g_t >= 0.0)) throw NumericError("gradient norm must be a non-negative finite value");
  if (g_t == 0.0) return 1.0;
  if (!state.initialized) {
    state.g_bar = g_t;
    state.initialized = true;
    return 1.0;
  }
  state.g_bar = state.alpha * state.g_bar + (1.0 - state.alpha) * g_t;
  return state.g_bar / g_t;
}

/// L2 norm of all parameter gradients concatenated, summed in parameter order.
template <class T>
double global_grad_norm(const std::vector<NamedParam<T>>& params) {
  double sq = 0.0;
  for (const auto& p : params) {
    for (auto g : p.tensor.grad()) {
      const auto v = static_cast<double>(g);
      if (!std::isfinite(v)) throw NumericError("non-finite gradient in " + p.name);
      sq += v * v;
    }
  }
  return std::sqrt(sq);
}

struct StepInfo {
  double grad_norm = 0.0;      // g_t
  double smoothed_norm = 0.0;  // g_bar after the update (g_t when smoothing is off)
  double multiplier = 1.0;
};

/// Momentum SGD with optional gradient-norm smoothing:
///   g_eff = m_t * grad + wd * w     (m_t = g_bar_t / g_t, or 1)
///   v     = momentum * v + g_eff
///   w     = w - lr_t * v
template <class T>
class SGD {
 public:
  explicit SGD(SGDConfig cfg) : cfg_(cfg) {
    cfg_.validate();
    state_.alpha = cfg_.alpha;
  }

  StepInfo step(std::vector<NamedParam<T>>& params, double lr_t) {
    if (!(lr_t > 0.0)) throw ConfigError("sgd: lr_t must be positive");
    if (velocity_.empty()) {
      for (const auto& p : params) velocity_.emplace_back(static_cast<std::size_t>(p.tensor.size()), T(0));
    }
    StepInfo info;
    info.grad_norm = global_grad_norm(params);
    info.smoothed_norm = info.grad_norm;
    if (cfg_.smoothing) {
      info.multiplier = update_smoothing(state_, info.grad_norm);
      info.smoothed_norm = state_.initialized ? state_.g_bar : info.grad_norm;
    }
    const T pre = cfg_.order == SmoothingOrder::pre_momentum ? static_cast<T>(info.multiplier) : T(1);
    const T post = cfg_.order == SmoothingOrder::post_momentum ? static_cast<T>(info.multiplier) : T(1);
    const T mom = static_cast<T>(cfg_.momentum);
    const T lr = static_cast<T>(lr_t);
    for (std::size_t i = 0; i < params.size(); ++i) {
      auto& p = params[i];
      auto w = p.tensor.data();
      auto g = p.tensor.grad();
      auto& v = velocity_[i];
      const T wd = p.decay ? static_cast<T>(cfg_.weight_decay) : T(0);
      for (std::size_t j = 0; j < w.size(); ++j) {
        const T grad = g.empty() ? T(0) : g[j];
        v[j] = mom * v[j] + pre * grad + wd * w[j];
        w[j] -= lr * post * v[j];
        if (!std::isfinite(static_cast<double>(w[j]))) {
          throw NumericError("non-finite update of " + p.name + " at step " + std::to_string(steps_));
        }
      }
    }
    ++steps_;
    return info;
  }

  const SGDConfig& config() const { return cfg_; }
  const SmoothedGradState& smoothing_state() const { return state_; }
  std::int64_t steps() const { return steps_; }

 private:
  SGDConfig cfg_;
  SmoothedGradState state_;
  std::vector<std::vector<T>> velocity_;
  std::int64_t steps_ = 0;
};

enum class LrSchedule { constant, step_decay, cosine };

inline LrSchedule parse_lr_schedule(std::string_view s) {
  if (s == "constant") return LrSchedule::constant;
  if (s == "step" || s == "step_decay") return LrSchedule::step_decay;
  if (s == "cosine") return LrSchedule::cosine;
  throw ConfigError("unknown lr schedule '" + std::string(s) + "'");
}

inline std::string_view to_string(LrSchedule s) {
  switch (s) {
    case LrSchedule::constant: return "constant";
    case LrSchedule::step_decay: return "step";
    case LrSchedule::cosine: return "cosine";
  }
  return "?";
}

/// Learning rate for a (possibly fractional) epoch.
inline double lr_schedule(LrSchedule kind, double base_lr, double epoch, int total_epochs,
                          const std::vector<int>& milestones = {}, double gamma = 0.1) {
  switch (kind) {
    case LrSchedule::constant:
      return base_lr;
    case LrSchedule::step_decay: {
      double lr = base_lr;
      for (int m : milestones)
        if (epoch >= m) lr *= gamma;
      return lr;
    }
    case LrSchedule::cosine:
      return base_lr * 0.5 * (1.0 + std::cos(std::numbers::pi * epoch / static_cast<double>(total_epochs)));
  }
  return base_lr;
}

}  // namespace mixsize::optim
