#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "mixsize/error.hpp"

namespace mixsize {

using Shape = std::vector<std::int64_t>;

inline std::int64_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::int64_t{1}, std::multiplies<>());
}

inline std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

// Global switch for the NaN/Inf check run after every forward op.
inline std::atomic<bool>& debug_checks_flag() {
  static std::atomic<bool> flag{false};
  return flag;
}
inline void set_debug_checks(bool on) { debug_checks_flag() = on; }
inline bool debug_checks() { return debug_checks_flag().load(std::memory_order_relaxed); }

template <class T>
class Tape;

/// Dense row-major N-d array with an optional gradient buffer.
///
/// A Tensor is a shared handle: copies alias the same storage. Values produced
/// by ops are treated as immutable; only parameters are written in place, and
/// only between tape executions. Use clone() for an independent copy.
template <class T>
class Tensor {
 public:
  using value_type = T;

  Tensor() : s_(std::make_shared<Storage>()) {}

  explicit Tensor(Shape shape, T fill = T(0)) : s_(std::make_shared<Storage>()) {
    for (auto e : shape) {
      if (e < 0) throw DimensionError("negative extent in shape " + to_string(shape));
    }
    s_->shape = std::move(shape);
    s_->value.assign(static_cast<std::size_t>(numel(s_->shape)), fill);
  }

  Tensor(Shape shape, std::vector<T> values) : s_(std::make_shared<Storage>()) {
    if (static_cast<std::int64_t>(values.size()) != numel(shape)) {
      throw DimensionError("value count " + std::to_string(values.size()) +
                           " does not match shape " + to_string(shape));
    }
    s_->shape = std::move(shape);
    s_->value = std::move(values);
  }

  static Tensor scalar(T v) { return Tensor(Shape{}, std::vector<T>{v}); }

  const Shape& shape() const { return s_->shape; }
  int rank() const { return static_cast<int>(s_->shape.size()); }
  std::int64_t dim(int i) const { return s_->shape.at(static_cast<std::size_t>(i < 0 ? rank() + i : i)); }
  std::int64_t size() const { return static_cast<std::int64_t>(s_->value.size()); }
  bool empty() const { return s_->value.empty(); }

  std::span<T> data() { return s_->value; }
  std::span<const T> data() const { return s_->value; }
  std::vector<T>& values() { return s_->value; }
  const std::vector<T>& values() const { return s_->value; }

  T& operator[](std::int64_t i) { return s_->value[static_cast<std::size_t>(i)]; }
  const T& operator[](std::int64_t i) const { return s_->value[static_cast<std::size_t>(i)]; }

  // NCHW element access.
  T& at(std::int64_t n, std::int64_t c, std::int64_t h, std::int64_t w) {
    return s_->value[static_cast<std::size_t>(((n * dim(1) + c) * dim(2) + h) * dim(3) + w)];
  }
  const T& at(std::int64_t n, std::int64_t c, std::int64_t h, std::int64_t w) const {
    return s_->value[static_cast<std::size_t>(((n * dim(1) + c) * dim(2) + h) * dim(3) + w)];
  }

  T item() const {
    if (size() != 1) throw DimensionError("item() on tensor of shape " + to_string(shape()));
    return s_->value[0];
  }

  bool requires_grad() const { return s_->requires_grad; }
  Tensor& set_requires_grad(bool on) {
    s_->requires_grad = on;
    return *this;
  }

  bool has_grad() const { return !s_->grad.empty(); }
  std::span<T> grad() { return s_->grad; }
  std::span<const T> grad() const { return s_->grad; }

  // Gradient buffer, allocated as zeros on first use. Callable on const
  // handles: backward closures accumulate into captured inputs.
  std::span<T> grad_buffer() const {
    if (s_->grad.size() != s_->value.size()) s_->grad.assign(s_->value.size(), T(0));
    return s_->grad;
  }
  void zero_grad() { std::fill(s_->grad.begin(), s_->grad.end(), T(0)); }
  void clear_grad() { s_->grad.clear(); }

  // Independent copy of the values; no gradient, not tracked.
  Tensor clone() const { return Tensor(s_->shape, s_->value); }

  bool same_storage(const Tensor& other) const { return s_ == other.s_; }

 private:
  struct Storage {
    Shape shape;
    std::vector<T> value;
    std::vector<T> grad;
    bool requires_grad = false;
  };
  std::shared_ptr<Storage> s_;
};

/// Reverse-mode tape. Constructing a Tape makes it the active recorder for the
/// calling thread until it is destroyed; tapes nest like a stack.
///
/// Ops executed while a tape is active and with at least one input requiring a
/// gradient append one entry each, so entries are in execution (topological)
/// order. backward() visits every entry exactly once in reverse.
template <class T>
class Tape {
 public:
  Tape() : previous_(current()) { current() = this; }
  ~Tape() { current() = previous_; }
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  static Tape* active() { return current(); }

  void record(Tensor<T> output, std::function<void()> backward_fn) {
    entries_.push_back(Entry{std::move(output), std::move(backward_fn)});
  }

  std::size_t size() const { return entries_.size(); }

  /// Populates grads of every tracked leaf reachable from `loss`.
  /// Leaf gradients accumulate across calls; call zero_grad() between steps.
  void backward(Tensor<T> loss) {
    if (loss.size() != 1) {
      throw DomainError("backward() needs a scalar loss, got shape " + to_string(loss.shape()));
    }
    if (!loss.requires_grad()) {
      throw DomainError("backward(): loss was not produced under an active tape");
    }
    for (auto& e : entries_) e.output.clear_grad();
    loss.grad_buffer()[0] = T(1);
    for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) {
      if (!it->output.has_grad()) continue;
      it->backward();
    }
  }

 private:
  struct Entry {
    Tensor<T> output;
    std::function<void()> backward;
  };

  static Tape*& current() {
    thread_local Tape* tape = nullptr;
    return tape;
  }

  std::vector<Entry> entries_;
  Tape* previous_;
};

// Scoped suspension of recording (e.g. for calibration passes).
template <class T>
class NoGradGuard {
 public:
  NoGradGuard() { ++suspended(); }
  ~NoGradGuard() { --suspended(); }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

  static int& suspended() {
    thread_local int depth = 0;
    return depth;
  }
};

/// Backward over the tape active on this thread.
template <class T>
void backward(const Tensor<T>& loss) {
  auto* tape = Tape<T>::active();
  if (tape == nullptr) throw DomainError("backward(): no active tape");
  tape->backward(loss);
}

namespace detail {

template <class T>
bool recording(std::initializer_list<const Tensor<T>*> inputs) {
  if (Tape<T>::active() == nullptr || NoGradGuard<T>::suspended() > 0) return false;
  return std::any_of(inputs.begin(), inputs.end(),
                     [](const Tensor<T>* t) { return t != nullptr && t->requires_grad(); });
}

template <class T>
void check_finite(const Tensor<T>& t, const char* op) {
  if (!debug_checks()) return;
  for (auto v : t.data()) {
    if (!std::isfinite(v)) throw NumericError(std::string("non-finite value produced by ") + op);
  }
}

}  // namespace detail

}  // namespace mixsize
