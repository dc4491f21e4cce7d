#pragma once

#include <cmath>
#include <functional>
#include <vector>

#include "mixsize/ops.hpp"
#include "mixsize/rng.hpp"
#include "mixsize/tensor.hpp"

namespace testing_support {

using mixsize::Shape;
using mixsize::Tensor;

inline Tensor<double> random_tensor(Shape shape, std::uint64_t seed, double scale = 1.0) {
  mixsize::Rng rng(seed);
  Tensor<double> t(std::move(shape));
  for (auto& v : t.data()) v = scale * rng.normal();
  return t;
}

// Random scalar projection <r, y>: turns any op output into a loss whose
// gradient touches every output element.
inline Tensor<double> project(const Tensor<double>& y, std::uint64_t seed) {
  const auto r = random_tensor(Shape{1, y.size()}, seed);
  return mixsize::ops::linear<double>(mixsize::ops::reshape(y, Shape{1, y.size()}), r, std::nullopt);
}

struct GradCheck {
  double rel_error = 0.0;       // ||analytic - numeric|| / max(||analytic||, ||numeric||)
  double max_abs_error = 0.0;
  double numeric_norm = 0.0;
};

// Central differences of loss() with respect to every element of `inputs`,
// compared against one backward pass.
inline GradCheck gradcheck(const std::function<Tensor<double>()>& loss, std::vector<Tensor<double>> inputs,
                           double h = 1e-6) {
  for (auto& x : inputs) {
    x.set_requires_grad(true);
    x.clear_grad();
  }
  {
    mixsize::Tape<double> tape;
    tape.backward(loss());
  }
  double diff2 = 0.0, a2 = 0.0, n2 = 0.0, max_abs = 0.0;
  for (auto& x : inputs) {
    const std::vector<double> analytic = x.has_grad() ? std::vector<double>(x.grad().begin(), x.grad().end())
                                                       : std::vector<double>(static_cast<std::size_t>(x.size()), 0.0);
    for (std::int64_t i = 0; i < x.size(); ++i) {
      const double saved = x[i];
      x[i] = saved + h;
      const double fp = loss().item();
      x[i] = saved - h;
      const double fm = loss().item();
      x[i] = saved;
      const double numeric = (fp - fm) / (2.0 * h);
      const double a = analytic[static_cast<std::size_t>(i)];
      diff2 += (a - numeric) * (a - numeric);
      a2 += a * a;
      n2 += numeric * numeric;
      max_abs = std::max(max_abs, std::abs(a - numeric));
    }
  }
  GradCheck out;
  const double denom = std::max({std::sqrt(a2), std::sqrt(n2), 1e-300});
  out.rel_error = std::sqrt(diff2) / denom;
  out.max_abs_error = max_abs;
  out.numeric_norm = std::sqrt(n2);
  return out;
}

}  // namespace testing_support
