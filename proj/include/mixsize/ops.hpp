#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "mixsize/bn_stats.hpp"
#include "mixsize/error.hpp"
#include "mixsize/tensor.hpp"

// Differentiable ops over Tensor<T>. Feature maps are NCHW. Every op records
// its backward on the active Tape when any input requires a gradient.
namespace mixsize::ops {

namespace detail {

template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

inline void expect_rank(const Shape& s, std::size_t rank, const char* op) {
  if (s.size() != rank) {
    throw DimensionError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                         to_string(s));
  }
}

inline void expect_spatial(const Shape& s, const char* op) {
  if (s.size() < 2) throw DimensionError(std::string(op) + ": need at least 2 dims, got " + to_string(s));
}

template <class T>
Tensor<T> finish(Tensor<T> out, const char* op) {
  mixsize::detail::check_finite(out, op);
  return out;
}

// Geometry of a 2-d convolution over one batch.
struct ConvGeom {
  std::int64_t n, cin, h, w, cout, kh, kw, stride, pad, ho, wo;
  std::int64_t k() const { return cin * kh * kw; }
  std::int64_t p() const { return ho * wo; }
};

// Output columns [lo, hi) whose input column ox*stride - pad + k lies inside [0, w).
inline std::pair<std::int64_t, std::int64_t> valid_range(std::int64_t k, std::int64_t stride, std::int64_t pad,
                                                         std::int64_t w, std::int64_t wo) {
  const std::int64_t off = k - pad;
  const std::int64_t lo = off >= 0 ? 0 : (-off + stride - 1) / stride;
  const std::int64_t hi = off >= w ? 0 : std::min(wo, (w - 1 - off) / stride + 1);
  return {std::min(lo, wo), std::max(hi, std::min(lo, wo))};
}

// Unfold samples [n0, n0+nc) into cols[K, nc*P].
template <class T>
void im2col(const T* x, const ConvGeom& g, std::int64_t n0, std::int64_t nc, T* cols) {
  const std::int64_t P = g.p();
  const std::int64_t width = nc * P;
  for (std::int64_t ci = 0; ci < g.cin; ++ci) {
    for (std::int64_t ky = 0; ky < g.kh; ++ky) {
      const auto [oy_lo, oy_hi] = valid_range(ky, g.stride, g.pad, g.h, g.ho);
      for (std::int64_t kx = 0; kx < g.kw; ++kx) {
        const auto [ox_lo, ox_hi] = valid_range(kx, g.stride, g.pad, g.w, g.wo);
        const std::int64_t off_x = kx - g.pad;
        T* row = cols + ((ci * g.kh + ky) * g.kw + kx) * width;
        for (std::int64_t j = 0; j < nc; ++j) {
          const T* plane = x + ((n0 + j) * g.cin + ci) * g.h * g.w;
          T* dst = row + j * P;
          std::fill(dst, dst + oy_lo * g.wo, T(0));
          for (std::int64_t oy = oy_lo; oy < oy_hi; ++oy) {
            const T* src = plane + (oy * g.stride - g.pad + ky) * g.w + off_x;
            T* d = dst + oy * g.wo;
            std::fill(d, d + ox_lo, T(0));
            if (g.stride == 1) {
              std::copy(src + ox_lo, src + ox_hi, d + ox_lo);
            } else {
              for (std::int64_t ox = ox_lo; ox < ox_hi; ++ox) d[ox] = src[ox * g.stride];
            }
            std::fill(d + ox_hi, d + g.wo, T(0));
          }
          std::fill(dst + oy_hi * g.wo, dst + P, T(0));
        }
      }
    }
  }
}

// Adjoint of im2col: scatter-add cols[K, nc*P] into dx.
template <class T>
void col2im(const T* cols, const ConvGeom& g, std::int64_t n0, std::int64_t nc, T* dx) {
  const std::int64_t P = g.p();
  const std::int64_t width = nc * P;
  for (std::int64_t ci = 0; ci < g.cin; ++ci) {
    for (std::int64_t ky = 0; ky < g.kh; ++ky) {
      const auto [oy_lo, oy_hi] = valid_range(ky, g.stride, g.pad, g.h, g.ho);
      for (std::int64_t kx = 0; kx < g.kw; ++kx) {
        const auto [ox_lo, ox_hi] = valid_range(kx, g.stride, g.pad, g.w, g.wo);
        const std::int64_t off_x = kx - g.pad;
        const T* row = cols + ((ci * g.kh + ky) * g.kw + kx) * width;
        for (std::int64_t j = 0; j < nc; ++j) {
          T* plane = dx + ((n0 + j) * g.cin + ci) * g.h * g.w;
          const T* src = row + j * P;
          for (std::int64_t oy = oy_lo; oy < oy_hi; ++oy) {
            T* d = plane + (oy * g.stride - g.pad + ky) * g.w + off_x;
            const T* s = src + oy * g.wo;
            if (g.stride == 1) {
              for (std::int64_t ox = ox_lo; ox < ox_hi; ++ox) d[ox] += s[ox];
            } else {
              for (std::int64_t ox = ox_lo; ox < ox_hi; ++ox) d[ox * g.stride] += s[ox];
            }
          }
        }
      }
    }
  }
}

// Samples per GEMM chunk, keeping the unfolded matrix cache-sized (~128K elements).
inline std::int64_t conv_chunk(const ConvGeom& g) {
  const std::int64_t per_sample = std::max<std::int64_t>(1, g.k() * g.p());
  return std::clamp<std::int64_t>((std::int64_t{1} << 17) / per_sample, 1, g.n);
}

// Per-axis bilinear sampling table under the pixel-center convention.
struct ResizeAxis {
  std::vector<std::int64_t> lo, hi;
  std::vector<double> frac;

  ResizeAxis(std::int64_t in, std::int64_t out) : lo(out), hi(out), frac(out) {
    const double ratio = static_cast<double>(in) / static_cast<double>(out);
    for (std::int64_t i = 0; i < out; ++i) {
      double src = (static_cast<double>(i) + 0.5) * ratio - 0.5;
      src = std::clamp(src, 0.0, static_cast<double>(in - 1));
      const auto i0 = static_cast<std::int64_t>(std::floor(src));
      lo[i] = i0;
      hi[i] = std::min(i0 + 1, in - 1);
      frac[i] = src - static_cast<double>(i0);
    }
  }
};

}  // namespace detail

inline std::int64_t conv_output_extent(std::int64_t in, std::int64_t k, std::int64_t stride,
                                       std::int64_t pad) {
  return (in + 2 * pad - k) / stride + 1;
}

/// 2-d cross-correlation with zero padding. x:[N,Cin,H,W], w:[Cout,Cin,kH,kW].
template <class T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, const std::optional<Tensor<T>>& bias,
                 int stride, int pad) {
  detail::expect_rank(x.shape(), 4, "conv2d input");
  detail::expect_rank(w.shape(), 4, "conv2d weight");
  if (stride < 1) throw DomainError("conv2d: stride must be positive");
  if (pad < 0) throw DomainError("conv2d: pad must be non-negative");
  if (x.dim(1) != w.dim(1)) {
    throw DimensionError("conv2d: input channels " + std::to_string(x.dim(1)) +
                         " do not match weight " + to_string(w.shape()));
  }
  if (bias && (bias->rank() != 1 || bias->dim(0) != w.dim(0))) {
    throw DimensionError("conv2d: bias shape " + to_string(bias->shape()));
  }
  detail::ConvGeom g{x.dim(0), x.dim(1), x.dim(2), x.dim(3), w.dim(0), w.dim(2), w.dim(3),
                     stride,   pad,      0,        0};
  if (g.kh > g.h + 2 * g.pad || g.kw > g.w + 2 * g.pad) {
    throw DimensionError("conv2d: kernel larger than padded input " + to_string(x.shape()));
  }
  g.ho = conv_output_extent(g.h, g.kh, g.stride, g.pad);
  g.wo = conv_output_extent(g.w, g.kw, g.stride, g.pad);

  using Mat = detail::RowMat<T>;
  const std::int64_t K = g.k(), P = g.p();
  Tensor<T> out(Shape{g.n, g.cout, g.ho, g.wo});
  const Eigen::Map<const Mat> wm(w.data().data(), g.cout, K);
  const std::int64_t chunk = detail::conv_chunk(g);
  std::vector<T> cols;
  Mat prod;
  for (std::int64_t n0 = 0; n0 < g.n; n0 += chunk) {
    const std::int64_t nc = std::min(chunk, g.n - n0);
    cols.resize(static_cast<std::size_t>(K * nc * P));
    detail::im2col(x.data().data(), g, n0, nc, cols.data());
    const Eigen::Map<const Mat> cm(cols.data(), K, nc * P);
    prod.noalias() = wm * cm;
    for (std::int64_t j = 0; j < nc; ++j) {
      for (std::int64_t co = 0; co < g.cout; ++co) {
        T* dst = out.data().data() + ((n0 + j) * g.cout + co) * P;
        const T* src = prod.data() + co * nc * P + j * P;
        const T b = bias ? (*bias)[co] : T(0);
        for (std::int64_t p = 0; p < P; ++p) dst[p] = src[p] + b;
      }
    }
  }

  if (mixsize::detail::recording<T>({&x, &w, bias ? &*bias : nullptr})) {
    out.set_requires_grad(true);
    Tape<T>::active()->record(out, [x, w, bias, out, g]() mutable {
      const std::int64_t K = g.k(), P = g.p();
      const std::int64_t chunk = detail::conv_chunk(g);
      auto dy = out.grad();
      const Eigen::Map<const Mat> wm(w.data().data(), g.cout, K);
      std::vector<T> cols, dcols;
      Mat dym;
      T* dx = x.requires_grad() ? x.grad_buffer().data() : nullptr;
      T* dw = w.requires_grad() ? w.grad_buffer().data() : nullptr;
      for (std::int64_t n0 = 0; n0 < g.n; n0 += chunk) {
        const std::int64_t nc = std::min(chunk, g.n - n0);
        dym.resize(g.cout, nc * P);
        for (std::int64_t j = 0; j < nc; ++j) {
          for (std::int64_t co = 0; co < g.cout; ++co) {
            const T* src = dy.data() + ((n0 + j) * g.cout + co) * P;
            std::copy(src, src + P, dym.data() + co * nc * P + j * P);
          }
        }
        if (dw != nullptr) {
          cols.resize(static_cast<std::size_t>(K * nc * P));
          detail::im2col(x.data().data(), g, n0, nc, cols.data());
          const Eigen::Map<const Mat> cm(cols.data(), K, nc * P);
          Eigen::Map<Mat> dwm(dw, g.cout, K);
          dwm.noalias() += dym * cm.transpose();
        }
        if (dx != nullptr) {
          dcols.resize(static_cast<std::size_t>(K * nc * P));
          Eigen::Map<Mat> dcm(dcols.data(), K, nc * P);
          dcm.noalias() = wm.transpose() * dym;
          detail::col2im(dcols.data(), g, n0, nc, dx);
        }
      }
      if (bias && bias->requires_grad()) {
        auto db = bias->grad_buffer();
        for (std::int64_t n = 0; n < g.n; ++n) {
          for (std::int64_t co = 0; co < g.cout; ++co) {
            const T* src = dy.data() + (n * g.cout + co) * P;
            T s = 0;
            for (std::int64_t p = 0; p < P; ++p) s += src[p];
            db[co] += s;
          }
        }
      }
    });
  }
  return detail::finish(std::move(out), "conv2d");
}

enum class BnMode {
  train,      // batch statistics, EMA update of running stats
  eval,       // stored running stats
  calibrate,  // batch statistics, stats aggregated into the layer's capture buffer
};

struct BnOptions {
  double momentum = 0.1;
  double eps = 1e-5;
};

/// Per-channel batch normalization over (N,H,W).
template <class T>
Tensor<T> batchnorm2d(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                      BNStats<T>& stats, BnMode mode, BnOptions opt = {}) {
  detail::expect_rank(x.shape(), 4, "batchnorm2d");
  const std::int64_t N = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
  if (gamma.size() != C || beta.size() != C || stats.channels() != C) {
    throw DimensionError("batchnorm2d: channel count mismatch for input " + to_string(x.shape()));
  }
  if (!(opt.eps > 0.0)) throw DomainError("batchnorm2d: eps must be positive");
  const std::int64_t M = N * HW;

  std::vector<T> mean(static_cast<std::size_t>(C)), invstd(static_cast<std::size_t>(C));
  if (mode == BnMode::eval) {
    if (!stats.initialized) {
      throw CalibrationRequired("batchnorm2d: running statistics are not initialized");
    }
    for (std::int64_t c = 0; c < C; ++c) {
      mean[c] = stats.mean[c];
      invstd[c] = static_cast<T>(1.0 / std::sqrt(static_cast<double>(stats.var[c]) + opt.eps));
    }
  } else {
    if (M < 2) throw DomainError("batchnorm2d: batch statistics need at least 2 values per channel");
    std::vector<Moments> batch(static_cast<std::size_t>(C));
    for (std::int64_t c = 0; c < C; ++c) {
      Moments acc;
      for (std::int64_t n = 0; n < N; ++n) {
        acc.merge(Moments::of<T>(x.data().subspan(static_cast<std::size_t>((n * C + c) * HW),
                                                  static_cast<std::size_t>(HW))));
      }
      batch[c] = acc;
      mean[c] = static_cast<T>(acc.mean);
      invstd[c] = static_cast<T>(1.0 / std::sqrt(acc.variance() + opt.eps));
    }
    if (mode == BnMode::train) {
      stats.ema_update(batch, opt.momentum);
    } else {
      if (!stats.capturing()) stats.begin_capture();
      stats.capture(batch);
    }
  }

  Tensor<T> out(x.shape());
  for (std::int64_t n = 0; n < N; ++n) {
    for (std::int64_t c = 0; c < C; ++c) {
      const T* src = x.data().data() + (n * C + c) * HW;
      T* dst = out.data().data() + (n * C + c) * HW;
      const T scale = gamma[c] * invstd[c];
      const T shift = beta[c] - mean[c] * scale;
      for (std::int64_t i = 0; i < HW; ++i) dst[i] = src[i] * scale + shift;
    }
  }

  if (mixsize::detail::recording<T>({&x, &gamma, &beta})) {
    out.set_requires_grad(true);
    const bool batch_stats = mode != BnMode::eval;
    Tape<T>::active()->record(
        out, [x, gamma, beta, out, mean, invstd, batch_stats, N, C, HW, M]() mutable {
          auto dy = out.grad();
          T* dx = x.requires_grad() ? x.grad_buffer().data() : nullptr;
          T* dg = gamma.requires_grad() ? gamma.grad_buffer().data() : nullptr;
          T* db = beta.requires_grad() ? beta.grad_buffer().data() : nullptr;
          for (std::int64_t c = 0; c < C; ++c) {
            T sum_dy = 0, sum_dy_xhat = 0;
            for (std::int64_t n = 0; n < N; ++n) {
              const T* xs = x.data().data() + (n * C + c) * HW;
              const T* g = dy.data() + (n * C + c) * HW;
              for (std::int64_t i = 0; i < HW; ++i) {
                sum_dy += g[i];
                sum_dy_xhat += g[i] * (xs[i] - mean[c]) * invstd[c];
              }
            }
            if (dg != nullptr) dg[c] += sum_dy_xhat;
            if (db != nullptr) db[c] += sum_dy;
            if (dx == nullptr) continue;
            const T k = gamma[c] * invstd[c];
            const T inv_m = T(1) / static_cast<T>(M);
            for (std::int64_t n = 0; n < N; ++n) {
              const T* xs = x.data().data() + (n * C + c) * HW;
              const T* g = dy.data() + (n * C + c) * HW;
              T* d = dx + (n * C + c) * HW;
              for (std::int64_t i = 0; i < HW; ++i) {
                if (batch_stats) {
                  const T xhat = (xs[i] - mean[c]) * invstd[c];
                  d[i] += k * (g[i] - inv_m * sum_dy - xhat * inv_m * sum_dy_xhat);
                } else {
                  d[i] += k * g[i];
                }
              }
            }
          }
        });
  }
  return detail::finish(std::move(out), "batchnorm2d");
}

/// Bilinear resize of the last two dims to out_h x out_w.
///
/// Pixel-center alignment: output index i samples the source at
/// (i + 0.5) * in / out - 0.5, clamped to [0, in - 1]. Resizing to the input
/// extent is the exact identity.
template <class T>
Tensor<T> bilinear_resize(const Tensor<T>& x, std::int64_t out_h, std::int64_t out_w) {
  detail::expect_spatial(x.shape(), "bilinear_resize");
  if (out_h <= 0 || out_w <= 0) throw DomainError("bilinear_resize: output size must be positive");
  const std::int64_t H = x.dim(-2), W = x.dim(-1);
  if (H < 1 || W < 1) throw DimensionError("bilinear_resize: empty input " + to_string(x.shape()));
  const std::int64_t planes = x.size() / (H * W);
  Shape shape = x.shape();
  shape[shape.size() - 2] = out_h;
  shape[shape.size() - 1] = out_w;
  Tensor<T> out(shape);
  const detail::ResizeAxis ay(H, out_h), ax(W, out_w);
  for (std::int64_t p = 0; p < planes; ++p) {
    const T* src = x.data().data() + p * H * W;
    T* dst = out.data().data() + p * out_h * out_w;
    for (std::int64_t i = 0; i < out_h; ++i) {
      const T fy = static_cast<T>(ay.frac[i]);
      const T* r0 = src + ay.lo[i] * W;
      const T* r1 = src + ay.hi[i] * W;
      for (std::int64_t j = 0; j < out_w; ++j) {
        const T fx = static_cast<T>(ax.frac[j]);
        const T top = (T(1) - fx) * r0[ax.lo[j]] + fx * r0[ax.hi[j]];
        const T bot = (T(1) - fx) * r1[ax.lo[j]] + fx * r1[ax.hi[j]];
        dst[i * out_w + j] = (T(1) - fy) * top + fy * bot;
      }
    }
  }
  if (mixsize::detail::recording<T>({&x})) {
    out.set_requires_grad(true);
    Tape<T>::active()->record(out, [x, out, ay, ax, planes, H, W, out_h, out_w]() mutable {
      auto dy = out.grad();
      T* dx = x.grad_buffer().data();
      for (std::int64_t p = 0; p < planes; ++p) {
        const T* g = dy.data() + p * out_h * out_w;
        T* d = dx + p * H * W;
        for (std::int64_t i = 0; i < out_h; ++i) {
          const T fy = static_cast<T>(ay.frac[i]);
          T* r0 = d + ay.lo[i] * W;
          T* r1 = d + ay.hi[i] * W;
          for (std::int64_t j = 0; j < out_w; ++j) {
            const T fx = static_cast<T>(ax.frac[j]);
            const T v = g[i * out_w + j];
            r0[ax.lo[j]] += (T(1) - fy) * (T(1) - fx) * v;
            r0[ax.hi[j]] += (T(1) - fy) * fx * v;
            r1[ax.lo[j]] += fy * (T(1) - fx) * v;
            r1[ax.hi[j]] += fy * fx * v;
          }
        }
      }
    });
  }
  return detail::finish(std::move(out), "bilinear_resize");
}

template <class T>
Tensor<T> bilinear_resize(const Tensor<T>& x, std::int64_t size) {
  return bilinear_resize(x, size, size);
}

/// Mean softmax cross-entropy over the batch. logits:[N,K].
template <class T>
Tensor<T> softmax_cross_entropy(const Tensor<T>& logits, std::span<const int> labels) {
  detail::expect_rank(logits.shape(), 2, "softmax_cross_entropy");
  const std::int64_t N = logits.dim(0), K = logits.dim(1);
  if (static_cast<std::int64_t>(labels.size()) != N) {
    throw DimensionError("softmax_cross_entropy: " + std::to_string(labels.size()) +
                         " labels for batch of " + std::to_string(N));
  }
  std::vector<T> probs(static_cast<std::size_t>(N * K));
  double total = 0.0;
  for (std::int64_t n = 0; n < N; ++n) {
    const int y = labels[static_cast<std::size_t>(n)];
    if (y < 0 || y >= K) {
      throw DomainError("softmax_cross_entropy: label " + std::to_string(y) + " outside [0," +
                        std::to_string(K) + ")");
    }
    const T* z = logits.data().data() + n * K;
    const T zmax = *std::max_element(z, z + K);
    double sum = 0.0;
    for (std::int64_t k = 0; k < K; ++k) sum += std::exp(static_cast<double>(z[k] - zmax));
    const double lse = static_cast<double>(zmax) + std::log(sum);
    for (std::int64_t k = 0; k < K; ++k) {
      probs[n * K + k] = static_cast<T>(std::exp(static_cast<double>(z[k]) - lse));
    }
    total += lse - static_cast<double>(z[y]);
  }
  auto out = Tensor<T>::scalar(static_cast<T>(total / static_cast<double>(N)));
  if (mixsize::detail::recording<T>({&logits})) {
    out.set_requires_grad(true);
    std::vector<int> ys(labels.begin(), labels.end());
    Tape<T>::active()->record(out, [logits, out, probs = std::move(probs), ys, N, K]() mutable {
      const T g = out.grad()[0] / static_cast<T>(N);
      auto d = logits.grad_buffer();
      for (std::int64_t n = 0; n < N; ++n) {
        for (std::int64_t k = 0; k < K; ++k) {
          d[n * K + k] += g * (probs[n * K + k] - (k == ys[n] ? T(1) : T(0)));
        }
      }
    });
  }
  return detail::finish(std::move(out), "softmax_cross_entropy");
}

template <class T>
Tensor<T> relu(const Tensor<T>& x) {
  Tensor<T> out(x.shape());
  auto src = x.data();
  auto dst = out.data();
  for (std::size_t i = 0; i < src.size(); ++i) dst[i] = src[i] > T(0) ? src[i] : T(0);
  if (mixsize::detail::recording<T>({&x})) {
    out.set_requires_grad(true);
    Tape<T>::active()->record(out, [x, out]() mutable {
      auto dy = out.grad();
      auto dx = x.grad_buffer();
      auto xs = x.data();
      for (std::size_t i = 0; i < xs.size(); ++i) {
        if (xs[i] > T(0)) dx[i] += dy[i];
      }
    });
  }
  return detail::finish(std::move(out), "relu");
}

/// Fully connected layer: x:[N,in], w:[out,in], b:[out] -> [N,out].
template <class T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const std::optional<Tensor<T>>& bias) {
  detail::expect_rank(x.shape(), 2, "linear input");
  detail::expect_rank(w.shape(), 2, "linear weight");
  if (x.dim(1) != w.dim(1)) {
    throw DimensionError("linear: input " + to_string(x.shape()) + " vs weight " + to_string(w.shape()));
  }
  if (bias && bias->size() != w.dim(0)) throw DimensionError("linear: bias shape " + to_string(bias->shape()));
  using Mat = detail::RowMat<T>;
  const std::int64_t N = x.dim(0), I = x.dim(1), O = w.dim(0);
  Tensor<T> out(Shape{N, O});
  {
    const Eigen::Map<const Mat> xm(x.data().data(), N, I);
    const Eigen::Map<const Mat> wm(w.data().data(), O, I);
    Eigen::Map<Mat> om(out.data().data(), N, O);
    om.noalias() = xm * wm.transpose();
    if (bias) {
      for (std::int64_t n = 0; n < N; ++n)
        for (std::int64_t o = 0; o < O; ++o) om(n, o) += (*bias)[o];
    }
  }
  if (mixsize::detail::recording<T>({&x, &w, bias ? &*bias : nullptr})) {
    out.set_requires_grad(true);
    Tape<T>::active()->record(out, [x, w, bias, out, N, I, O]() mutable {
      const Eigen::Map<const Mat> dy(out.grad().data(), N, O);
      if (x.requires_grad()) {
        Eigen::Map<Mat> dx(x.grad_buffer().data(), N, I);
        dx.noalias() += dy * Eigen::Map<const Mat>(w.data().data(), O, I);
      }
      if (w.requires_grad()) {
        Eigen::Map<Mat> dw(w.grad_buffer().data(), O, I);
        dw.noalias() += dy.transpose() * Eigen::Map<const Mat>(x.data().data(), N, I);
      }
      if (bias && bias->requires_grad()) {
        auto db = bias->grad_buffer();
        for (std::int64_t n = 0; n < N; ++n)
          for (std::int64_t o = 0; o < O; ++o) db[o] += dy(n, o);
      }
    });
  }
  return detail::finish(std::move(out), "linear");
}

/// Max pooling without padding; ties resolve to the first maximum.
template <class T>
Tensor<T> max_pool2d(const Tensor<T>& x, int kernel, int stride) {
  detail::expect_rank(x.shape(), 4, "max_pool2d");
  if (kernel < 1 || stride < 1) throw DomainError("max_pool2d: kernel and stride must be positive");
  const std::int64_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  if (kernel > H || kernel > W) throw DimensionError("max_pool2d: kernel larger than input");
  const std::int64_t Ho = conv_output_extent(H, kernel, stride, 0);
  const std::int64_t Wo = conv_output_extent(W, kernel, stride, 0);
  Tensor<T> out(Shape{N, C, Ho, Wo});
  std::vector<std::int64_t> argmax(static_cast<std::size_t>(out.size()));
  for (std::int64_t plane = 0; plane < N * C; ++plane) {
    const T* src = x.data().data() + plane * H * W;
    for (std::int64_t oy = 0; oy < Ho; ++oy) {
      for (std::int64_t ox = 0; ox < Wo; ++ox) {
        std::int64_t best = (oy * stride) * W + ox * stride;
        for (int ky = 0; ky < kernel; ++ky) {
          for (int kx = 0; kx < kernel; ++kx) {
            const std::int64_t idx = (oy * stride + ky) * W + ox * stride + kx;
            if (src[idx] > src[best]) best = idx;
          }
        }
        const std::int64_t o = (plane * Ho + oy) * Wo + ox;
        out[o] = src[best];
        argmax[static_cast<std::size_t>(o)] = plane * H * W + best;
      }
    }
  }
  if (mixsize::detail::recording<T>({&x})) {
    out.set_requires_grad(true);
    Tape<T>::active()->record(out, [x, out, argmax = std::move(argmax)]() mutable {
      auto dy = out.grad();
      auto dx = x.grad_buffer();
      for (std::size_t o = 0; o < argmax.size(); ++o) dx[static_cast<std::size_t>(argmax[o])] += dy[o];
    });
  }
  return detail::finish(std::move(out), "max_pool2d");
}

/// Spatial mean: [N,C,H,W] -> [N,C,1,1] for any H,W >= 1.
template <class T>
Tensor<T> global_avg_pool(const Tensor<T>& x) {
  detail::expect_rank(x.shape(), 4, "global_avg_pool");
  const std::int64_t N = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
  if (HW < 1) throw DimensionError("global_avg_pool: empty spatial extent");
  Tensor<T> out(Shape{N, C, 1, 1});
  for (std::int64_t p = 0; p < N * C; ++p) {
    const T* src = x.data().data() + p * HW;
    T s = 0;
    for (std::int64_t i = 0; i < HW; ++i) s += src[i];
    out[p] = s / static_cast<T>(HW);
  }
  if (mixsize::detail::recording<T>({&x})) {
    out.set_requires_grad(true);
    Tape<T>::active()->record(out, [x, out, N, C, HW]() mutable {
      auto dy = out.grad();
      auto dx = x.grad_buffer();
      for (std::int64_t p = 0; p < N * C; ++p) {
        const T g = dy[p] / static_cast<T>(HW);
        for (std::int64_t i = 0; i < HW; ++i) dx[p * HW + i] += g;
      }
    });
  }
  return detail::finish(std::move(out), "global_avg_pool");
}

/// Same values under a new shape with equal element count.
template <class T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  if (numel(shape) != x.size()) {
    throw DimensionError("reshape: " + to_string(x.shape()) + " -> " + to_string(shape));
  }
  Tensor<T> out(std::move(shape), x.values());
  if (mixsize::detail::recording<T>({&x})) {
    out.set_requires_grad(true);
    Tape<T>::active()->record(out, [x, out]() mutable {
      auto dy = out.grad();
      auto dx = x.grad_buffer();
      for (std::size_t i = 0; i < dy.size(); ++i) dx[i] += dy[i];
    });
  }
  return out;
}

// [N, ...] -> [N, prod(...)]
template <class T>
Tensor<T> flatten(const Tensor<T>& x) {
  return reshape(x, Shape{x.dim(0), x.size() / std::max<std::int64_t>(1, x.dim(0))});
}

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) {
    throw DimensionError("add: " + to_string(a.shape()) + " vs " + to_string(b.shape()));
  }
  Tensor<T> out(a.shape());
  for (std::int64_t i = 0; i < a.size(); ++i) out[i] = a[i] + b[i];
  if (mixsize::detail::recording<T>({&a, &b})) {
    out.set_requires_grad(true);
    Tape<T>::active()->record(out, [a, b, out]() mutable {
      auto dy = out.grad();
      if (a.requires_grad()) {
        auto da = a.grad_buffer();
        for (std::size_t i = 0; i < dy.size(); ++i) da[i] += dy[i];
      }
      if (b.requires_grad()) {
        auto db = b.grad_buffer();
        for (std::size_t i = 0; i < dy.size(); ++i) db[i] += dy[i];
      }
    });
  }
  return detail::finish(std::move(out), "add");
}

template <class T>
Tensor<T> scale(const Tensor<T>& x, T factor) {
  Tensor<T> out(x.shape());
  for (std::int64_t i = 0; i < x.size(); ++i) out[i] = x[i] * factor;
  if (mixsize::detail::recording<T>({&x})) {
    out.set_requires_grad(true);
    Tape<T>::active()->record(out, [x, out, factor]() mutable {
      auto dy = out.grad();
      auto dx = x.grad_buffer();
      for (std::size_t i = 0; i < dy.size(); ++i) dx[i] += factor * dy[i];
    });
  }
  return detail::finish(std::move(out), "scale");
}

// Sum of all elements as a scalar tensor.
template <class T>
Tensor<T> sum(const Tensor<T>& x) {
  T s = 0;
  for (auto v : x.data()) s += v;
  auto out = Tensor<T>::scalar(s);
  if (mixsize::detail::recording<T>({&x})) {
    out.set_requires_grad(true);
    Tape<T>::active()->record(out, [x, out]() mutable {
      const T g = out.grad()[0];
      for (auto& d : x.grad_buffer()) d += g;
    });
  }
  return out;
}

/// Zero padding of `pad` pixels on every side of the last two dims.
template <class T>
Tensor<T> pad(const Tensor<T>& x, int pad) {
  detail::expect_spatial(x.shape(), "pad");
  if (pad < 0) throw DomainError("pad: negative padding");
  const std::int64_t H = x.dim(-2), W = x.dim(-1);
  const std::int64_t Hp = H + 2 * pad, Wp = W + 2 * pad;
  const std::int64_t planes = H * W > 0 ? x.size() / (H * W) : 0;
  Shape shape = x.shape();
  shape[shape.size() - 2] = Hp;
  shape[shape.size() - 1] = Wp;
  Tensor<T> out(shape);
  for (std::int64_t p = 0; p < planes; ++p) {
    for (std::int64_t y = 0; y < H; ++y) {
      const T* src = x.data().data() + (p * H + y) * W;
      std::copy(src, src + W, out.data().data() + (p * Hp + y + pad) * Wp + pad);
    }
  }
  if (mixsize::detail::recording<T>({&x})) {
    out.set_requires_grad(true);
    Tape<T>::active()->record(out, [x, out, planes, H, W, Hp, Wp, pad]() mutable {
      auto dy = out.grad();
      auto dx = x.grad_buffer();
      for (std::int64_t p = 0; p < planes; ++p)
        for (std::int64_t y = 0; y < H; ++y)
          for (std::int64_t xx = 0; xx < W; ++xx)
            dx[(p * H + y) * W + xx] += dy[(p * Hp + y + pad) * Wp + xx + pad];
    });
  }
  return out;
}

/// Window [top, top+height) x [left, left+width) of the last two dims.
template <class T>
Tensor<T> crop(const Tensor<T>& x, std::int64_t top, std::int64_t left, std::int64_t height,
               std::int64_t width) {
  detail::expect_spatial(x.shape(), "crop");
  const std::int64_t H = x.dim(-2), W = x.dim(-1);
  if (top < 0 || left < 0 || height < 1 || width < 1 || top + height > H || left + width > W) {
    throw DomainError("crop: window (" + std::to_string(top) + "," + std::to_string(left) + ") " +
                      std::to_string(height) + "x" + std::to_string(width) + " outside " +
                      to_string(x.shape()));
  }
  const std::int64_t planes = x.size() / (H * W);
  Shape shape = x.shape();
  shape[shape.size() - 2] = height;
  shape[shape.size() - 1] = width;
  Tensor<T> out(shape);
  for (std::int64_t p = 0; p < planes; ++p) {
    for (std::int64_t y = 0; y < height; ++y) {
      const T* src = x.data().data() + (p * H + top + y) * W + left;
      std::copy(src, src + width, out.data().data() + (p * height + y) * width);
    }
  }
  if (mixsize::detail::recording<T>({&x})) {
    out.set_requires_grad(true);
    Tape<T>::active()->record(out, [x, out, planes, H, W, top, left, height, width]() mutable {
      auto dy = out.grad();
      auto dx = x.grad_buffer();
      for (std::int64_t p = 0; p < planes; ++p)
        for (std::int64_t y = 0; y < height; ++y)
          for (std::int64_t xx = 0; xx < width; ++xx)
            dx[(p * H + top + y) * W + left + xx] += dy[(p * height + y) * width + xx];
    });
  }
  return out;
}

/// Mirror the last dim.
template <class T>
Tensor<T> horizontal_flip(const Tensor<T>& x) {
  detail::expect_spatial(x.shape(), "horizontal_flip");
  const std::int64_t W = x.dim(-1);
  const std::int64_t rows = W > 0 ? x.size() / W : 0;
  Tensor<T> out(x.shape());
  for (std::int64_t r = 0; r < rows; ++r)
    for (std::int64_t j = 0; j < W; ++j) out[r * W + j] = x[r * W + (W - 1 - j)];
  if (mixsize::detail::recording<T>({&x})) {
    out.set_requires_grad(true);
    Tape<T>::active()->record(out, [x, out, rows, W]() mutable {
      auto dy = out.grad();
      auto dx = x.grad_buffer();
      for (std::int64_t r = 0; r < rows; ++r)
        for (std::int64_t j = 0; j < W; ++j) dx[r * W + (W - 1 - j)] += dy[r * W + j];
    });
  }
  return out;
}

}  // namespace mixsize::ops
