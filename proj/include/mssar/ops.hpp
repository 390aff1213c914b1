#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "mssar/detail/gemm.hpp"
#include "mssar/tape.hpp"
#include "mssar/tensor.hpp"

// Differentiable operators. Every op takes an optional tape as its first
// argument; passing nullptr (or inputs that need no gradient) runs the plain
// forward computation without recording anything.

namespace mssar {

enum class Mode { train, eval };

// ---------------------------------------------------------------------------
// conv2d

namespace detail {

struct ConvGeometry {
  std::size_t cin, h, w, k, stride, pad, ho, wo;
  std::size_t rows() const noexcept { return cin * k * k; }
  std::size_t cols() const noexcept { return ho * wo; }
  bool direct() const noexcept { return k == 1 && stride == 1 && pad == 0; }
};

template <typename T>
void im2col(const T* img, const ConvGeometry& g, T* cols) {
  const std::size_t P = g.cols();
  for (std::size_t ci = 0; ci < g.cin; ++ci) {
    const T* plane = img + ci * g.h * g.w;
    for (std::size_t kh = 0; kh < g.k; ++kh) {
      for (std::size_t kw = 0; kw < g.k; ++kw) {
        T* row = cols + ((ci * g.k + kh) * g.k + kw) * P;
        for (std::size_t oh = 0; oh < g.ho; ++oh) {
          const std::ptrdiff_t ih =
              static_cast<std::ptrdiff_t>(oh * g.stride + kh) - static_cast<std::ptrdiff_t>(g.pad);
          T* dst = row + oh * g.wo;
          if (ih < 0 || ih >= static_cast<std::ptrdiff_t>(g.h)) {
            std::fill(dst, dst + g.wo, T{0});
            continue;
          }
          const T* src = plane + static_cast<std::size_t>(ih) * g.w;
          for (std::size_t ow = 0; ow < g.wo; ++ow) {
            const std::ptrdiff_t iw = static_cast<std::ptrdiff_t>(ow * g.stride + kw) -
                                      static_cast<std::ptrdiff_t>(g.pad);
            dst[ow] = (iw < 0 || iw >= static_cast<std::ptrdiff_t>(g.w))
                          ? T{0}
                          : src[static_cast<std::size_t>(iw)];
          }
        }
      }
    }
  }
}

// Adjoint of im2col: scatters (accumulates) columns back onto the image.
template <typename T>
void col2im(const T* cols, const ConvGeometry& g, T* img) {
  const std::size_t P = g.cols();
  for (std::size_t ci = 0; ci < g.cin; ++ci) {
    T* plane = img + ci * g.h * g.w;
    for (std::size_t kh = 0; kh < g.k; ++kh) {
      for (std::size_t kw = 0; kw < g.k; ++kw) {
        const T* row = cols + ((ci * g.k + kh) * g.k + kw) * P;
        for (std::size_t oh = 0; oh < g.ho; ++oh) {
          const std::ptrdiff_t ih =
              static_cast<std::ptrdiff_t>(oh * g.stride + kh) - static_cast<std::ptrdiff_t>(g.pad);
          if (ih < 0 || ih >= static_cast<std::ptrdiff_t>(g.h)) continue;
          T* dst = plane + static_cast<std::size_t>(ih) * g.w;
          const T* src = row + oh * g.wo;
          for (std::size_t ow = 0; ow < g.wo; ++ow) {
            const std::ptrdiff_t iw = static_cast<std::ptrdiff_t>(ow * g.stride + kw) -
                                      static_cast<std::ptrdiff_t>(g.pad);
            if (iw >= 0 && iw < static_cast<std::ptrdiff_t>(g.w))
              dst[static_cast<std::size_t>(iw)] += src[ow];
          }
        }
      }
    }
  }
}

}  // namespace detail

/// Output spatial size of a convolution or pooling window.
inline std::size_t conv_output_size(std::size_t in, std::size_t k, std::size_t stride,
                                    std::size_t pad) {
  return (in + 2 * pad - k) / stride + 1;
}

/// 2-D cross-correlation without bias. `kernel` is shaped Dout x Din x k x k.
template <typename T>
TensorPtr<T> conv2d(Tape<T>* tape, const TensorPtr<T>& x, const TensorPtr<T>& kernel,
                    std::size_t stride = 1, std::size_t pad = 0) {
  const Shape xs = x->shape();
  const Shape ks = kernel->shape();
  if (ks.c != xs.c || ks.h != ks.w) {
    throw ShapeError("conv2d: input " + xs.str() + " incompatible with kernel " + ks.str());
  }
  if (ks.h % 2 == 0) throw ShapeError("conv2d: kernel size must be odd, kernel " + ks.str());
  if (stride == 0) throw std::invalid_argument("conv2d: stride must be positive");
  if (xs.h + 2 * pad < ks.h || xs.w + 2 * pad < ks.w) {
    throw ShapeError("conv2d: kernel " + ks.str() + " larger than padded input " + xs.str());
  }
  const detail::ConvGeometry g{xs.c,
                               xs.h,
                               xs.w,
                               ks.h,
                               stride,
                               pad,
                               conv_output_size(xs.h, ks.h, stride, pad),
                               conv_output_size(xs.w, ks.w, stride, pad)};
  const std::size_t dout = ks.n;
  const std::size_t R = g.rows();
  const std::size_t P = g.cols();

  auto out = make_tensor<T>({xs.n, dout, g.ho, g.wo});
  std::vector<T> cols(g.direct() ? 0 : R * P);
  const T* w = kernel->data().data();
  for (std::size_t n = 0; n < xs.n; ++n) {
    const T* img = x->data().data() + n * xs.image();
    const T* colp = img;
    if (!g.direct()) {
      detail::im2col(img, g, cols.data());
      colp = cols.data();
    }
    detail::gemm_nn(dout, P, R, w, colp, out->data().data() + n * dout * P);
  }

  if (detail::tracking(tape, x, kernel)) {
    out->set_requires_grad(true);
    Tensor<T>* o = out.get();
    tape->record("conv2d", {x, kernel}, out, [x, kernel, o, g, dout, R, P]() {
      const Shape s = x->shape();
      const T* gout = o->grad().data();
      const T* w = kernel->data().data();
      std::vector<T> cols(g.direct() ? 0 : R * P);
      std::vector<T> dcols(g.direct() ? 0 : R * P);
      T* dw = kernel->requires_grad() ? kernel->grad().data() : nullptr;
      T* dx = x->requires_grad() ? x->grad().data() : nullptr;
      for (std::size_t n = 0; n < s.n; ++n) {
        const T* gn = gout + n * dout * P;
        if (dw) {
          const T* img = x->data().data() + n * s.image();
          const T* colp = img;
          if (!g.direct()) {
            detail::im2col(img, g, cols.data());
            colp = cols.data();
          }
          detail::gemm_nt(dout, R, P, gn, colp, dw);
        }
        if (dx) {
          T* dimg = dx + n * s.image();
          if (g.direct()) {
            detail::gemm_tn(R, P, dout, w, gn, dimg);
          } else {
            std::fill(dcols.begin(), dcols.end(), T{0});
            detail::gemm_tn(R, P, dout, w, gn, dcols.data());
            detail::col2im(dcols.data(), g, dimg);
          }
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Elementwise activations

/// max(0, x); the subgradient at exactly 0 is 0.
template <typename T>
TensorPtr<T> relu(Tape<T>* tape, const TensorPtr<T>& x) {
  auto out = make_tensor<T>(x->shape());
  auto xs = x->data();
  auto ys = out->data();
  for (std::size_t i = 0; i < xs.size(); ++i) ys[i] = xs[i] > T{0} ? xs[i] : T{0};
  if (detail::tracking(tape, x)) {
    out->set_requires_grad(true);
    Tensor<T>* o = out.get();
    tape->record("relu", {x}, out, [x, o]() {
      auto g = o->grad();
      auto xv = x->data();
      auto dx = x->grad();
      for (std::size_t i = 0; i < g.size(); ++i)
        if (xv[i] > T{0}) dx[i] += g[i];
    });
  }
  return out;
}

template <typename T>
T sigmoid_scalar(T v) {
  if (v >= T{0}) return T{1} / (T{1} + std::exp(-v));
  const T e = std::exp(v);
  return e / (T{1} + e);
}

template <typename T>
TensorPtr<T> sigmoid(Tape<T>* tape, const TensorPtr<T>& x) {
  auto out = make_tensor<T>(x->shape());
  auto xs = x->data();
  auto ys = out->data();
  for (std::size_t i = 0; i < xs.size(); ++i) ys[i] = sigmoid_scalar(xs[i]);
  if (detail::tracking(tape, x)) {
    out->set_requires_grad(true);
    Tensor<T>* o = out.get();
    tape->record("sigmoid", {x}, out, [x, o]() {
      auto g = o->grad();
      auto y = o->data();
      auto dx = x->grad();
      for (std::size_t i = 0; i < g.size(); ++i) dx[i] += g[i] * y[i] * (T{1} - y[i]);
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Batch normalization

/// Per-channel affine parameters plus running statistics for eval mode.
template <typename T>
struct BatchNorm {
  std::size_t channels = 0;
  TensorPtr<T> gamma;
  TensorPtr<T> beta;
  TensorPtr<T> running_mean;
  TensorPtr<T> running_var;
  T momentum = T(0.1);
  T eps = T(1e-5);

  BatchNorm() = default;
  explicit BatchNorm(std::size_t c)
      : channels(c),
        gamma(make_leaf<T>({1, c, 1, 1}, T{1})),
        beta(make_leaf<T>({1, c, 1, 1}, T{0})),
        running_mean(make_tensor<T>({1, c, 1, 1}, T{0})),
        running_var(make_tensor<T>({1, c, 1, 1}, T{1})) {}
};

/// Normalizes each channel over the batch and spatial axes (train) or with the
/// running statistics (eval), then applies gamma/beta. Train mode updates the
/// running statistics by exponential moving average.
template <typename T>
TensorPtr<T> batchnorm(Tape<T>* tape, const TensorPtr<T>& x, BatchNorm<T>& bn, Mode mode) {
  const Shape s = x->shape();
  if (s.c != bn.channels) {
    throw ShapeError("batchnorm: input " + s.str() + " has " + std::to_string(s.c) +
                     " channels, expected " + std::to_string(bn.channels));
  }
  const std::size_t C = s.c, HW = s.plane(), M = s.n * HW;
  auto out = make_tensor<T>(s);
  std::vector<T> xhat(x->size());
  std::vector<T> invstd(C);
  auto xv = x->data();
  auto yv = out->data();
  auto gam = bn.gamma->data();
  auto bet = bn.beta->data();

  for (std::size_t c = 0; c < C; ++c) {
    T mean, var;
    if (mode == Mode::train) {
      T sum{0};
      for (std::size_t n = 0; n < s.n; ++n) {
        const T* p = xv.data() + (n * C + c) * HW;
        for (std::size_t i = 0; i < HW; ++i) sum += p[i];
      }
      mean = sum / static_cast<T>(M);
      T sq{0};
      for (std::size_t n = 0; n < s.n; ++n) {
        const T* p = xv.data() + (n * C + c) * HW;
        for (std::size_t i = 0; i < HW; ++i) {
          const T d = p[i] - mean;
          sq += d * d;
        }
      }
      var = sq / static_cast<T>(M);
      const T unbiased = M > 1 ? sq / static_cast<T>(M - 1) : var;
      auto rm = bn.running_mean->data();
      auto rv = bn.running_var->data();
      rm[c] = (T{1} - bn.momentum) * rm[c] + bn.momentum * mean;
      rv[c] = (T{1} - bn.momentum) * rv[c] + bn.momentum * unbiased;
    } else {
      mean = bn.running_mean->data()[c];
      var = bn.running_var->data()[c];
    }
    invstd[c] = T{1} / std::sqrt(var + bn.eps);
    for (std::size_t n = 0; n < s.n; ++n) {
      const std::size_t off = (n * C + c) * HW;
      for (std::size_t i = 0; i < HW; ++i) {
        const T xh = (xv[off + i] - mean) * invstd[c];
        xhat[off + i] = xh;
        yv[off + i] = gam[c] * xh + bet[c];
      }
    }
  }

  if (detail::tracking(tape, x, bn.gamma, bn.beta)) {
    out->set_requires_grad(true);
    Tensor<T>* o = out.get();
    TensorPtr<T> gamma = bn.gamma, beta = bn.beta;
    tape->record("batchnorm", {x, gamma, beta}, out,
                 [x, gamma, beta, o, xhat = std::move(xhat), invstd = std::move(invstd), s, mode]() {
                   const std::size_t C = s.c, HW = s.plane();
                   const T M = static_cast<T>(s.n * HW);
                   auto g = o->grad();
                   auto gam = gamma->data();
                   T* dx = x->requires_grad() ? x->grad().data() : nullptr;
                   T* dg = gamma->requires_grad() ? gamma->grad().data() : nullptr;
                   T* db = beta->requires_grad() ? beta->grad().data() : nullptr;
                   for (std::size_t c = 0; c < C; ++c) {
                     T sum_g{0}, sum_gx{0};
                     for (std::size_t n = 0; n < s.n; ++n) {
                       const std::size_t off = (n * C + c) * HW;
                       for (std::size_t i = 0; i < HW; ++i) {
                         sum_g += g[off + i];
                         sum_gx += g[off + i] * xhat[off + i];
                       }
                     }
                     if (dg) dg[c] += sum_gx;
                     if (db) db[c] += sum_g;
                     if (!dx) continue;
                     const T k = gam[c] * invstd[c];
                     for (std::size_t n = 0; n < s.n; ++n) {
                       const std::size_t off = (n * C + c) * HW;
                       for (std::size_t i = 0; i < HW; ++i) {
                         if (mode == Mode::train) {
                           dx[off + i] += k * (g[off + i] - sum_g / M - xhat[off + i] * sum_gx / M);
                         } else {
                           dx[off + i] += k * g[off + i];
                         }
                       }
                     }
                   }
                 });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Fully connected

/// y[n] = W x[n] (+ b). Input is flattened per sample; `weights` is shaped
/// Dout x Din x 1 x 1 and `bias` (optional) 1 x Dout x 1 x 1.
template <typename T>
TensorPtr<T> fully_connected(Tape<T>* tape, const TensorPtr<T>& x, const TensorPtr<T>& weights,
                             const TensorPtr<T>& bias = nullptr) {
  const Shape xs = x->shape();
  const Shape ws = weights->shape();
  const std::size_t din = xs.image();
  const std::size_t dout = ws.n;
  if (ws.image() != din) {
    throw ShapeError("fully_connected: input " + xs.str() + " (" + std::to_string(din) +
                     " features) incompatible with weights " + ws.str());
  }
  if (bias && bias->size() != dout) {
    throw ShapeError("fully_connected: bias " + bias->shape().str() + " does not match " +
                     std::to_string(dout) + " outputs");
  }
  auto out = make_tensor<T>({xs.n, dout, 1, 1});
  detail::gemm_nt(xs.n, dout, din, x->data().data(), weights->data().data(), out->data().data());
  if (bias) {
    auto b = bias->data();
    auto y = out->data();
    for (std::size_t n = 0; n < xs.n; ++n)
      for (std::size_t o = 0; o < dout; ++o) y[n * dout + o] += b[o];
  }
  if (detail::tracking(tape, x, weights, bias)) {
    out->set_requires_grad(true);
    Tensor<T>* o = out.get();
    std::vector<TensorPtr<T>> inputs{x, weights};
    if (bias) inputs.push_back(bias);
    tape->record("fully_connected", std::move(inputs), out, [x, weights, bias, o, din, dout]() {
      const std::size_t N = x->shape().n;
      const T* g = o->grad().data();
      if (x->requires_grad())
        detail::gemm_nn(N, din, dout, g, weights->data().data(), x->grad().data());
      if (weights->requires_grad())
        detail::gemm_tn(dout, din, N, g, x->data().data(), weights->grad().data());
      if (bias && bias->requires_grad()) {
        auto db = bias->grad();
        for (std::size_t n = 0; n < N; ++n)
          for (std::size_t k = 0; k < dout; ++k) db[k] += g[n * dout + k];
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Elementwise arithmetic and structural ops

template <typename T>
TensorPtr<T> mul(Tape<T>* tape, const TensorPtr<T>& a, const TensorPtr<T>& b) {
  require_same_shape(a->shape(), b->shape(), "mul");
  auto out = make_tensor<T>(a->shape());
  auto av = a->data(), bv = b->data();
  auto y = out->data();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = av[i] * bv[i];
  if (detail::tracking(tape, a, b)) {
    out->set_requires_grad(true);
    Tensor<T>* o = out.get();
    tape->record("mul", {a, b}, out, [a, b, o]() {
      auto g = o->grad();
      if (a->requires_grad()) {
        auto da = a->grad();
        auto bv = b->data();
        for (std::size_t i = 0; i < g.size(); ++i) da[i] += g[i] * bv[i];
      }
      if (b->requires_grad()) {
        auto db = b->grad();
        auto av = a->data();
        for (std::size_t i = 0; i < g.size(); ++i) db[i] += g[i] * av[i];
      }
    });
  }
  return out;
}

template <typename T>
TensorPtr<T> add(Tape<T>* tape, const TensorPtr<T>& a, const TensorPtr<T>& b) {
  require_same_shape(a->shape(), b->shape(), "add");
  auto out = make_tensor<T>(a->shape());
  auto av = a->data(), bv = b->data();
  auto y = out->data();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = av[i] + bv[i];
  if (detail::tracking(tape, a, b)) {
    out->set_requires_grad(true);
    Tensor<T>* o = out.get();
    tape->record("add", {a, b}, out, [a, b, o]() {
      auto g = o->grad();
      if (a->requires_grad()) detail::accumulate(*a, std::span<const T>(g));
      if (b->requires_grad()) detail::accumulate(*b, std::span<const T>(g));
    });
  }
  return out;
}

template <typename T>
TensorPtr<T> scale(Tape<T>* tape, const TensorPtr<T>& x, T factor) {
  auto out = make_tensor<T>(x->shape());
  auto xv = x->data();
  auto y = out->data();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = xv[i] * factor;
  if (detail::tracking(tape, x)) {
    out->set_requires_grad(true);
    Tensor<T>* o = out.get();
    tape->record("scale", {x}, out, [x, o, factor]() {
      auto g = o->grad();
      auto dx = x->grad();
      for (std::size_t i = 0; i < g.size(); ++i) dx[i] += g[i] * factor;
    });
  }
  return out;
}

/// Concatenates along the channel axis; all other axes must match.
template <typename T>
TensorPtr<T> concat_channels(Tape<T>* tape, const TensorPtr<T>& a, const TensorPtr<T>& b) {
  const Shape as = a->shape(), bs = b->shape();
  if (as.n != bs.n || as.h != bs.h || as.w != bs.w) {
    throw ShapeError("concat_channels: shape mismatch " + as.str() + " vs " + bs.str());
  }
  const std::size_t HW = as.plane();
  const std::size_t ca = as.c * HW, cb = bs.c * HW;
  auto out = make_tensor<T>({as.n, as.c + bs.c, as.h, as.w});
  auto y = out->data();
  for (std::size_t n = 0; n < as.n; ++n) {
    std::copy_n(a->data().data() + n * ca, ca, y.data() + n * (ca + cb));
    std::copy_n(b->data().data() + n * cb, cb, y.data() + n * (ca + cb) + ca);
  }
  if (detail::tracking(tape, a, b)) {
    out->set_requires_grad(true);
    Tensor<T>* o = out.get();
    tape->record("concat_channels", {a, b}, out, [a, b, o, ca, cb]() {
      auto g = o->grad();
      const std::size_t N = a->shape().n;
      for (std::size_t n = 0; n < N; ++n) {
        const T* src = g.data() + n * (ca + cb);
        if (a->requires_grad()) {
          T* da = a->grad().data() + n * ca;
          for (std::size_t i = 0; i < ca; ++i) da[i] += src[i];
        }
        if (b->requires_grad()) {
          T* db = b->grad().data() + n * cb;
          for (std::size_t i = 0; i < cb; ++i) db[i] += src[ca + i];
        }
      }
    });
  }
  return out;
}

/// Spatial mean per channel: N x C x H x W -> N x C x 1 x 1.
template <typename T>
TensorPtr<T> global_avg_pool(Tape<T>* tape, const TensorPtr<T>& x) {
  const Shape s = x->shape();
  const std::size_t HW = s.plane();
  auto out = make_tensor<T>({s.n, s.c, 1, 1});
  auto xv = x->data();
  auto y = out->data();
  for (std::size_t nc = 0; nc < s.n * s.c; ++nc) {
    T sum{0};
    for (std::size_t i = 0; i < HW; ++i) sum += xv[nc * HW + i];
    y[nc] = sum / static_cast<T>(HW);
  }
  if (detail::tracking(tape, x)) {
    out->set_requires_grad(true);
    Tensor<T>* o = out.get();
    tape->record("global_avg_pool", {x}, out, [x, o, HW]() {
      auto g = o->grad();
      auto dx = x->grad();
      const T inv = T{1} / static_cast<T>(HW);
      for (std::size_t nc = 0; nc < g.size(); ++nc)
        for (std::size_t i = 0; i < HW; ++i) dx[nc * HW + i] += g[nc] * inv;
    });
  }
  return out;
}

/// 2x2 average pooling with stride 2; spatial dims must be even.
template <typename T>
TensorPtr<T> avg_pool2(Tape<T>* tape, const TensorPtr<T>& x) {
  const Shape s = x->shape();
  if (s.h % 2 != 0 || s.w % 2 != 0) throw ShapeError("avg_pool2: odd spatial size " + s.str());
  const std::size_t ho = s.h / 2, wo = s.w / 2;
  auto out = make_tensor<T>({s.n, s.c, ho, wo});
  auto xv = x->data();
  auto y = out->data();
  for (std::size_t nc = 0; nc < s.n * s.c; ++nc) {
    const T* p = xv.data() + nc * s.plane();
    T* q = y.data() + nc * ho * wo;
    for (std::size_t i = 0; i < ho; ++i)
      for (std::size_t j = 0; j < wo; ++j) {
        const T* r = p + 2 * i * s.w + 2 * j;
        q[i * wo + j] = (r[0] + r[1] + r[s.w] + r[s.w + 1]) * T(0.25);
      }
  }
  if (detail::tracking(tape, x)) {
    out->set_requires_grad(true);
    Tensor<T>* o = out.get();
    tape->record("avg_pool2", {x}, out, [x, o, s, ho, wo]() {
      auto g = o->grad();
      auto dx = x->grad();
      for (std::size_t nc = 0; nc < s.n * s.c; ++nc) {
        T* p = dx.data() + nc * s.plane();
        const T* q = g.data() + nc * ho * wo;
        for (std::size_t i = 0; i < ho; ++i)
          for (std::size_t j = 0; j < wo; ++j) {
            const T v = q[i * wo + j] * T(0.25);
            T* r = p + 2 * i * s.w + 2 * j;
            r[0] += v;
            r[1] += v;
            r[s.w] += v;
            r[s.w + 1] += v;
          }
      }
    });
  }
  return out;
}

/// Max pooling over k x k windows; padded positions never win.
template <typename T>
TensorPtr<T> max_pool(Tape<T>* tape, const TensorPtr<T>& x, std::size_t k, std::size_t stride,
                      std::size_t pad) {
  const Shape s = x->shape();
  if (k == 0 || stride == 0 || s.h + 2 * pad < k || s.w + 2 * pad < k || pad >= k) {
    throw ShapeError("max_pool: invalid window for input " + s.str());
  }
  const std::size_t ho = conv_output_size(s.h, k, stride, pad);
  const std::size_t wo = conv_output_size(s.w, k, stride, pad);
  auto out = make_tensor<T>({s.n, s.c, ho, wo});
  std::vector<std::size_t> argmax(out->size());
  auto xv = x->data();
  auto y = out->data();
  for (std::size_t nc = 0; nc < s.n * s.c; ++nc) {
    const std::size_t base = nc * s.plane();
    for (std::size_t i = 0; i < ho; ++i)
      for (std::size_t j = 0; j < wo; ++j) {
        T best = -std::numeric_limits<T>::infinity();
        std::size_t best_idx = base;
        for (std::size_t a = 0; a < k; ++a) {
          const std::ptrdiff_t ih = static_cast<std::ptrdiff_t>(i * stride + a) -
                                    static_cast<std::ptrdiff_t>(pad);
          if (ih < 0 || ih >= static_cast<std::ptrdiff_t>(s.h)) continue;
          for (std::size_t b = 0; b < k; ++b) {
            const std::ptrdiff_t iw = static_cast<std::ptrdiff_t>(j * stride + b) -
                                      static_cast<std::ptrdiff_t>(pad);
            if (iw < 0 || iw >= static_cast<std::ptrdiff_t>(s.w)) continue;
            const std::size_t idx =
                base + static_cast<std::size_t>(ih) * s.w + static_cast<std::size_t>(iw);
            if (xv[idx] > best) {
              best = xv[idx];
              best_idx = idx;
            }
          }
        }
        const std::size_t o = (nc * ho + i) * wo + j;
        y[o] = best;
        argmax[o] = best_idx;
      }
  }
  if (detail::tracking(tape, x)) {
    out->set_requires_grad(true);
    Tensor<T>* o = out.get();
    tape->record("max_pool", {x}, out, [x, o, argmax = std::move(argmax)]() {
      auto g = o->grad();
      auto dx = x->grad();
      for (std::size_t i = 0; i < g.size(); ++i) dx[argmax[i]] += g[i];
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Reductions and losses

template <typename T>
TensorPtr<T> sum(Tape<T>* tape, const TensorPtr<T>& x) {
  T acc{0};
  for (T v : x->data()) acc += v;
  auto out = make_tensor<T>({1, 1, 1, 1}, acc);
  if (detail::tracking(tape, x)) {
    out->set_requires_grad(true);
    Tensor<T>* o = out.get();
    tape->record("sum", {x}, out, [x, o]() {
      const T g = o->grad()[0];
      for (T& d : x->grad()) d += g;
    });
  }
  return out;
}

/// Sum of x weighted elementwise by a constant tensor; used to build
/// scalar probes of vector-valued ops.
template <typename T>
TensorPtr<T> weighted_sum(Tape<T>* tape, const TensorPtr<T>& x, const Tensor<T>& weights) {
  require_same_shape(x->shape(), weights.shape(), "weighted_sum");
  T acc{0};
  auto xv = x->data();
  auto wv = weights.data();
  for (std::size_t i = 0; i < xv.size(); ++i) acc += xv[i] * wv[i];
  auto out = make_tensor<T>({1, 1, 1, 1}, acc);
  if (detail::tracking(tape, x)) {
    out->set_requires_grad(true);
    Tensor<T>* o = out.get();
    tape->record("weighted_sum", {x}, out, [x, o, weights]() {
      const T g = o->grad()[0];
      auto dx = x->grad();
      auto wv = weights.data();
      for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += g * wv[i];
    });
  }
  return out;
}

/// Per-sample softmax cross-entropy, -log softmax(logits)[label].
template <typename T>
std::vector<T> cross_entropy_per_sample(const Tensor<T>& logits, std::span<const int> labels) {
  const std::size_t N = logits.shape().n, C = logits.shape().image();
  std::vector<T> losses(N);
  auto z = logits.data();
  for (std::size_t n = 0; n < N; ++n) {
    const T* row = z.data() + n * C;
    const T mx = *std::max_element(row, row + C);
    T se{0};
    for (std::size_t c = 0; c < C; ++c) se += std::exp(row[c] - mx);
    losses[n] = std::log(se) + mx - row[static_cast<std::size_t>(labels[n])];
  }
  return losses;
}

/// Mean softmax cross-entropy over the batch; logits are N x C (x 1 x 1).
template <typename T>
TensorPtr<T> softmax_cross_entropy(Tape<T>* tape, const TensorPtr<T>& logits,
                                   std::span<const int> labels) {
  const std::size_t N = logits->shape().n, C = logits->shape().image();
  if (labels.size() != N) {
    throw ShapeError("softmax_cross_entropy: " + std::to_string(labels.size()) +
                     " labels for logits " + logits->shape().str());
  }
  for (int l : labels)
    if (l < 0 || static_cast<std::size_t>(l) >= C)
      throw std::invalid_argument("softmax_cross_entropy: label " + std::to_string(l) +
                                  " out of range for " + std::to_string(C) + " classes");
  const auto losses = cross_entropy_per_sample(*logits, labels);
  T total{0};
  for (T l : losses) total += l;
  auto out = make_tensor<T>({1, 1, 1, 1}, total / static_cast<T>(N));
  if (detail::tracking(tape, logits)) {
    out->set_requires_grad(true);
    Tensor<T>* o = out.get();
    std::vector<int> lab(labels.begin(), labels.end());
    tape->record("softmax_cross_entropy", {logits}, out, [logits, o, lab = std::move(lab), N, C]() {
      const T g = o->grad()[0] / static_cast<T>(N);
      auto z = logits->data();
      auto dz = logits->grad();
      for (std::size_t n = 0; n < N; ++n) {
        const T* row = z.data() + n * C;
        const T mx = *std::max_element(row, row + C);
        T se{0};
        for (std::size_t c = 0; c < C; ++c) se += std::exp(row[c] - mx);
        for (std::size_t c = 0; c < C; ++c) {
          T p = std::exp(row[c] - mx) / se;
          if (static_cast<int>(c) == lab[n]) p -= T{1};
          dz[n * C + c] += g * p;
        }
      }
    });
  }
  return out;
}

}  // namespace mssar
