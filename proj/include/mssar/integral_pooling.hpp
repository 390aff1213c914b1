#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "mssar/tape.hpp"
#include "mssar/tensor.hpp"

namespace mssar {

// ---------------------------------------------------------------------------
// Summed-area table

/// Inclusive 2-D prefix sums of a D x H x W cube:
/// table(d, h, w) = sum of x(d, h', w') over h' <= h, w' <= w.
template <typename T>
class SummedAreaTable {
 public:
  SummedAreaTable(std::span<const T> cube, std::size_t depth, std::size_t height,
                  std::size_t width)
      : d_(depth), h_(height), w_(width), table_(depth * height * width) {
    if (cube.size() != table_.size()) {
      throw ShapeError("SummedAreaTable: cube of " + std::to_string(cube.size()) +
                       " values does not match " + std::to_string(depth) + "x" +
                       std::to_string(height) + "x" + std::to_string(width));
    }
    build(cube);
  }

  std::size_t depth() const noexcept { return d_; }
  std::size_t height() const noexcept { return h_; }
  std::size_t width() const noexcept { return w_; }

  T at(std::size_t d, std::size_t h, std::size_t w) const { return table_[(d * h_ + h) * w_ + w]; }

  /// Sum over rows h1..h2 and columns w1..w2 (inclusive) of channel d.
  T rect_sum(std::size_t d, std::size_t h1, std::size_t h2, std::size_t w1,
             std::size_t w2) const {
    if (d >= d_ || h1 > h2 || w1 > w2 || h2 >= h_ || w2 >= w_) {
      throw std::invalid_argument("rect_sum: invalid rectangle rows " + std::to_string(h1) + ".." +
                                  std::to_string(h2) + " cols " + std::to_string(w1) + ".." +
                                  std::to_string(w2) + " on " + std::to_string(d_) + "x" +
                                  std::to_string(h_) + "x" + std::to_string(w_));
    }
    return rect_sum_unchecked(d, h1, h2, w1, w2);
  }

  T rect_sum_unchecked(std::size_t d, std::size_t h1, std::size_t h2, std::size_t w1,
                       std::size_t w2) const noexcept {
    const T* t = table_.data() + d * h_ * w_;
    T s = t[h2 * w_ + w2];
    if (h1 > 0) s -= t[(h1 - 1) * w_ + w2];
    if (w1 > 0) s -= t[h2 * w_ + (w1 - 1)];
    if (h1 > 0 && w1 > 0) s += t[(h1 - 1) * w_ + (w1 - 1)];
    return s;
  }

 private:
  void build(std::span<const T> cube) {
    for (std::size_t d = 0; d < d_; ++d) {
      const T* x = cube.data() + d * h_ * w_;
      T* t = table_.data() + d * h_ * w_;
      for (std::size_t h = 0; h < h_; ++h) {
        T row{0};
        for (std::size_t w = 0; w < w_; ++w) {
          row += x[h * w_ + w];
          t[h * w_ + w] = h > 0 ? row + t[(h - 1) * w_ + w] : row;
        }
      }
    }
  }

  std::size_t d_, h_, w_;
  std::vector<T> table_;
};

template <typename T>
SummedAreaTable<T> build_sat(std::span<const T> cube, std::size_t depth, std::size_t height,
                             std::size_t width) {
  return SummedAreaTable<T>(cube, depth, height, width);
}

// ---------------------------------------------------------------------------
// Coordinate sets

enum class Strategy { sliding, regional };

inline const char* to_string(Strategy s) { return s == Strategy::sliding ? "sliding" : "regional"; }

/// Inclusive rectangle on the lattice plus its cardinality.
struct Rect {
  std::size_t h1, h2, w1, w2;
  std::size_t count() const noexcept { return (h2 - h1 + 1) * (w2 - w1 + 1); }
  friend bool operator==(const Rect&, const Rect&) = default;
};

namespace detail {
inline std::size_t isqrt(std::size_t v) {
  std::size_t r = 0;
  while ((r + 1) * (r + 1) <= v) ++r;
  return r;
}
}  // namespace detail

/// Coordinate-set geometry for one scale factor K on a width x height lattice.
///
/// Sliding: S(w,h) is the square |w-w'| <= r, |h-h'| <= r clipped to the
/// lattice, with half-width r = floor(sqrt(W*H)/K).
/// Regional: the lattice is cut into a K x K grid with boundaries at
/// round(i*W/K) and round(i*H/K); S(w,h) is the cell containing (w,h).
class CoordinateSetSpec {
 public:
  CoordinateSetSpec(Strategy strategy, std::size_t scale, std::size_t width, std::size_t height)
      : strategy_(strategy), k_(scale), width_(width), height_(height) {
    if (scale == 0) throw std::invalid_argument("CoordinateSetSpec: scale factor K must be >= 1");
    if (width == 0 || height == 0) throw std::invalid_argument("CoordinateSetSpec: empty lattice");
    if (strategy == Strategy::regional && (scale > width || scale > height)) {
      throw std::invalid_argument("CoordinateSetSpec: regional K=" + std::to_string(scale) +
                                  " exceeds lattice " + std::to_string(width) + "x" +
                                  std::to_string(height) + " (cells would be empty)");
    }
    if (strategy == Strategy::sliding) {
      half_width_ = detail::isqrt((width * height) / (scale * scale));
    } else {
      row_bounds_ = bounds(height);
      col_bounds_ = bounds(width);
    }
  }

  Strategy strategy() const noexcept { return strategy_; }
  std::size_t scale() const noexcept { return k_; }
  std::size_t width() const noexcept { return width_; }
  std::size_t height() const noexcept { return height_; }

  /// sqrt(W*H)/K, the distance threshold of the sliding strategy.
  double threshold() const {
    return std::sqrt(static_cast<double>(width_ * height_)) / static_cast<double>(k_);
  }
  std::size_t half_width() const noexcept { return half_width_; }

  /// Number of distinct pooled vectors per channel (K*K or W*H).
  std::size_t pooled_height() const noexcept {
    return strategy_ == Strategy::regional ? k_ : height_;
  }
  std::size_t pooled_width() const noexcept {
    return strategy_ == Strategy::regional ? k_ : width_;
  }

  /// Regional cell (row index, col index) that holds position (w, h).
  std::size_t cell_row(std::size_t h) const { return locate(row_bounds_, h); }
  std::size_t cell_col(std::size_t w) const { return locate(col_bounds_, w); }

  /// Rectangle of regional cell (i, j).
  Rect cell(std::size_t i, std::size_t j) const {
    return {row_bounds_[i], row_bounds_[i + 1] - 1, col_bounds_[j], col_bounds_[j + 1] - 1};
  }

  Rect at(std::size_t w, std::size_t h) const {
    if (w >= width_ || h >= height_) {
      throw std::invalid_argument("coordinate_set: position (" + std::to_string(w) + "," +
                                  std::to_string(h) + ") outside lattice " +
                                  std::to_string(width_) + "x" + std::to_string(height_));
    }
    if (strategy_ == Strategy::regional) return cell(cell_row(h), cell_col(w));
    const std::size_t r = half_width_;
    return {h > r ? h - r : 0, std::min(h + r, height_ - 1), w > r ? w - r : 0,
            std::min(w + r, width_ - 1)};
  }

  friend bool operator==(const CoordinateSetSpec& a, const CoordinateSetSpec& b) {
    return a.strategy_ == b.strategy_ && a.k_ == b.k_ && a.width_ == b.width_ &&
           a.height_ == b.height_;
  }

 private:
  std::vector<std::size_t> bounds(std::size_t extent) const {
    std::vector<std::size_t> b(k_ + 1);
    for (std::size_t i = 0; i <= k_; ++i) b[i] = (2 * i * extent + k_) / (2 * k_);
    return b;
  }
  static std::size_t locate(const std::vector<std::size_t>& b, std::size_t v) {
    std::size_t i = 0;
    while (b[i + 1] <= v) ++i;
    return i;
  }

  Strategy strategy_;
  std::size_t k_, width_, height_;
  std::size_t half_width_ = 0;
  std::vector<std::size_t> row_bounds_, col_bounds_;
};

inline Rect coordinate_set(const CoordinateSetSpec& spec, std::size_t w, std::size_t h) {
  return spec.at(w, h);
}

// ---------------------------------------------------------------------------
// Pooling over coordinate sets

/// Average of each coordinate set, computed with one summed-area table per
/// image. Output is N x D x K x K (regional) or N x D x H x W (sliding).
template <typename T>
TensorPtr<T> region_avg_pool(Tape<T>* tape, const TensorPtr<T>& x, const CoordinateSetSpec& spec) {
  const Shape s = x->shape();
  if (s.h != spec.height() || s.w != spec.width()) {
    throw ShapeError("region_avg_pool: input " + s.str() + " does not match lattice " +
                     std::to_string(spec.width()) + "x" + std::to_string(spec.height()));
  }
  const std::size_t ph = spec.pooled_height(), pw = spec.pooled_width();
  auto out = make_tensor<T>({s.n, s.c, ph, pw});
  auto y = out->data();
  for (std::size_t n = 0; n < s.n; ++n) {
    const SummedAreaTable<T> sat(x->data().subspan(n * s.image(), s.image()), s.c, s.h, s.w);
    for (std::size_t d = 0; d < s.c; ++d) {
      T* dst = y.data() + (n * s.c + d) * ph * pw;
      for (std::size_t i = 0; i < ph; ++i)
        for (std::size_t j = 0; j < pw; ++j) {
          const Rect r = spec.strategy() == Strategy::regional ? spec.cell(i, j) : spec.at(j, i);
          dst[i * pw + j] =
              sat.rect_sum_unchecked(d, r.h1, r.h2, r.w1, r.w2) / static_cast<T>(r.count());
        }
    }
  }
  if (detail::tracking(tape, x)) {
    out->set_requires_grad(true);
    Tensor<T>* o = out.get();
    tape->record("region_avg_pool", {x}, out, [x, o, spec, s, ph, pw]() {
      auto g = o->grad();
      auto dx = x->grad();
      if (spec.strategy() == Strategy::regional) {
        for (std::size_t nd = 0; nd < s.n * s.c; ++nd) {
          T* dst = dx.data() + nd * s.plane();
          const T* src = g.data() + nd * ph * pw;
          for (std::size_t i = 0; i < ph; ++i)
            for (std::size_t j = 0; j < pw; ++j) {
              const Rect r = spec.cell(i, j);
              const T v = src[i * pw + j] / static_cast<T>(r.count());
              for (std::size_t h = r.h1; h <= r.h2; ++h)
                for (std::size_t w = r.w1; w <= r.w2; ++w) dst[h * s.w + w] += v;
            }
        }
        return;
      }
      // Sliding windows are symmetric (q in S(p) iff p in S(q)), so the adjoint
      // is the same box sum applied to the count-normalized output gradient.
      std::vector<T> scaled(s.image());
      for (std::size_t n = 0; n < s.n; ++n) {
        for (std::size_t d = 0; d < s.c; ++d)
          for (std::size_t h = 0; h < s.h; ++h)
            for (std::size_t w = 0; w < s.w; ++w) {
              const std::size_t i = (d * s.h + h) * s.w + w;
              scaled[i] = g[n * s.image() + i] / static_cast<T>(spec.at(w, h).count());
            }
        const SummedAreaTable<T> sat(std::span<const T>(scaled), s.c, s.h, s.w);
        for (std::size_t d = 0; d < s.c; ++d)
          for (std::size_t h = 0; h < s.h; ++h)
            for (std::size_t w = 0; w < s.w; ++w) {
              const Rect r = spec.at(w, h);
              dx[n * s.image() + (d * s.h + h) * s.w + w] +=
                  sat.rect_sum_unchecked(d, r.h1, r.h2, r.w1, r.w2);
            }
      }
    });
  }
  return out;
}

/// Broadcasts pooled values back onto the lattice: each regional cell value
/// is duplicated over the cell. Sliding pooled maps already live on the
/// lattice and are returned unchanged.
template <typename T>
TensorPtr<T> expand_regions(Tape<T>* tape, const TensorPtr<T>& pooled,
                            const CoordinateSetSpec& spec) {
  const Shape s = pooled->shape();
  if (s.h != spec.pooled_height() || s.w != spec.pooled_width()) {
    throw ShapeError("expand_regions: pooled map " + s.str() + " does not match " +
                     to_string(spec.strategy()) + " K=" + std::to_string(spec.scale()));
  }
  if (spec.strategy() == Strategy::sliding) return pooled;
  const std::size_t H = spec.height(), W = spec.width();
  auto out = make_tensor<T>({s.n, s.c, H, W});
  auto y = out->data();
  auto p = pooled->data();
  for (std::size_t nd = 0; nd < s.n * s.c; ++nd)
    for (std::size_t h = 0; h < H; ++h) {
      const std::size_t i = spec.cell_row(h);
      for (std::size_t w = 0; w < W; ++w)
        y[nd * H * W + h * W + w] = p[nd * s.plane() + i * s.w + spec.cell_col(w)];
    }
  if (detail::tracking(tape, pooled)) {
    out->set_requires_grad(true);
    Tensor<T>* o = out.get();
    tape->record("expand_regions", {pooled}, out, [pooled, o, spec, s, H, W]() {
      auto g = o->grad();
      auto dp = pooled->grad();
      for (std::size_t nd = 0; nd < s.n * s.c; ++nd)
        for (std::size_t h = 0; h < H; ++h) {
          const std::size_t i = spec.cell_row(h);
          for (std::size_t w = 0; w < W; ++w)
            dp[nd * s.plane() + i * s.w + spec.cell_col(w)] += g[nd * H * W + h * W + w];
        }
    });
  }
  return out;
}

}  // namespace mssar
