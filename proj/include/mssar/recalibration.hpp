#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "mssar/integral_pooling.hpp"
#include "mssar/ops.hpp"
#include "mssar/parameters.hpp"
#include "mssar/random.hpp"

namespace mssar {

/// Scale factors, coordinate-set strategy and bottleneck reduction of one
/// multi-scale recalibration unit.
struct MultiScaleConfig {
  std::vector<std::size_t> scales{1, 2, 4};
  Strategy strategy = Strategy::regional;
  /// Bottleneck width is floor(D_in / (reduction * L)), at least 1.
  std::size_t reduction = 3;

  void validate() const {
    if (scales.empty()) throw std::invalid_argument("MultiScaleConfig: no scales");
    for (std::size_t i = 0; i < scales.size(); ++i) {
      if (scales[i] < 1) throw std::invalid_argument("MultiScaleConfig: scale must be >= 1");
      if (i > 0 && scales[i] <= scales[i - 1])
        throw std::invalid_argument("MultiScaleConfig: scales must be strictly increasing");
    }
    if (reduction < 1) throw std::invalid_argument("MultiScaleConfig: reduction must be >= 1");
  }

  friend bool operator==(const MultiScaleConfig&, const MultiScaleConfig&) = default;
};

inline std::size_t bottleneck_width(std::size_t in_channels, std::size_t num_scales,
                                    std::size_t reduction) {
  const std::size_t d = in_channels / (reduction * num_scales);
  return std::clamp<std::size_t>(d, 1, std::max<std::size_t>(in_channels, 1));
}

/// Weights of one recalibration function: Omega1 (D' x D_in), Omega2
/// (D_out x D'), and the batch normalizations inside sigma1 and sigma2.
/// Both matrices are stored as 1x1 convolution kernels so they apply to
/// every pooled vector at once.
template <typename T>
struct RecalibrationParams {
  std::size_t in_channels = 0;
  std::size_t out_channels = 0;
  std::size_t bottleneck = 0;
  TensorPtr<T> omega1;
  TensorPtr<T> omega2;
  BatchNorm<T> norm1;
  BatchNorm<T> norm2;

  RecalibrationParams() = default;

  RecalibrationParams(std::size_t in, std::size_t out, std::size_t width, Rng& rng)
      : in_channels(in),
        out_channels(out),
        bottleneck(width),
        omega1(make_leaf<T>({width, in, 1, 1})),
        omega2(make_leaf<T>({out, width, 1, 1})),
        norm1(width),
        norm2(out) {
    if (width < 1 || width > std::max(in, out)) {
      throw std::invalid_argument("RecalibrationParams: bottleneck " + std::to_string(width) +
                                  " outside [1, " + std::to_string(std::max(in, out)) + "]");
    }
    const double a1 = 1.0 / std::sqrt(static_cast<double>(in));
    const double a2 = 1.0 / std::sqrt(static_cast<double>(width));
    fill_uniform(omega1->data(), rng, -a1, a1);
    fill_uniform(omega2->data(), rng, -a2, a2);
  }

  void register_into(ParameterRegistry<T>& reg, const std::string& prefix) const {
    reg.add(prefix + ".omega1", omega1, ParamRole::weight);
    reg.add(prefix + ".omega2", omega2, ParamRole::weight);
    reg.add_batchnorm(prefix + ".norm1", norm1);
    reg.add_batchnorm(prefix + ".norm2", norm2);
  }
};

/// z = sigma2[Omega2 sigma1[Omega1 y]] for every pooled vector y, then
/// broadcast back to the lattice. `pooled` is the coordinate-set average
/// of the source map (N x D_in x Ph x Pw).
template <typename T>
TensorPtr<T> recalibration_weights(Tape<T>* tape, const TensorPtr<T>& pooled,
                                   RecalibrationParams<T>& params, const CoordinateSetSpec& spec,
                                   Mode mode) {
  if (pooled->shape().c != params.in_channels) {
    throw ShapeError("recalibration: input has " + std::to_string(pooled->shape().c) +
                     " channels but Omega1 expects " + std::to_string(params.in_channels));
  }
  auto h = conv2d(tape, pooled, params.omega1);
  h = relu(tape, batchnorm(tape, h, params.norm1, mode));
  auto z = conv2d(tape, h, params.omega2);
  z = sigmoid(tape, batchnorm(tape, z, params.norm2, mode));
  return expand_regions(tape, z, spec);
}

/// Single-scale weight map Z for input x (recalibration source and target
/// are the same map).
template <typename T>
TensorPtr<T> sar_forward(Tape<T>* tape, const TensorPtr<T>& x, RecalibrationParams<T>& params,
                         const CoordinateSetSpec& spec, Mode mode) {
  return recalibration_weights(tape, region_avg_pool(tape, x, spec), params, spec, mode);
}

/// Uniform average of per-scale weight maps.
template <typename T>
TensorPtr<T> average_maps(Tape<T>* tape, const std::vector<TensorPtr<T>>& maps) {
  if (maps.empty()) throw std::invalid_argument("average_maps: no maps");
  TensorPtr<T> acc = maps.front();
  for (std::size_t l = 1; l < maps.size(); ++l) acc = add(tape, acc, maps[l]);
  if (maps.size() == 1) return acc;
  return scale(tape, acc, T{1} / static_cast<T>(maps.size()));
}

/// Coordinate-set specs for every scale of `cfg` on a width x height lattice.
inline std::vector<CoordinateSetSpec> scale_specs(const MultiScaleConfig& cfg, std::size_t width,
                                                  std::size_t height) {
  std::vector<CoordinateSetSpec> specs;
  specs.reserve(cfg.scales.size());
  for (std::size_t k : cfg.scales) specs.emplace_back(cfg.strategy, k, width, height);
  return specs;
}

/// x * (1/L) sum_l Z^(l)(x).
template <typename T>
TensorPtr<T> ms_sar(Tape<T>* tape, const TensorPtr<T>& x, const MultiScaleConfig& cfg,
                    std::span<RecalibrationParams<T>> params, Mode mode) {
  cfg.validate();
  if (params.size() != cfg.scales.size()) {
    throw std::invalid_argument("ms_sar: " + std::to_string(cfg.scales.size()) + " scales but " +
                                std::to_string(params.size()) + " parameter sets");
  }
  const auto specs = scale_specs(cfg, x->shape().w, x->shape().h);
  std::vector<TensorPtr<T>> maps;
  for (std::size_t l = 0; l < specs.size(); ++l)
    maps.push_back(sar_forward(tape, x, params[l], specs[l], mode));
  return mul(tape, x, average_maps(tape, maps));
}

/// Multi-scale recalibration unit owning its per-scale parameters.
///
/// The source of the coordinate-set averages may differ from the map being
/// reweighted (dense blocks recalibrate new features from the main vector),
/// so pooling and weighting are exposed separately.
template <typename T>
class MultiScaleRecalibration {
 public:
  MultiScaleRecalibration() = default;

  MultiScaleRecalibration(const MultiScaleConfig& cfg, std::size_t source_channels,
                          std::size_t target_channels, std::size_t width, std::size_t height,
                          Rng& rng)
      : cfg_(cfg), specs_((cfg.validate(), scale_specs(cfg, width, height))) {
    const std::size_t d = bottleneck_width(source_channels, cfg.scales.size(), cfg.reduction);
    for (std::size_t l = 0; l < cfg.scales.size(); ++l)
      params_.emplace_back(source_channels, target_channels, d, rng);
  }

  const MultiScaleConfig& config() const noexcept { return cfg_; }
  const std::vector<CoordinateSetSpec>& specs() const noexcept { return specs_; }
  std::vector<RecalibrationParams<T>>& params() noexcept { return params_; }
  const std::vector<RecalibrationParams<T>>& params() const noexcept { return params_; }
  std::size_t source_channels() const { return params_.front().in_channels; }
  std::size_t bottleneck() const { return params_.front().bottleneck; }

  std::vector<TensorPtr<T>> pool(Tape<T>* tape, const TensorPtr<T>& source) const {
    std::vector<TensorPtr<T>> pooled;
    for (const auto& spec : specs_) pooled.push_back(region_avg_pool(tape, source, spec));
    return pooled;
  }

  /// Averaged weight map (1/L) sum_l Z^(l) from per-scale pooled sources.
  TensorPtr<T> weights(Tape<T>* tape, const std::vector<TensorPtr<T>>& pooled, Mode mode) {
    if (pooled.size() != params_.size()) {
      throw std::invalid_argument("MultiScaleRecalibration: " + std::to_string(pooled.size()) +
                                  " pooled inputs for " + std::to_string(params_.size()) +
                                  " scales");
    }
    std::vector<TensorPtr<T>> maps;
    for (std::size_t l = 0; l < params_.size(); ++l)
      maps.push_back(recalibration_weights(tape, pooled[l], params_[l], specs_[l], mode));
    return average_maps(tape, maps);
  }

  TensorPtr<T> apply(Tape<T>* tape, const TensorPtr<T>& target, const TensorPtr<T>& source,
                     Mode mode) {
    return mul(tape, target, weights(tape, pool(tape, source), mode));
  }

  TensorPtr<T> apply(Tape<T>* tape, const TensorPtr<T>& x, Mode mode) {
    return apply(tape, x, x, mode);
  }

  void register_into(ParameterRegistry<T>& reg, const std::string& prefix) const {
    for (std::size_t l = 0; l < params_.size(); ++l)
      params_[l].register_into(reg, prefix + ".scale" + std::to_string(cfg_.scales[l]));
  }

 private:
  MultiScaleConfig cfg_;
  std::vector<CoordinateSetSpec> specs_;
  std::vector<RecalibrationParams<T>> params_;
};

/// Squeeze-and-excitation style recalibration written with plain loops:
/// global average, Omega1, batch norm, ReLU, Omega2, batch norm, sigmoid,
/// channel reweighting. Train mode normalizes over the batch without
/// touching the running statistics.
template <typename T>
Tensor<T> se_reference(const Tensor<T>& x, const RecalibrationParams<T>& p, Mode mode) {
  const Shape s = x.shape();
  const std::size_t N = s.n, D = s.c, HW = s.plane(), B = p.bottleneck;
  std::vector<T> squeeze(N * D, T{0});
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t d = 0; d < D; ++d) {
      T acc{0};
      for (std::size_t i = 0; i < HW; ++i) acc += x[(n * D + d) * HW + i];
      squeeze[n * D + d] = acc / static_cast<T>(HW);
    }

  auto normalize = [&](std::vector<T>& v, std::size_t width, const BatchNorm<T>& bn) {
    for (std::size_t j = 0; j < width; ++j) {
      T mean, var;
      if (mode == Mode::train) {
        T acc{0};
        for (std::size_t n = 0; n < N; ++n) acc += v[n * width + j];
        mean = acc / static_cast<T>(N);
        T sq{0};
        for (std::size_t n = 0; n < N; ++n) sq += (v[n * width + j] - mean) * (v[n * width + j] - mean);
        var = sq / static_cast<T>(N);
      } else {
        mean = (*bn.running_mean)[j];
        var = (*bn.running_var)[j];
      }
      const T inv = T{1} / std::sqrt(var + bn.eps);
      for (std::size_t n = 0; n < N; ++n)
        v[n * width + j] = (*bn.gamma)[j] * (v[n * width + j] - mean) * inv + (*bn.beta)[j];
    }
  };

  std::vector<T> hidden(N * B, T{0});
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t b = 0; b < B; ++b) {
      T acc{0};
      for (std::size_t d = 0; d < D; ++d) acc += (*p.omega1)[b * D + d] * squeeze[n * D + d];
      hidden[n * B + b] = acc;
    }
  normalize(hidden, B, p.norm1);
  for (T& v : hidden) v = std::max(v, T{0});

  std::vector<T> excite(N * D, T{0});
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t d = 0; d < D; ++d) {
      T acc{0};
      for (std::size_t b = 0; b < B; ++b) acc += (*p.omega2)[d * B + b] * hidden[n * B + b];
      excite[n * D + d] = acc;
    }
  normalize(excite, D, p.norm2);
  for (T& v : excite) v = T{1} / (T{1} + std::exp(-v));

  Tensor<T> out(s);
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t d = 0; d < D; ++d)
      for (std::size_t i = 0; i < HW; ++i)
        out[(n * D + d) * HW + i] = x[(n * D + d) * HW + i] * excite[n * D + d];
  return out;
}

}  // namespace mssar
