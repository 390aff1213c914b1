#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <optional>
#include <stdexcept>
#include <string>
#include <type_traits>
#include <variant>
#include <vector>

#include "mssar/integral_pooling.hpp"
#include "mssar/network_spec.hpp"
#include "mssar/ops.hpp"
#include "mssar/parameters.hpp"
#include "mssar/random.hpp"
#include "mssar/recalibration.hpp"

namespace mssar {

/// He-normal convolution kernel, std = sqrt(2 / fan_in).
template <typename T>
TensorPtr<T> make_conv_kernel(std::size_t out, std::size_t in, std::size_t k, Rng& rng) {
  auto w = make_leaf<T>({out, in, k, k});
  const double sd = std::sqrt(2.0 / static_cast<double>(in * k * k));
  for (T& v : w->data()) v = static_cast<T>(rng.normal() * sd);
  return w;
}

/// Convolution followed by batch normalization.
template <typename T>
struct ConvBn {
  TensorPtr<T> kernel;
  BatchNorm<T> bn;
  std::size_t stride = 1;
  std::size_t pad = 0;

  ConvBn() = default;
  ConvBn(std::size_t in, std::size_t out, std::size_t k, std::size_t stride_, Rng& rng)
      : kernel(make_conv_kernel<T>(out, in, k, rng)), bn(out), stride(stride_), pad(k / 2) {}

  TensorPtr<T> operator()(Tape<T>* tape, const TensorPtr<T>& x, Mode mode) {
    return batchnorm(tape, conv2d(tape, x, kernel, stride, pad), bn, mode);
  }

  void register_into(ParameterRegistry<T>& reg, const std::string& prefix) const {
    reg.add(prefix + ".conv", kernel, ParamRole::weight);
    reg.add_batchnorm(prefix + ".bn", bn);
  }
};

/// conv-BN (-> MS-SAR) -> ReLU.
template <typename T>
struct PlainBlock {
  ConvBn<T> conv;
  std::optional<MultiScaleRecalibration<T>> recal;
  bool bypass = false;

  TensorPtr<T> forward(Tape<T>* tape, const TensorPtr<T>& x, Mode mode) {
    auto h = conv(tape, x, mode);
    if (recal && !bypass) h = recal->apply(tape, h, mode);
    return relu(tape, h);
  }

  void register_into(ParameterRegistry<T>& reg, const std::string& prefix) const {
    conv.register_into(reg, prefix + ".conv1");
    if (recal) recal->register_into(reg, prefix + ".recal");
  }
};

/// Post-activation basic block: conv-BN-ReLU-conv-BN, MS-SAR on the second
/// BN output, add shortcut, ReLU.
template <typename T>
struct ResidualBlock {
  ConvBn<T> conv1;
  ConvBn<T> conv2;
  std::optional<ConvBn<T>> projection;
  std::optional<MultiScaleRecalibration<T>> recal;
  bool bypass = false;

  TensorPtr<T> forward(Tape<T>* tape, const TensorPtr<T>& x, Mode mode) {
    auto h = relu(tape, conv1(tape, x, mode));
    h = conv2(tape, h, mode);
    if (recal && !bypass) h = recal->apply(tape, h, mode);
    auto shortcut = projection ? (*projection)(tape, x, mode) : x;
    return relu(tape, add(tape, h, shortcut));
  }

  void register_into(ParameterRegistry<T>& reg, const std::string& prefix) const {
    conv1.register_into(reg, prefix + ".conv1");
    conv2.register_into(reg, prefix + ".conv2");
    if (projection) projection->register_into(reg, prefix + ".shortcut");
    if (recal) recal->register_into(reg, prefix + ".recal");
  }
};

/// 1x1 - 3x3 - 1x1 bottleneck (ungrouped); stride on the 3x3.
template <typename T>
struct BottleneckBlock {
  ConvBn<T> conv1;
  ConvBn<T> conv2;
  ConvBn<T> conv3;
  std::optional<ConvBn<T>> projection;
  std::optional<MultiScaleRecalibration<T>> recal;
  bool bypass = false;

  TensorPtr<T> forward(Tape<T>* tape, const TensorPtr<T>& x, Mode mode) {
    auto h = relu(tape, conv1(tape, x, mode));
    h = relu(tape, conv2(tape, h, mode));
    h = conv3(tape, h, mode);
    if (recal && !bypass) h = recal->apply(tape, h, mode);
    auto shortcut = projection ? (*projection)(tape, x, mode) : x;
    return relu(tape, add(tape, h, shortcut));
  }

  void register_into(ParameterRegistry<T>& reg, const std::string& prefix) const {
    conv1.register_into(reg, prefix + ".conv1");
    conv2.register_into(reg, prefix + ".conv2");
    conv3.register_into(reg, prefix + ".conv3");
    if (projection) projection->register_into(reg, prefix + ".shortcut");
    if (recal) recal->register_into(reg, prefix + ".recal");
  }
};

/// Pre-activation dense step: BN-ReLU-conv1x1 (optional), BN-ReLU-conv3x3
/// producing `growth` channels, recalibration, concatenation onto main.
template <typename T>
struct DenseStep {
  std::size_t in_channels = 0;
  std::size_t growth = 0;
  BatchNorm<T> bn1;
  TensorPtr<T> conv1;  // null when the 1x1 bottleneck is disabled
  BatchNorm<T> bn2;
  TensorPtr<T> conv2;
  std::optional<MultiScaleRecalibration<T>> recal;
  StageMode mode = StageMode::multi;
  bool bypass = false;

  DenseStep() = default;
  DenseStep(std::size_t in, std::size_t growth_, std::size_t bottleneck_width, Rng& rng)
      : in_channels(in), growth(growth_), bn1(in) {
    if (growth_ == 0) throw std::invalid_argument("DenseStep: growth must be >= 1");
    std::size_t c = in;
    if (bottleneck_width > 0) {
      conv1 = make_conv_kernel<T>(bottleneck_width, in, 1, rng);
      c = bottleneck_width;
    }
    bn2 = BatchNorm<T>(c);
    conv2 = make_conv_kernel<T>(growth_, c, 3, rng);
  }

  /// New `growth` channels before recalibration.
  TensorPtr<T> features(Tape<T>* tape, const TensorPtr<T>& main, Mode m) {
    if (main->shape().c != in_channels) {
      throw ShapeError("dense step: main vector has " + std::to_string(main->shape().c) +
                       " channels, step expects " + std::to_string(in_channels));
    }
    if (conv1) {
      auto h = conv2d(tape, relu(tape, batchnorm(tape, main, bn1, m)), conv1);
      return conv2d(tape, relu(tape, batchnorm(tape, h, bn2, m)), conv2, 1, 1);
    }
    return conv2d(tape, relu(tape, batchnorm(tape, main, bn1, m)), conv2, 1, 1);
  }

  /// Recalibrated new channels. In multi mode `pooled_main` holds the
  /// per-scale coordinate-set averages of `main`; when empty they are
  /// computed here.
  TensorPtr<T> forward_new(Tape<T>* tape, const TensorPtr<T>& main,
                           const std::vector<TensorPtr<T>>& pooled_main, Mode m) {
    auto fresh = features(tape, main, m);
    if (!recal || bypass) return fresh;
    if (mode == StageMode::single) return recal->apply(tape, fresh, m);
    if (pooled_main.empty()) return recal->apply(tape, fresh, main, m);
    return mul(tape, fresh, recal->weights(tape, pooled_main, m));
  }

  TensorPtr<T> forward(Tape<T>* tape, const TensorPtr<T>& main, Mode m) {
    return concat_channels(tape, main, forward_new(tape, main, {}, m));
  }

  void register_into(ParameterRegistry<T>& reg, const std::string& prefix) const {
    reg.add_batchnorm(prefix + ".bn1", bn1);
    if (conv1) reg.add(prefix + ".conv1", conv1, ParamRole::weight);
    reg.add_batchnorm(prefix + ".bn2", bn2);
    reg.add(prefix + ".conv2", conv2, ParamRole::weight);
    if (recal) recal->register_into(reg, prefix + ".recal");
  }
};

/// Sequence of dense steps sharing one lattice. In multi-stage mode the
/// per-scale pooled main vector is carried along: pooling is channelwise, so
/// the pooled concatenation is the concatenation of the pooled parts and
/// only new channels need pooling.
template <typename T>
struct DenseStage {
  std::vector<DenseStep<T>> steps;

  TensorPtr<T> forward(Tape<T>* tape, TensorPtr<T> main, Mode m) {
    const bool carry = !steps.empty() && steps.front().recal && !steps.front().bypass &&
                       steps.front().mode == StageMode::multi;
    std::vector<TensorPtr<T>> pooled;
    if (carry) pooled = steps.front().recal->pool(tape, main);
    for (std::size_t i = 0; i < steps.size(); ++i) {
      auto fresh = steps[i].forward_new(tape, main, pooled, m);
      main = concat_channels(tape, main, fresh);
      if (carry && i + 1 < steps.size()) {
        auto add_on = steps[i].recal->pool(tape, fresh);
        for (std::size_t l = 0; l < pooled.size(); ++l)
          pooled[l] = concat_channels(tape, pooled[l], add_on[l]);
      }
    }
    return main;
  }

  void register_into(ParameterRegistry<T>& reg, const std::string& prefix) const {
    for (std::size_t i = 0; i < steps.size(); ++i)
      steps[i].register_into(reg, prefix + ".step" + std::to_string(i + 1));
  }
};

/// BN-ReLU-conv1x1 then 2x2 average pooling.
template <typename T>
struct Transition {
  BatchNorm<T> bn;
  TensorPtr<T> conv;

  TensorPtr<T> forward(Tape<T>* tape, const TensorPtr<T>& x, Mode m) {
    return avg_pool2(tape, conv2d(tape, relu(tape, batchnorm(tape, x, bn, m)), conv));
  }

  void register_into(ParameterRegistry<T>& reg, const std::string& prefix) const {
    reg.add_batchnorm(prefix + ".bn", bn);
    reg.add(prefix + ".conv", conv, ParamRole::weight);
  }
};

template <typename T>
using Unit = std::variant<PlainBlock<T>, ResidualBlock<T>, BottleneckBlock<T>, DenseStage<T>,
                          Transition<T>>;

/// Executable model assembled from a NetworkSpec.
template <typename T>
class Network {
 public:
  Network(const NetworkSpec& spec, Rng& rng) : spec_(spec) {
    spec_.validate();
    build(rng);
    register_all();
  }

  Network(const Network&) = delete;
  Network& operator=(const Network&) = delete;
  Network(Network&&) = default;
  Network& operator=(Network&&) = default;

  const NetworkSpec& spec() const noexcept { return spec_; }
  ParameterRegistry<T>& parameters() noexcept { return registry_; }
  const ParameterRegistry<T>& parameters() const noexcept { return registry_; }
  std::vector<Unit<T>>& units() noexcept { return units_; }

  /// Disables every recalibration multiply (Z treated as 1).
  void set_bypass(bool on) {
    for (auto& u : units_) {
      std::visit(
          [on](auto& unit) {
            using U = std::decay_t<decltype(unit)>;
            if constexpr (std::is_same_v<U, DenseStage<T>>) {
              for (auto& s : unit.steps) s.bypass = on;
            } else if constexpr (!std::is_same_v<U, Transition<T>>) {
              unit.bypass = on;
            }
          },
          u);
    }
  }

  TensorPtr<T> forward(Tape<T>* tape, const TensorPtr<T>& x, Mode mode) {
    const Shape s = x->shape();
    if (s.c != spec_.input_channels || s.h != spec_.input_size || s.w != spec_.input_size) {
      throw ShapeError("network '" + spec_.name + "' expects N x " +
                       std::to_string(spec_.input_channels) + " x " +
                       std::to_string(spec_.input_size) + " x " + std::to_string(spec_.input_size) +
                       " input, got " + s.str());
    }
    TensorPtr<T> h = x;
    if (stem_conv_) {
      const bool ilsvrc = spec_.stem == StemKind::ilsvrc;
      h = conv2d(tape, h, stem_conv_, ilsvrc ? 2 : 1, ilsvrc ? 3 : 1);
      if (stem_bn_) h = relu(tape, batchnorm(tape, h, *stem_bn_, mode));
      if (ilsvrc) h = max_pool(tape, h, 3, 2, 1);
    }
    for (auto& u : units_) {
      h = std::visit([&](auto& unit) { return unit.forward(tape, h, mode); }, u);
    }
    if (head_bn_) h = relu(tape, batchnorm(tape, h, *head_bn_, mode));
    return fully_connected(tape, global_avg_pool(tape, h), fc_weight_, fc_bias_);
  }

 private:
  std::optional<MultiScaleRecalibration<T>> make_recal(std::size_t source, std::size_t target,
                                                       std::size_t side, Rng& rng) const {
    if (!spec_.msar.enabled) return std::nullopt;
    return MultiScaleRecalibration<T>(spec_.msar.config, source, target, side, side, rng);
  }

  void build(Rng& rng) {
    std::size_t c = spec_.input_channels;
    std::size_t side = spec_.input_size;
    if (spec_.stem != StemKind::none) {
      const bool ilsvrc = spec_.stem == StemKind::ilsvrc;
      stem_conv_ = make_conv_kernel<T>(spec_.stem_width, c, ilsvrc ? 7 : 3, rng);
      if (spec_.kind != BlockKind::dense) stem_bn_ = BatchNorm<T>(spec_.stem_width);
      c = spec_.stem_width;
      side = spec_.stem_output_size();
    }
    for (std::size_t si = 0; si < spec_.stages.size(); ++si) {
      const StageSpec& st = spec_.stages[si];
      const std::size_t first_stride = side / st.spatial;
      switch (spec_.kind) {
        case BlockKind::plain:
          for (std::size_t b = 0; b < st.blocks; ++b) {
            PlainBlock<T> blk;
            blk.conv = ConvBn<T>(c, st.width, 3, b == 0 ? first_stride : 1, rng);
            blk.recal = make_recal(st.width, st.width, st.spatial, rng);
            units_.push_back(std::move(blk));
            c = st.width;
          }
          break;
        case BlockKind::residual:
          for (std::size_t b = 0; b < st.blocks; ++b) {
            const std::size_t stride = b == 0 ? first_stride : 1;
            ResidualBlock<T> blk;
            blk.conv1 = ConvBn<T>(c, st.width, 3, stride, rng);
            blk.conv2 = ConvBn<T>(st.width, st.width, 3, 1, rng);
            if (c != st.width || stride != 1) blk.projection = ConvBn<T>(c, st.width, 1, stride, rng);
            blk.recal = make_recal(st.width, st.width, st.spatial, rng);
            units_.push_back(std::move(blk));
            c = st.width;
          }
          break;
        case BlockKind::bottleneck:
          if (st.groups != 1) {
            throw std::invalid_argument("stage " + std::to_string(si + 1) +
                                        ": grouped convolution (groups=" +
                                        std::to_string(st.groups) +
                                        ") is supported by the cost model only");
          }
          for (std::size_t b = 0; b < st.blocks; ++b) {
            const std::size_t stride = b == 0 ? first_stride : 1;
            BottleneckBlock<T> blk;
            blk.conv1 = ConvBn<T>(c, st.mid, 1, 1, rng);
            blk.conv2 = ConvBn<T>(st.mid, st.mid, 3, stride, rng);
            blk.conv3 = ConvBn<T>(st.mid, st.width, 1, 1, rng);
            if (c != st.width || stride != 1) blk.projection = ConvBn<T>(c, st.width, 1, stride, rng);
            blk.recal = make_recal(st.width, st.width, st.spatial, rng);
            units_.push_back(std::move(blk));
            c = st.width;
          }
          break;
        case BlockKind::dense: {
          DenseStage<T> stage;
          const std::size_t g = spec_.growth;
          for (std::size_t i = 0; i < st.blocks; ++i) {
            DenseStep<T> step(c, g, spec_.bottleneck_factor * g, rng);
            step.mode = spec_.msar.mode;
            const std::size_t source = spec_.msar.mode == StageMode::multi ? c : g;
            step.recal = make_recal(source, g, st.spatial, rng);
            stage.steps.push_back(std::move(step));
            c += g;
          }
          units_.push_back(std::move(stage));
          if (si + 1 < spec_.stages.size()) {
            Transition<T> t;
            t.bn = BatchNorm<T>(c);
            const auto out = static_cast<std::size_t>(spec_.compression * static_cast<double>(c));
            t.conv = make_conv_kernel<T>(out, c, 1, rng);
            units_.push_back(std::move(t));
            c = out;
          }
          break;
        }
      }
      side = st.spatial;
      if (spec_.kind == BlockKind::dense && si + 1 < spec_.stages.size()) side = st.spatial / 2;
    }
    if (spec_.kind == BlockKind::dense) head_bn_ = BatchNorm<T>(c);
    features_ = c;
    fc_weight_ = make_leaf<T>({spec_.classes, c, 1, 1});
    const double a = 1.0 / std::sqrt(static_cast<double>(c));
    fill_uniform(fc_weight_->data(), rng, -a, a);
    fc_bias_ = make_leaf<T>({1, spec_.classes, 1, 1}, T{0});
  }

  void register_all() {
    if (stem_conv_) registry_.add("stem.conv", stem_conv_, ParamRole::weight);
    if (stem_bn_) registry_.add_batchnorm("stem.bn", *stem_bn_);
    std::size_t stage = 1, block = 1, transition = 1;
    std::size_t consumed = 0;
    for (auto& u : units_) {
      std::visit(
          [&](auto& unit) {
            using U = std::decay_t<decltype(unit)>;
            if constexpr (std::is_same_v<U, Transition<T>>) {
              unit.register_into(registry_, "transition" + std::to_string(transition++));
            } else if constexpr (std::is_same_v<U, DenseStage<T>>) {
              unit.register_into(registry_, "stage" + std::to_string(stage++));
            } else {
              while (consumed >= spec_.stages[stage - 1].blocks) {
                ++stage;
                consumed = 0;
                block = 1;
              }
              unit.register_into(registry_,
                                 "stage" + std::to_string(stage) + ".block" + std::to_string(block++));
              ++consumed;
            }
          },
          u);
    }
    if (head_bn_) registry_.add_batchnorm("head.bn", *head_bn_);
    registry_.add("classifier.weight", fc_weight_, ParamRole::weight);
    registry_.add("classifier.bias", fc_bias_, ParamRole::bias);
  }

  NetworkSpec spec_;
  TensorPtr<T> stem_conv_;
  std::optional<BatchNorm<T>> stem_bn_;
  std::vector<Unit<T>> units_;
  std::optional<BatchNorm<T>> head_bn_;
  std::size_t features_ = 0;
  TensorPtr<T> fc_weight_;
  TensorPtr<T> fc_bias_;
  ParameterRegistry<T> registry_;
};

template <typename T>
Network<T> build_network(const NetworkSpec& spec, Rng& rng) {
  return Network<T>(spec, rng);
}

/// Copies values of same-named, same-shaped tensors from `src` into `dst`.
/// Returns how many tensors were copied.
template <typename T>
std::size_t copy_matching(const ParameterRegistry<T>& src, ParameterRegistry<T>& dst) {
  std::size_t copied = 0;
  for (auto& d : dst.entries()) {
    for (const auto& s : src.entries()) {
      if (s.name == d.name && s.tensor->shape() == d.tensor->shape()) {
        auto from = s.tensor->data();
        auto to = d.tensor->data();
        std::copy(from.begin(), from.end(), to.begin());
        ++copied;
        break;
      }
    }
  }
  return copied;
}

}  // namespace mssar
