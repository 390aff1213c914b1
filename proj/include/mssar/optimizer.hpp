#pragma once

#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

#include "mssar/parameters.hpp"

namespace mssar {

struct OptimizerConfig {
  double lr = 0.1;
  double momentum = 0.9;
  double weight_decay = 1e-4;
  std::vector<std::size_t> lr_drops{80, 120};  // epochs at which lr is divided
  double lr_divisor = 10.0;

  friend bool operator==(const OptimizerConfig&, const OptimizerConfig&) = default;

  void validate() const {
    if (!(lr > 0.0) || !std::isfinite(lr)) throw std::invalid_argument("optimizer: lr must be > 0");
    if (momentum < 0.0 || momentum >= 1.0) throw std::invalid_argument("optimizer: momentum must be in [0, 1)");
    if (weight_decay < 0.0) throw std::invalid_argument("optimizer: weight_decay must be >= 0");
    if (!(lr_divisor >= 1.0)) throw std::invalid_argument("optimizer: lr_divisor must be >= 1");
    for (std::size_t i = 1; i < lr_drops.size(); ++i)
      if (lr_drops[i] <= lr_drops[i - 1])
        throw std::invalid_argument("optimizer: lr_drops must be strictly increasing");
  }
};

inline OptimizerConfig resnet_schedule() { return {}; }

inline OptimizerConfig densenet_schedule() {
  OptimizerConfig c;
  c.lr_drops = {150, 225};
  return c;
}

/// Step schedule: base lr divided by `lr_divisor` at every drop epoch reached.
inline double lr_at(std::size_t epoch, const OptimizerConfig& cfg) {
  double lr = cfg.lr;
  for (std::size_t d : cfg.lr_drops)
    if (epoch >= d) lr /= cfg.lr_divisor;
  return lr;
}

/// SGD with Nesterov momentum:
///   v <- mu v - lr (g + lambda w)
///   w <- w + mu v - lr (g + lambda w)
/// Decay applies only to parameters whose role decays (conv/FC weights).
template <typename T>
class SgdNesterov {
 public:
  SgdNesterov(std::vector<NamedTensor<T>> params, const OptimizerConfig& cfg)
      : params_(std::move(params)), cfg_(cfg) {
    cfg_.validate();
    for (const auto& p : params_) velocity_.emplace_back(p.tensor->size(), T{0});
  }

  const OptimizerConfig& config() const noexcept { return cfg_; }
  const std::vector<std::vector<T>>& velocity() const noexcept { return velocity_; }

  void step(double lr) {
    for (const auto& p : params_) {
      if (!p.tensor->has_grad()) continue;
      for (T g : p.tensor->grad()) {
        if (!std::isfinite(static_cast<double>(g)))
          throw std::runtime_error("non-finite gradient in parameter '" + p.name + "'");
      }
    }
    const T mu = static_cast<T>(cfg_.momentum);
    const T eta = static_cast<T>(lr);
    for (std::size_t i = 0; i < params_.size(); ++i) {
      auto& p = params_[i];
      if (!p.tensor->has_grad()) continue;
      const T lambda = p.decays() ? static_cast<T>(cfg_.weight_decay) : T{0};
      auto w = p.tensor->data();
      auto g = p.tensor->grad();
      auto& v = velocity_[i];
      for (std::size_t j = 0; j < w.size(); ++j) {
        const T d = g[j] + lambda * w[j];
        v[j] = mu * v[j] - eta * d;
        w[j] += mu * v[j] - eta * d;
      }
    }
  }

  void zero_grad() {
    for (auto& p : params_) p.tensor->zero_grad();
  }

 private:
  std::vector<NamedTensor<T>> params_;
  OptimizerConfig cfg_;
  std::vector<std::vector<T>> velocity_;
};

}  // namespace mssar
