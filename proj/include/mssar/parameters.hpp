#pragma once

#include <cstddef>
#include <string>
#include <utility>
#include <vector>

#include "mssar/ops.hpp"
#include "mssar/tensor.hpp"

namespace mssar {

enum class ParamRole {
  weight,  // conv / fully-connected / recalibration matrices; weight decay applies
  bias,    // classifier bias; no decay
  norm,    // batch-norm affine; no decay
  buffer,  // running statistics; not trained
};

template <typename T>
struct NamedTensor {
  std::string name;
  TensorPtr<T> tensor;
  ParamRole role;

  bool trainable() const noexcept { return role != ParamRole::buffer; }
  bool decays() const noexcept { return role == ParamRole::weight; }
};

/// Flat, ordered view of every tensor a model owns. The order is the
/// construction order, which is also the serialization order.
template <typename T>
class ParameterRegistry {
 public:
  void add(std::string name, TensorPtr<T> t, ParamRole role) {
    entries_.push_back({std::move(name), std::move(t), role});
  }

  void add_batchnorm(const std::string& prefix, const BatchNorm<T>& bn) {
    add(prefix + ".gamma", bn.gamma, ParamRole::norm);
    add(prefix + ".beta", bn.beta, ParamRole::norm);
    add(prefix + ".running_mean", bn.running_mean, ParamRole::buffer);
    add(prefix + ".running_var", bn.running_var, ParamRole::buffer);
  }

  const std::vector<NamedTensor<T>>& entries() const noexcept { return entries_; }
  std::size_t size() const noexcept { return entries_.size(); }

  std::vector<NamedTensor<T>> trainable() const {
    std::vector<NamedTensor<T>> out;
    for (const auto& e : entries_)
      if (e.trainable()) out.push_back(e);
    return out;
  }

  std::size_t trainable_count() const {
    std::size_t total = 0;
    for (const auto& e : entries_)
      if (e.trainable()) total += e.tensor->size();
    return total;
  }

  void zero_grad() {
    for (auto& e : entries_) e.tensor->zero_grad();
  }

 private:
  std::vector<NamedTensor<T>> entries_;
};

}  // namespace mssar
