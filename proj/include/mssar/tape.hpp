#pragma once

#include <cstddef>
#include <functional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "mssar/tensor.hpp"

namespace mssar {

/// Ordered record of executed operations, replayed in reverse by backward().
///
/// Operations append themselves as they run, so the record is topologically
/// sorted by construction. A tape is single-use: backward() may run once.
template <typename T>
class Tape {
 public:
  struct Entry {
    std::string op;
    std::vector<TensorPtr<T>> inputs;
    TensorPtr<T> output;
    std::function<void()> backward;
  };

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;
  Tape(Tape&&) noexcept = default;
  Tape& operator=(Tape&&) noexcept = default;

  void record(std::string op, std::vector<TensorPtr<T>> inputs, TensorPtr<T> output,
              std::function<void()> backward) {
    if (consumed_) throw std::logic_error("Tape: cannot record after backward()");
    entries_.push_back({std::move(op), std::move(inputs), std::move(output), std::move(backward)});
  }

  std::size_t size() const noexcept { return entries_.size(); }
  bool empty() const noexcept { return entries_.empty(); }
  const std::vector<Entry>& entries() const noexcept { return entries_; }
  bool consumed() const noexcept { return consumed_; }

  /// Seeds d(loss)/d(loss) = 1 and propagates to every recorded input.
  void backward(const TensorPtr<T>& loss) {
    if (!loss) throw std::invalid_argument("backward: null loss");
    if (loss->size() != 1) {
      throw std::invalid_argument("backward: loss must be scalar, got shape " +
                                  loss->shape().str());
    }
    if (consumed_) throw std::logic_error("backward: tape already consumed");
    if (entries_.empty() || !produced_here(loss)) {
      throw std::logic_error("backward: no recorded forward pass produced this loss");
    }
    loss->ensure_grad();
    loss->grad()[0] += T{1};
    for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) {
      if (it->output->has_grad()) it->backward();
    }
    consumed_ = true;
  }

 private:
  bool produced_here(const TensorPtr<T>& t) const {
    for (const auto& e : entries_)
      if (e.output == t) return true;
    return false;
  }

  std::vector<Entry> entries_;
  bool consumed_ = false;
};

namespace detail {

/// True when the op should be recorded: a tape is active and some input needs a gradient.
template <typename T, typename... Ptrs>
bool tracking(Tape<T>* tape, const Ptrs&... inputs) {
  return tape != nullptr && ((inputs && inputs->requires_grad()) || ...);
}

template <typename T>
void accumulate(Tensor<T>& dst, std::span<const T> src) {
  auto g = dst.grad();
  for (std::size_t i = 0; i < g.size(); ++i) g[i] += src[i];
}

}  // namespace detail

}  // namespace mssar
