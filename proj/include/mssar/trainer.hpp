#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

#include "mssar/blocks.hpp"
#include "mssar/dataset.hpp"
#include "mssar/optimizer.hpp"
#include "mssar/random.hpp"

namespace mssar {

struct TrainConfig {
  std::size_t epochs = 160;
  std::size_t batch_size = 128;
  std::uint64_t seed = 0;
  bool augment = true;
  bool log_wall_time = false;  // when off the seconds column is 0, keeping logs bitwise stable
  OptimizerConfig optim;
};

struct EpochLog {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  double train_err = 0.0;
  double test_loss = 0.0;
  double test_err = 0.0;
  double lr = 0.0;
  double seconds = 0.0;
};

struct EvalResult {
  double loss = 0.0;
  double error = 0.0;
  std::size_t count = 0;
};

/// Normalized (and optionally augmented) batch of images as an N x 3 x 32 x 32 tensor.
template <typename T>
TensorPtr<T> make_batch(const Dataset& ds, std::span<const std::size_t> idx, const Normalizer& norm,
                        Rng* augment_rng) {
  constexpr std::size_t img = kImageBytes;
  auto x = make_tensor<T>({idx.size(), 3, kImageSide, kImageSide});
  std::vector<T> clean(img);
  for (std::size_t b = 0; b < idx.size(); ++b) {
    T* dst = x->data().data() + b * img;
    if (augment_rng) {
      norm.apply<T>(ds.image(idx[b]), clean.data());
      const std::size_t ox = augment_rng->below(9);
      const std::size_t oy = augment_rng->below(9);
      const bool flip = augment_rng->coin();
      augment_with<T>(clean, ox, oy, flip, std::span<T>(dst, img));
    } else {
      norm.apply<T>(ds.image(idx[b]), dst);
    }
  }
  return x;
}

template <typename T>
std::size_t count_errors(const Tensor<T>& logits, std::span<const int> labels) {
  const std::size_t C = logits.shape().image();
  std::size_t wrong = 0;
  for (std::size_t n = 0; n < labels.size(); ++n) {
    const T* row = logits.data().data() + n * C;
    const auto pred = static_cast<int>(std::max_element(row, row + C) - row);
    if (pred != labels[n]) ++wrong;
  }
  return wrong;
}

/// Augmentation-free evaluation in eval mode. Per-sample losses are summed
/// in sorted order, so the result does not depend on record order.
template <typename T>
EvalResult evaluate(Network<T>& net, const Dataset& ds, const Normalizer& norm,
                    std::size_t batch_size = 256) {
  EvalResult r;
  r.count = ds.size();
  if (ds.size() == 0) return r;
  if (ds.label_span() > net.spec().classes) {
    throw std::invalid_argument("evaluate: dataset has labels up to " + std::to_string(ds.label_span() - 1) +
                                " but the network predicts " +
                                std::to_string(net.spec().classes));
  }
  std::vector<double> losses;
  losses.reserve(ds.size());
  std::size_t wrong = 0;
  std::vector<std::size_t> idx;
  for (std::size_t start = 0; start < ds.size(); start += batch_size) {
    const std::size_t end = std::min(ds.size(), start + batch_size);
    idx.resize(end - start);
    std::iota(idx.begin(), idx.end(), start);
    auto x = make_batch<T>(ds, idx, norm, nullptr);
    auto logits = net.forward(nullptr, x, Mode::eval);
    std::span<const int> labels(ds.labels.data() + start, end - start);
    for (T l : cross_entropy_per_sample(*logits, labels)) losses.push_back(static_cast<double>(l));
    wrong += count_errors(*logits, labels);
  }
  std::sort(losses.begin(), losses.end());
  double total = 0.0;
  for (double l : losses) total += l;
  r.loss = total / static_cast<double>(ds.size());
  r.error = static_cast<double>(wrong) / static_cast<double>(ds.size());
  return r;
}

/// One optimizer step on a batch; returns the batch loss before the update.
template <typename T>
double train_step(Network<T>& net, SgdNesterov<T>& opt, const TensorPtr<T>& x,
                  std::span<const int> labels, double lr, std::size_t* wrong = nullptr) {
  Tape<T> tape;
  auto logits = net.forward(&tape, x, Mode::train);
  auto loss = softmax_cross_entropy(&tape, logits, labels);
  if (wrong) *wrong += count_errors(*logits, labels);
  opt.zero_grad();
  tape.backward(loss);
  opt.step(lr);
  return static_cast<double>((*loss)[0]);
}

using EpochCallback = std::function<void(const EpochLog&)>;

/// Mini-batch training. Shuffling and augmentation draw from independent
/// streams of `cfg.seed`; a non-finite loss aborts.
template <typename T>
std::vector<EpochLog> train(Network<T>& net, const Dataset& train_set, const Dataset& test_set,
                            const TrainConfig& cfg, const EpochCallback& on_epoch = {}) {
  if (train_set.size() == 0) throw std::invalid_argument("train: empty training set");
  if (cfg.batch_size == 0) throw std::invalid_argument("train: batch_size must be >= 1");
  if (train_set.label_span() > net.spec().classes) {
    throw std::invalid_argument("train: dataset has labels up to " + std::to_string(train_set.label_span() - 1) +
                                " but the network predicts " +
                                std::to_string(net.spec().classes));
  }
  const Normalizer norm = Normalizer::fit(train_set);
  SgdNesterov<T> opt(net.parameters().trainable(), cfg.optim);
  const Rng root(cfg.seed);
  Rng order_rng = root.split(2);
  Rng aug_rng = root.split(3);

  std::vector<EpochLog> logs;
  std::vector<std::size_t> order(train_set.size());
  std::iota(order.begin(), order.end(), 0);
  std::vector<int> labels;
  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    const double lr = lr_at(epoch - 1, cfg.optim);
    order_rng.shuffle(order.begin(), order.end());
    double loss_sum = 0.0;
    std::size_t wrong = 0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t end = std::min(order.size(), start + cfg.batch_size);
      std::span<const std::size_t> idx(order.data() + start, end - start);
      labels.clear();
      for (std::size_t i : idx) labels.push_back(train_set.labels[i]);
      auto x = make_batch<T>(train_set, idx, norm, cfg.augment ? &aug_rng : nullptr);
      const double l = train_step(net, opt, x, labels, lr, &wrong);
      if (!std::isfinite(l))
        throw std::runtime_error("training diverged: non-finite loss in epoch " + std::to_string(epoch));
      loss_sum += l * static_cast<double>(idx.size());
    }
    EpochLog log;
    log.epoch = epoch;
    log.train_loss = loss_sum / static_cast<double>(order.size());
    log.train_err = static_cast<double>(wrong) / static_cast<double>(order.size());
    const EvalResult te = evaluate(net, test_set, norm);
    log.test_loss = te.loss;
    log.test_err = te.error;
    log.lr = lr;
    if (cfg.log_wall_time)
      log.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    logs.push_back(log);
    if (on_epoch) on_epoch(log);
  }
  return logs;
}

inline const char* curve_header() { return "epoch,train_loss,train_err,test_loss,test_err,lr,seconds"; }

inline std::string format_curve(const std::vector<EpochLog>& logs) {
  std::string out = std::string(curve_header()) + "\n";
  char line[256];
  for (const auto& l : logs) {
    std::snprintf(line, sizeof line, "%zu,%.17g,%.17g,%.17g,%.17g,%.17g,%.6f\n", l.epoch, l.train_loss,
                  l.train_err, l.test_loss, l.test_err, l.lr, l.seconds);
    out += line;
  }
  return out;
}

/// Writes `text` to `path` via a temporary sibling and a rename, so a
/// failed run never leaves a partial file behind.
inline void write_file_atomic(const std::filesystem::path& path, const std::string& text) {
  auto tmp = path;
  tmp += ".partial";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write '" + tmp.string() + "'");
    out << text;
    if (!out) throw std::runtime_error("write failed for '" + tmp.string() + "'");
  }
  std::filesystem::rename(tmp, path);
}

}  // namespace mssar
