#pragma once

#include <cstdio>
#include <exception>
#include <filesystem>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "mssar/blocks.hpp"
#include "mssar/config.hpp"
#include "mssar/cost_model.hpp"
#include "mssar/dataset.hpp"
#include "mssar/gradcheck.hpp"
#include "mssar/synthetic.hpp"
#include "mssar/trainer.hpp"
#include "mssar/weights_io.hpp"

// Command implementations behind the `mssar` executable. Each returns a
// process exit code and reports failures as a single "error: ..." line.

namespace mssar {

/// Command-line overrides applied on top of a parsed config.
struct Overrides {
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out;
  std::optional<int> precision;

  void apply(ExperimentConfig& cfg) const {
    if (seed) cfg.run.seed = *seed;
    if (out) cfg.run.out = *out;
    if (precision) {
      if (*precision != 32 && *precision != 64)
        throw std::invalid_argument("--precision must be 32 or 64");
      cfg.run.precision = *precision;
    }
  }
};

namespace detail {

inline std::vector<std::string> resolve_all(const std::vector<std::string>& paths) {
  std::vector<std::string> out;
  for (const auto& p : paths) out.push_back(resolve_data_path(p));
  return out;
}

inline Dataset load_split(const ExperimentConfig& cfg, Split split) {
  DataFilter f;
  f.classes = cfg.data.classes;
  f.per_class = split == Split::train ? cfg.data.per_class : cfg.data.test_per_class;
  const auto& paths = split == Split::train ? cfg.data.train : cfg.data.test;
  return load_records(resolve_all(paths), split, cfg.data.format, f);
}

inline TrainConfig train_config(const ExperimentConfig& cfg) {
  TrainConfig t;
  t.epochs = cfg.run.epochs;
  t.batch_size = cfg.run.batch_size;
  t.seed = cfg.run.seed;
  t.augment = cfg.data.augment;
  t.log_wall_time = cfg.run.log_wall_time;
  t.optim = cfg.optim;
  return t;
}

template <typename T>
int train_as(const ExperimentConfig& cfg, std::ostream& out) {
  const Dataset train_set = load_split(cfg, Split::train);
  const Dataset test_set = load_split(cfg, Split::test);
  Rng init = Rng(cfg.run.seed).split(1);
  Network<T> net(cfg.network, init);
  out << "train: " << cfg.network.name << (cfg.network.msar.enabled ? " +msar" : "") << ", "
      << train_set.size() << " train / " << test_set.size() << " test images, " << cfg.run.epochs
      << " epochs, " << cfg.run.precision << "-bit\n";
  const auto logs = train<T>(net, train_set, test_set, train_config(cfg), [&](const EpochLog& l) {
    char line[160];
    std::snprintf(line, sizeof line, "epoch %3zu  lr %.4g  train loss %.4f err %.4f  test loss %.4f err %.4f\n",
                  l.epoch, l.lr, l.train_loss, l.train_err, l.test_loss, l.test_err);
    out << line << std::flush;
  });
  const std::filesystem::path dir(cfg.run.out);
  std::filesystem::create_directories(dir);
  save_weights((dir / "weights.bin").string(), net.parameters());
  write_file_atomic(dir / "config.txt", serialize_config(cfg));
  write_file_atomic(dir / "curve.csv", format_curve(logs));
  out << "wrote " << (dir / "curve.csv").string() << " and " << (dir / "weights.bin").string() << "\n";
  return 0;
}

template <typename T>
int eval_as(const ExperimentConfig& cfg, const std::string& weights, std::ostream& out) {
  Rng init = Rng(cfg.run.seed).split(1);
  Network<T> net(cfg.network, init);
  load_weights(weights, net.parameters());
  const Dataset train_set = load_split(cfg, Split::train);
  const Dataset test_set = load_split(cfg, Split::test);
  const EvalResult r = evaluate(net, test_set, Normalizer::fit(train_set));
  char line[128];
  std::snprintf(line, sizeof line, "test_loss=%.17g test_err=%.17g images=%zu\n", r.loss, r.error, r.count);
  out << line;
  return 0;
}

template <typename F>
int guarded(std::ostream& err, F&& body) {
  try {
    return body();
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  }
}

}  // namespace detail

inline int cmd_train(ExperimentConfig cfg, std::ostream& out, std::ostream& err) {
  return detail::guarded(err, [&] {
    return cfg.run.precision == 32 ? detail::train_as<float>(cfg, out) : detail::train_as<double>(cfg, out);
  });
}

inline int cmd_eval(const ExperimentConfig& cfg, const std::string& weights, std::ostream& out,
                    std::ostream& err) {
  return detail::guarded(err, [&] {
    return cfg.run.precision == 32 ? detail::eval_as<float>(cfg, weights, out)
                                   : detail::eval_as<double>(cfg, weights, out);
  });
}

inline int cmd_analyze(const ExperimentConfig& cfg, bool csv, std::ostream& out, std::ostream& err,
                       const CostOptions& opt = {}) {
  return detail::guarded(err, [&] {
    const CostReport r = report(cfg.network, opt);
    out << (csv ? render_csv(r) : render_text(r));
    return 0;
  });
}

/// Operator suite plus an MS-SAR residual block using the config's
/// strategy and scales (clipped to an 8x8 lattice, at most 8 channels).
inline int cmd_gradcheck(const ExperimentConfig& cfg, std::ostream& out, std::ostream& err) {
  return detail::guarded(err, [&] {
    auto rows = operator_gradcheck_suite(cfg.run.seed);

    MultiScaleConfig mc = cfg.network.msar.config;
    std::vector<std::size_t> scales;
    for (auto k : mc.scales)
      if (k <= 8) scales.push_back(k);
    if (scales.empty()) scales = {1};
    mc.scales = scales;
    mc.reduction = 1;
    std::size_t width = 8;
    if (!cfg.network.stages.empty() && cfg.network.stages.front().width > 0)
      width = std::min<std::size_t>(8, cfg.network.stages.front().width);
    Rng rng = Rng(cfg.run.seed).split(7);
    auto blk = std::make_shared<ResidualBlock<double>>();
    blk->conv1 = ConvBn<double>(width, width, 3, 1, rng);
    blk->conv2 = ConvBn<double>(width, width, 3, 1, rng);
    blk->recal = MultiScaleRecalibration<double>(mc, width, width, 8, 8, rng);
    auto x = make_leaf<double>({2, width, 8, 8}, random_vector<double>(2 * width * 64, rng));
    std::vector<TensorPtr<double>> wrt{x, blk->conv1.kernel, blk->conv2.kernel};
    for (auto& p : blk->recal->params()) {
      wrt.push_back(p.omega1);
      wrt.push_back(p.omega2);
    }
    auto probe = Tensor<double>(x->shape(), random_vector<double>(x->size(), rng));
    rows.push_back(gradcheck(
        std::string("config msar block (") + to_string(mc.strategy) + ")",
        [=](Tape<double>* t) { return weighted_sum(t, blk->forward(t, x, Mode::train), probe); }, wrt, rng));

    std::size_t width_col = 8;
    for (const auto& r : rows) width_col = std::max(width_col, r.op.size());
    bool ok = true;
    char line[256];
    std::snprintf(line, sizeof line, "%-*s %14s %8s  %s\n", static_cast<int>(width_col), "operator",
                  "max_rel_error", "checked", "result");
    out << line;
    for (const auto& r : rows) {
      std::snprintf(line, sizeof line, "%-*s %14.3e %8zu  %s\n", static_cast<int>(width_col), r.op.c_str(),
                    r.max_rel_error, r.checked, r.pass ? "ok" : "FAIL");
      out << line;
      ok = ok && r.pass;
    }
    out << (ok ? "all operators within 1e-4\n" : "gradient check FAILED\n");
    return ok ? 0 : 1;
  });
}

/// Writes a seeded synthetic dataset as CIFAR-10 binaries train.bin / test.bin.
inline int cmd_synth(const std::string& dir, std::size_t classes, std::size_t per_class,
                     std::size_t test_per_class, std::uint64_t seed, std::ostream& out, std::ostream& err) {
  return detail::guarded(err, [&] {
    std::filesystem::create_directories(dir);
    const auto train_set = make_synthetic(per_class, classes, seed, Split::train);
    const auto test_set = make_synthetic(test_per_class, classes, seed ^ 0x5eed5eedULL, Split::test);
    const auto p = std::filesystem::path(dir);
    write_records((p / "train.bin").string(), train_set);
    write_records((p / "test.bin").string(), test_set);
    out << "wrote " << train_set.size() << " train and " << test_set.size() << " test records to " << dir
        << "\n";
    return 0;
  });
}

}  // namespace mssar
