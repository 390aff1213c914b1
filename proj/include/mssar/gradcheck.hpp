#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <string>
#include <vector>

#include "mssar/blocks.hpp"
#include "mssar/integral_pooling.hpp"
#include "mssar/ops.hpp"
#include "mssar/random.hpp"
#include "mssar/recalibration.hpp"

namespace mssar {

struct GradcheckOptions {
  double step = 1e-5;
  double tolerance = 1e-4;
  double floor = 1e-4;           // denominator floor of the relative error
  std::size_t max_entries = 256;  // per tensor; larger tensors are sampled
};

struct GradcheckRow {
  std::string op;
  double max_rel_error = 0.0;
  std::size_t checked = 0;
  bool pass = true;
};

inline double relative_error(double analytic, double numeric, double floor) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

/// Compares reverse-mode gradients of the scalar `loss_fn` against central
/// differences for every entry (or a seeded sample) of each tensor in `wrt`.
/// `loss_fn` receives a tape (analytic pass) or nullptr (probing passes).
inline GradcheckRow gradcheck(const std::string& op,
                              const std::function<TensorPtr<double>(Tape<double>*)>& loss_fn,
                              const std::vector<TensorPtr<double>>& wrt, Rng& rng,
                              const GradcheckOptions& opt = {}) {
  for (const auto& t : wrt) t->drop_grad();
  Tape<double> tape;
  auto loss = loss_fn(&tape);
  tape.backward(loss);

  GradcheckRow row;
  row.op = op;
  for (const auto& t : wrt) {
    const std::vector<double> analytic = t->has_grad()
                                             ? std::vector<double>(t->grad().begin(), t->grad().end())
                                             : std::vector<double>(t->size(), 0.0);
    std::vector<std::size_t> idx(t->size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    if (idx.size() > opt.max_entries) {
      rng.shuffle(idx.begin(), idx.end());
      idx.resize(opt.max_entries);
      std::sort(idx.begin(), idx.end());
    }
    for (std::size_t i : idx) {
      double& v = (*t)[i];
      const double saved = v;
      v = saved + opt.step;
      const double up = (*loss_fn(nullptr))[0];
      v = saved - opt.step;
      const double down = (*loss_fn(nullptr))[0];
      v = saved;
      const double numeric = (up - down) / (2.0 * opt.step);
      row.max_rel_error = std::max(row.max_rel_error, relative_error(analytic[i], numeric, opt.floor));
      ++row.checked;
    }
  }
  row.pass = row.max_rel_error < opt.tolerance;
  return row;
}

namespace detail {

inline TensorPtr<double> random_leaf(Shape s, Rng& rng, double lo = -1.0, double hi = 1.0) {
  return make_leaf<double>(s, random_vector<double>(s.size(), rng, lo, hi));
}

inline Tensor<double> random_probe(Shape s, Rng& rng) {
  return Tensor<double>(s, random_vector<double>(s.size(), rng));
}

/// Scalar probe of a vector-valued op: sum(probe * f(tape)).
inline std::function<TensorPtr<double>(Tape<double>*)> probe(
    std::function<TensorPtr<double>(Tape<double>*)> f, Shape out, Rng& rng) {
  auto w = random_probe(out, rng);
  return [f = std::move(f), w](Tape<double>* t) { return weighted_sum(t, f(t), w); };
}

}  // namespace detail

/// Finite-difference checks of every differentiable operator plus full
/// MS-SAR residual and dense blocks, on inputs of at most 8 channels and
/// 8x8 lattices, batch 2 (batch norm needs more than one sample).
inline std::vector<GradcheckRow> operator_gradcheck_suite(std::uint64_t seed,
                                                          const GradcheckOptions& opt = {}) {
  using detail::probe;
  using detail::random_leaf;
  using F = std::function<TensorPtr<double>(Tape<double>*)>;
  Rng rng(seed);
  std::vector<GradcheckRow> rows;
  auto run = [&](const std::string& name, F f, Shape out, std::vector<TensorPtr<double>> wrt) {
    rows.push_back(gradcheck(name, probe(std::move(f), out, rng), wrt, rng, opt));
  };

  {
    auto x = random_leaf({2, 3, 6, 6}, rng);
    auto k = random_leaf({4, 3, 3, 3}, rng);
    run("conv2d 3x3 pad1", [=](Tape<double>* t) { return conv2d(t, x, k, 1, 1); }, {2, 4, 6, 6}, {x, k});
    auto k1 = random_leaf({5, 3, 1, 1}, rng);
    run("conv2d 1x1", [=](Tape<double>* t) { return conv2d(t, x, k1); }, {2, 5, 6, 6}, {x, k1});
    run("conv2d 3x3 stride2", [=](Tape<double>* t) { return conv2d(t, x, k, 2, 1); }, {2, 4, 3, 3}, {x, k});
  }
  {
    auto x = random_leaf({2, 3, 4, 4}, rng);
    run("relu", [=](Tape<double>* t) { return relu(t, x); }, x->shape(), {x});
    run("sigmoid", [=](Tape<double>* t) { return sigmoid(t, x); }, x->shape(), {x});
    run("scale", [=](Tape<double>* t) { return scale(t, x, 0.37); }, x->shape(), {x});
  }
  {
    auto x = random_leaf({4, 3, 2, 2}, rng);
    auto bn = std::make_shared<BatchNorm<double>>(3);
    fill_uniform(bn->gamma->data(), rng, 0.5, 1.5);
    fill_uniform(bn->beta->data(), rng, -0.5, 0.5);
    run("batchnorm train", [=](Tape<double>* t) { return batchnorm(t, x, *bn, Mode::train); }, x->shape(),
        {x, bn->gamma, bn->beta});
    fill_uniform(bn->running_mean->data(), rng, -0.2, 0.2);
    fill_uniform(bn->running_var->data(), rng, 0.5, 1.5);
    run("batchnorm eval", [=](Tape<double>* t) { return batchnorm(t, x, *bn, Mode::eval); }, x->shape(),
        {x, bn->gamma, bn->beta});
  }
  {
    auto x = random_leaf({2, 3, 2, 2}, rng);
    auto w = random_leaf({4, 12, 1, 1}, rng);
    auto b = random_leaf({1, 4, 1, 1}, rng);
    run("fully_connected", [=](Tape<double>* t) { return fully_connected(t, x, w, b); }, {2, 4, 1, 1},
        {x, w, b});
  }
  {
    auto a = random_leaf({2, 3, 4, 4}, rng);
    auto b = random_leaf({2, 3, 4, 4}, rng);
    auto c = random_leaf({2, 2, 4, 4}, rng);
    run("mul", [=](Tape<double>* t) { return mul(t, a, b); }, a->shape(), {a, b});
    run("add", [=](Tape<double>* t) { return add(t, a, b); }, a->shape(), {a, b});
    run("concat_channels", [=](Tape<double>* t) { return concat_channels(t, a, c); }, {2, 5, 4, 4}, {a, c});
    run("global_avg_pool", [=](Tape<double>* t) { return global_avg_pool(t, a); }, {2, 3, 1, 1}, {a});
    run("avg_pool2", [=](Tape<double>* t) { return avg_pool2(t, a); }, {2, 3, 2, 2}, {a});
    run("max_pool 3x3/2", [=](Tape<double>* t) { return max_pool(t, a, 3, 2, 1); }, {2, 3, 2, 2}, {a});
  }
  {
    auto x = random_leaf({2, 4, 8, 8}, rng);
    for (auto strat : {Strategy::regional, Strategy::sliding}) {
      for (std::size_t k : {1u, 2u, 4u}) {
        CoordinateSetSpec spec(strat, k, 8, 8);
        const Shape out{2, 4, spec.pooled_height(), spec.pooled_width()};
        run(std::string("region_avg_pool ") + to_string(strat) + " K=" + std::to_string(k),
            [=](Tape<double>* t) { return region_avg_pool(t, x, spec); }, out, {x});
      }
    }
    CoordinateSetSpec spec(Strategy::regional, 2, 8, 8);
    auto y = random_leaf({2, 4, 2, 2}, rng);
    run("expand_regions", [=](Tape<double>* t) { return expand_regions(t, y, spec); }, x->shape(), {y});
  }
  {
    auto logits = random_leaf({3, 4, 1, 1}, rng, -2.0, 2.0);
    const std::vector<int> labels{0, 3, 1};
    rows.push_back(gradcheck(
        "softmax_cross_entropy",
        [=](Tape<double>* t) { return softmax_cross_entropy<double>(t, logits, labels); }, {logits}, rng, opt));
  }
  {
    auto x = random_leaf({2, 6, 8, 8}, rng);
    for (auto strat : {Strategy::regional, Strategy::sliding}) {
      MultiScaleConfig cfg;
      cfg.strategy = strat;
      cfg.scales = {1, 2, 4};
      cfg.reduction = 1;
      auto unit = std::make_shared<MultiScaleRecalibration<double>>(cfg, 6, 6, 8, 8, rng);
      std::vector<TensorPtr<double>> wrt{x};
      for (auto& p : unit->params()) {
        wrt.push_back(p.omega1);
        wrt.push_back(p.omega2);
        wrt.push_back(p.norm1.gamma);
        wrt.push_back(p.norm2.beta);
      }
      run(std::string("ms_sar ") + to_string(strat) + " L={1,2,4}",
          [=](Tape<double>* t) { return unit->apply(t, x, Mode::train); }, x->shape(), wrt);
    }
  }
  {
    MultiScaleConfig cfg;
    cfg.scales = {1, 2, 4};
    cfg.reduction = 1;
    auto blk = std::make_shared<ResidualBlock<double>>();
    blk->conv1 = ConvBn<double>(8, 8, 3, 1, rng);
    blk->conv2 = ConvBn<double>(8, 8, 3, 1, rng);
    blk->recal = MultiScaleRecalibration<double>(cfg, 8, 8, 8, 8, rng);
    auto x = random_leaf({2, 8, 8, 8}, rng);
    std::vector<TensorPtr<double>> wrt{x, blk->conv1.kernel, blk->conv2.kernel, blk->conv2.bn.gamma};
    for (auto& p : blk->recal->params()) {
      wrt.push_back(p.omega1);
      wrt.push_back(p.omega2);
    }
    run("msar residual block", [=](Tape<double>* t) { return blk->forward(t, x, Mode::train); }, x->shape(),
        wrt);

    auto down = std::make_shared<ResidualBlock<double>>();
    down->conv1 = ConvBn<double>(4, 8, 3, 2, rng);
    down->conv2 = ConvBn<double>(8, 8, 3, 1, rng);
    down->projection = ConvBn<double>(4, 8, 1, 2, rng);
    MultiScaleConfig small = cfg;
    small.scales = {1, 2};
    down->recal = MultiScaleRecalibration<double>(small, 8, 8, 4, 4, rng);
    auto xd = random_leaf({2, 4, 8, 8}, rng);
    run("msar residual block downsample",
        [=](Tape<double>* t) { return down->forward(t, xd, Mode::train); }, {2, 8, 4, 4},
        {xd, down->conv1.kernel, down->projection->kernel, down->recal->params()[1].omega1});
  }
  {
    MultiScaleConfig cfg;
    cfg.scales = {1, 2};
    cfg.reduction = 1;
    auto stage = std::make_shared<DenseStage<double>>();
    std::size_t c = 6;
    for (int i = 0; i < 2; ++i) {
      DenseStep<double> step(c, 3, 8, rng);
      step.mode = StageMode::multi;
      step.recal = MultiScaleRecalibration<double>(cfg, c, 3, 8, 8, rng);
      stage->steps.push_back(std::move(step));
      c += 3;
    }
    auto x = random_leaf({2, 6, 8, 8}, rng);
    run("msar dense stage multi", [=](Tape<double>* t) { return stage->forward(t, x, Mode::train); },
        {2, 12, 8, 8},
        {x, stage->steps[0].conv1, stage->steps[1].conv2, stage->steps[0].recal->params()[0].omega1,
         stage->steps[1].recal->params()[1].omega2});
  }
  return rows;
}

}  // namespace mssar
