#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <vector>

#include "mssar/recalibration.hpp"

using namespace mssar;

namespace {

TensorPtr<double> random_input(Shape s, Rng& rng) {
  return make_tensor<double>(s, random_vector<double>(s.size(), rng));
}

void randomize_running_stats(RecalibrationParams<double>& p, Rng& rng) {
  for (BatchNorm<double>* bn : {&p.norm1, &p.norm2}) {
    fill_uniform(bn->gamma->data(), rng, 0.5, 1.5);
    fill_uniform(bn->beta->data(), rng, -0.3, 0.3);
    fill_uniform(bn->running_mean->data(), rng, -0.2, 0.2);
    fill_uniform(bn->running_var->data(), rng, 0.5, 2.0);
  }
}

// Eval-mode MS-SAR written as straight loops over the definition: for every
// position, average the source over its coordinate set, push the vector
// through Omega1/BN/ReLU/Omega2/BN/sigmoid, average over scales, multiply.
std::vector<double> oracle(const Tensor<double>& x, const MultiScaleConfig& cfg,
                           const std::vector<RecalibrationParams<double>>& params) {
  const Shape s = x.shape();
  std::vector<double> zsum(s.size(), 0.0);
  for (std::size_t l = 0; l < cfg.scales.size(); ++l) {
    const auto& p = params[l];
    const std::size_t K = cfg.scales[l], B = p.bottleneck;
    for (std::size_t n = 0; n < s.n; ++n)
      for (std::size_t h = 0; h < s.h; ++h)
        for (std::size_t w = 0; w < s.w; ++w) {
          // membership test straight from the definition
          std::vector<double> y(s.c, 0.0);
          std::size_t count = 0;
          for (std::size_t hh = 0; hh < s.h; ++hh)
            for (std::size_t ww = 0; ww < s.w; ++ww) {
              bool in;
              if (cfg.strategy == Strategy::sliding) {
                const double T = std::sqrt(double(s.w * s.h)) / double(K);
                in = std::abs(double(hh) - double(h)) <= T + 1e-12 && std::abs(double(ww) - double(w)) <= T + 1e-12;
              } else {
                auto cell = [&](std::size_t q, std::size_t ext) {
                  std::size_t i = 0;
                  while (std::floor(double((i + 1) * ext) / double(K) + 0.5) <= double(q)) ++i;
                  return i;
                };
                in = cell(hh, s.h) == cell(h, s.h) && cell(ww, s.w) == cell(w, s.w);
              }
              if (!in) continue;
              ++count;
              for (std::size_t d = 0; d < s.c; ++d) y[d] += x.at(n, d, hh, ww);
            }
          for (double& v : y) v /= double(count);
          std::vector<double> a(B, 0.0);
          for (std::size_t b = 0; b < B; ++b) {
            for (std::size_t d = 0; d < s.c; ++d) a[b] += (*p.omega1)[b * s.c + d] * y[d];
            const auto& bn = p.norm1;
            a[b] = (*bn.gamma)[b] * (a[b] - (*bn.running_mean)[b]) / std::sqrt((*bn.running_var)[b] + 1e-5) +
                   (*bn.beta)[b];
            a[b] = std::max(a[b], 0.0);
          }
          for (std::size_t d = 0; d < s.c; ++d) {
            double z = 0;
            for (std::size_t b = 0; b < B; ++b) z += (*p.omega2)[d * B + b] * a[b];
            const auto& bn = p.norm2;
            z = (*bn.gamma)[d] * (z - (*bn.running_mean)[d]) / std::sqrt((*bn.running_var)[d] + 1e-5) +
                (*bn.beta)[d];
            zsum[x.index(n, d, h, w)] += 1.0 / (1.0 + std::exp(-z));
          }
        }
  }
  std::vector<double> out(s.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * zsum[i] / double(cfg.scales.size());
  return out;
}

std::vector<RecalibrationParams<double>> make_params(const MultiScaleConfig& cfg, std::size_t D, Rng& rng,
                                                     bool random_stats = true) {
  std::vector<RecalibrationParams<double>> ps;
  const std::size_t b = bottleneck_width(D, cfg.scales.size(), cfg.reduction);
  for (std::size_t l = 0; l < cfg.scales.size(); ++l) {
    ps.emplace_back(D, D, b, rng);
    if (random_stats) randomize_running_stats(ps.back(), rng);
  }
  return ps;
}

}  // namespace

TEST(BottleneckWidth, FloorAndClamp) {
  EXPECT_EQ(bottleneck_width(64, 3, 3), 7u);
  EXPECT_EQ(bottleneck_width(64, 1, 1), 64u);
  EXPECT_EQ(bottleneck_width(16, 3, 3), 1u);
  EXPECT_EQ(bottleneck_width(2, 4, 3), 1u);
  EXPECT_EQ(bottleneck_width(12, 1, 10), 1u);
}

TEST(MultiScaleConfigTest, Validation) {
  MultiScaleConfig c;
  EXPECT_NO_THROW(c.validate());
  c.scales = {};
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c.scales = {0};
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c.scales = {2, 1};
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c.scales = {1};
  c.reduction = 0;
  EXPECT_THROW(c.validate(), std::invalid_argument);
}

TEST(Recalibration, ZeroOmega2GivesHalf) {
  Rng rng(1);
  for (auto mode : {Mode::train, Mode::eval}) {
    RecalibrationParams<double> p(6, 6, 2, rng);
    std::fill(p.omega2->values().begin(), p.omega2->values().end(), 0.0);
    auto x = random_input({3, 6, 8, 8}, rng);
    CoordinateSetSpec spec(Strategy::regional, 2, 8, 8);
    auto z = sar_forward<double>(nullptr, x, p, spec, mode);
    for (double v : z->values()) EXPECT_DOUBLE_EQ(v, 0.5);
  }
}

TEST(Recalibration, WeightsStrictlyInsideUnitInterval) {
  Rng rng(2);
  for (auto strat : {Strategy::regional, Strategy::sliding}) {
    MultiScaleConfig cfg{{1, 2, 4}, strat, 1};
    auto ps = make_params(cfg, 5, rng);
    auto x = random_input({2, 5, 8, 8}, rng);
    for (std::size_t l = 0; l < 3; ++l) {
      CoordinateSetSpec spec(strat, cfg.scales[l], 8, 8);
      auto z = sar_forward<double>(nullptr, x, ps[l], spec, Mode::eval);
      for (double v : z->values()) {
        EXPECT_GT(v, 0.0);
        EXPECT_LT(v, 1.0);
      }
    }
  }
}

TEST(Recalibration, ScaleOneIsSpatiallyConstant) {
  Rng rng(3);
  RecalibrationParams<double> p(4, 4, 2, rng);
  randomize_running_stats(p, rng);
  auto x = random_input({2, 4, 7, 5}, rng);
  for (auto strat : {Strategy::regional}) {
    auto z = sar_forward<double>(nullptr, x, p, CoordinateSetSpec(strat, 1, 5, 7), Mode::eval);
    for (std::size_t n = 0; n < 2; ++n)
      for (std::size_t d = 0; d < 4; ++d)
        for (std::size_t h = 0; h < 7; ++h)
          for (std::size_t w = 0; w < 5; ++w) EXPECT_EQ(z->at(n, d, h, w), z->at(n, d, 0, 0));
  }
}

TEST(Recalibration, RegionalWeightsPiecewiseConstant) {
  Rng rng(4);
  RecalibrationParams<double> p(4, 4, 2, rng);
  randomize_running_stats(p, rng);
  auto x = random_input({1, 4, 9, 7}, rng);
  CoordinateSetSpec spec(Strategy::regional, 3, 7, 9);
  auto z = sar_forward<double>(nullptr, x, p, spec, Mode::eval);
  for (std::size_t d = 0; d < 4; ++d)
    for (std::size_t h = 0; h < 9; ++h)
      for (std::size_t w = 0; w < 7; ++w) {
        const Rect c = coordinate_set(spec, w, h);
        EXPECT_EQ(z->at(0, d, h, w), z->at(0, d, c.h1, c.w1));
      }
}

TEST(MsSar, MatchesStraightLineOracle) {
  Rng rng(5);
  for (auto strat : {Strategy::regional, Strategy::sliding})
    for (const auto& scales : std::vector<std::vector<std::size_t>>{{1}, {2}, {1, 2}, {1, 2, 4}, {1, 3}}) {
      MultiScaleConfig cfg{scales, strat, 1};
      auto ps = make_params(cfg, 6, rng);
      auto x = random_input({2, 6, 8, 7}, rng);
      auto y = ms_sar<double>(nullptr, x, cfg, ps, Mode::eval);
      const auto ref = oracle(*x, cfg, ps);
      for (std::size_t i = 0; i < ref.size(); ++i) ASSERT_NEAR((*y)[i], ref[i], 1e-10) << to_string(strat);
    }
}

TEST(MsSar, BruteForceTwoByTwo) {
  // 2 channels on a 2x2 lattice, L = {1, 2}: scale 2 cells are single pixels.
  Rng rng(6);
  MultiScaleConfig cfg{{1, 2}, Strategy::regional, 1};
  auto ps = make_params(cfg, 2, rng, false);
  auto x = make_tensor<double>({1, 2, 2, 2}, std::vector<double>{1, 2, 3, 4, -1, 0.5, 2, -3});
  auto y = ms_sar<double>(nullptr, x, cfg, ps, Mode::eval);
  const double inv = 1.0 / std::sqrt(1.0 + 1e-5);
  auto z = [&](const RecalibrationParams<double>& p, double y0, double y1, std::size_t d) {
    std::vector<double> a(p.bottleneck);
    for (std::size_t k = 0; k < a.size(); ++k)
      a[k] = std::max(0.0, ((*p.omega1)[k * 2] * y0 + (*p.omega1)[k * 2 + 1] * y1) * inv);
    double s = 0;
    for (std::size_t k = 0; k < a.size(); ++k) s += (*p.omega2)[d * a.size() + k] * a[k];
    return 1.0 / (1.0 + std::exp(-s * inv));
  };
  const double m0 = (1 + 2 + 3 + 4) / 4.0, m1 = (-1 + 0.5 + 2 - 3) / 4.0;
  for (std::size_t d = 0; d < 2; ++d)
    for (std::size_t i = 0; i < 4; ++i) {
      const double v = (*x)[d * 4 + i];
      const double expect = v * 0.5 * (z(ps[0], m0, m1, d) + z(ps[1], (*x)[i], (*x)[4 + i], d));
      EXPECT_NEAR((*y)[d * 4 + i], expect, 1e-12);
    }
}

TEST(MsSar, SingleGlobalScaleEqualsSqueezeExcitation) {
  Rng rng(7);
  for (auto mode : {Mode::eval, Mode::train}) {
    MultiScaleConfig cfg{{1}, Strategy::regional, 3};
    auto ps = make_params(cfg, 12, rng);
    auto x = random_input({4, 12, 6, 6}, rng);
    const Tensor<double> ref = se_reference(*x, ps[0], mode);
    auto y = ms_sar<double>(nullptr, x, cfg, ps, mode);
    for (std::size_t i = 0; i < ref.size(); ++i) ASSERT_NEAR((*y)[i], ref[i], 1e-12);
  }
}

TEST(SeReference, EdgeCases) {
  Rng rng(8);
  RecalibrationParams<double> p(3, 3, 1, rng);
  // zero input stays zero
  Tensor<double> zero({2, 3, 4, 4});
  const auto z = se_reference(zero, p, Mode::eval);
  for (double v : z.values()) EXPECT_EQ(v, 0.0);
  // all weights zero: every output is half the input
  std::fill(p.omega2->values().begin(), p.omega2->values().end(), 0.0);
  Tensor<double> x({1, 3, 2, 2}, random_vector<double>(12, rng));
  const auto y = se_reference(x, p, Mode::eval);
  for (std::size_t i = 0; i < 12; ++i) EXPECT_DOUBLE_EQ(y[i], 0.5 * x[i]);
}

TEST(MsSar, ConstantHalfWeightsHalveInput) {
  Rng rng(9);
  MultiScaleConfig cfg{{1, 2, 4}, Strategy::sliding, 1};
  auto ps = make_params(cfg, 4, rng);
  for (auto& p : ps) std::fill(p.omega2->values().begin(), p.omega2->values().end(), 0.0);
  for (auto& p : ps) std::fill(p.norm2.beta->values().begin(), p.norm2.beta->values().end(), 0.0);
  for (auto& p : ps) std::fill(p.norm2.running_mean->values().begin(), p.norm2.running_mean->values().end(), 0.0);
  auto x = random_input({2, 4, 8, 8}, rng);
  auto y = ms_sar<double>(nullptr, x, cfg, ps, Mode::eval);
  for (std::size_t i = 0; i < x->size(); ++i) EXPECT_NEAR((*y)[i], 0.5 * (*x)[i], 1e-15);
}

TEST(MsSar, BatchPermutationCommutesInEval) {
  Rng rng(10);
  MultiScaleConfig cfg{{1, 2}, Strategy::regional, 1};
  auto ps = make_params(cfg, 4, rng);
  auto x = random_input({3, 4, 4, 4}, rng);
  auto y = ms_sar<double>(nullptr, x, cfg, ps, Mode::eval);
  const std::size_t img = 64;
  const std::size_t perm[3] = {2, 0, 1};
  std::vector<double> px(x->size());
  for (std::size_t n = 0; n < 3; ++n)
    std::copy_n(x->values().begin() + perm[n] * img, img, px.begin() + n * img);
  auto py = ms_sar<double>(nullptr, make_tensor<double>(x->shape(), px), cfg, ps, Mode::eval);
  for (std::size_t n = 0; n < 3; ++n)
    for (std::size_t i = 0; i < img; ++i) EXPECT_EQ((*py)[n * img + i], (*y)[perm[n] * img + i]);
}

TEST(MsSar, ParameterCountMismatchRejected) {
  Rng rng(11);
  MultiScaleConfig cfg{{1, 2, 4}, Strategy::regional, 1};
  std::vector<RecalibrationParams<double>> ps;
  ps.emplace_back(4, 4, 2, rng);
  auto x = random_input({1, 4, 4, 4}, rng);
  EXPECT_THROW(ms_sar<double>(nullptr, x, cfg, ps, Mode::eval), std::invalid_argument);
}

TEST(MultiScaleRecalibrationUnit, MatchesFreeFunctionAndRegisters) {
  Rng rng(12);
  MultiScaleConfig cfg{{1, 2}, Strategy::sliding, 2};
  MultiScaleRecalibration<double> unit(cfg, 8, 8, 6, 6, rng);
  EXPECT_EQ(unit.bottleneck(), 2u);
  auto x = random_input({2, 8, 6, 6}, rng);
  auto a = unit.apply(nullptr, x, Mode::eval);
  auto b = ms_sar<double>(nullptr, x, cfg, unit.params(), Mode::eval);
  EXPECT_EQ(a->values(), b->values());
  ParameterRegistry<double> reg;
  unit.register_into(reg, "r");
  // omega1, omega2 and two norms (gamma, beta, running mean, running var) per scale
  ASSERT_EQ(reg.size(), 2u * (2 + 8));
  EXPECT_EQ(reg.entries()[0].name, "r.scale1.omega1");
  EXPECT_EQ(reg.trainable_count(), 2u * (2 * 8 + 8 * 2 + 2 * 2 + 2 * 8));
}

TEST(MultiScaleRecalibrationUnit, SeparateSourceAndTarget) {
  Rng rng(13);
  MultiScaleConfig cfg{{1, 2}, Strategy::regional, 1};
  MultiScaleRecalibration<double> unit(cfg, 10, 3, 4, 4, rng);
  auto src = random_input({2, 10, 4, 4}, rng);
  auto tgt = random_input({2, 3, 4, 4}, rng);
  auto y = unit.apply(nullptr, tgt, src, Mode::eval);
  EXPECT_EQ(y->shape(), tgt->shape());
  auto z = unit.weights(nullptr, unit.pool(nullptr, src), Mode::eval);
  for (std::size_t i = 0; i < y->size(); ++i) EXPECT_EQ((*y)[i], (*tgt)[i] * (*z)[i]);
  EXPECT_THROW(unit.apply(nullptr, tgt, tgt, Mode::eval), ShapeError);
}
