#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "mssar/gradcheck.hpp"
#include "mssar/ops.hpp"
#include "mssar/random.hpp"
#include "mssar/tape.hpp"

using namespace mssar;

namespace {

TensorPtr<double> rand_tensor(Shape s, Rng& rng, double lo = -1.0, double hi = 1.0) {
  return make_tensor<double>(s, random_vector<double>(s.size(), rng, lo, hi));
}

// Six nested loops, no im2col.
Tensor<double> naive_conv(const Tensor<double>& x, const Tensor<double>& k, std::size_t stride, std::size_t pad) {
  const Shape xs = x.shape(), ks = k.shape();
  const std::size_t oh = (xs.h + 2 * pad - ks.h) / stride + 1, ow = (xs.w + 2 * pad - ks.w) / stride + 1;
  Tensor<double> out({xs.n, ks.n, oh, ow});
  for (std::size_t n = 0; n < xs.n; ++n)
    for (std::size_t o = 0; o < ks.n; ++o)
      for (std::size_t y = 0; y < oh; ++y)
        for (std::size_t xw = 0; xw < ow; ++xw) {
          double acc = 0;
          for (std::size_t c = 0; c < xs.c; ++c)
            for (std::size_t i = 0; i < ks.h; ++i)
              for (std::size_t j = 0; j < ks.w; ++j) {
                const long yy = static_cast<long>(y * stride + i) - static_cast<long>(pad);
                const long xx = static_cast<long>(xw * stride + j) - static_cast<long>(pad);
                if (yy < 0 || xx < 0 || yy >= static_cast<long>(xs.h) || xx >= static_cast<long>(xs.w)) continue;
                acc += x.at(n, c, static_cast<std::size_t>(yy), static_cast<std::size_t>(xx)) * k.at(o, c, i, j);
              }
          out.at(n, o, y, xw) = acc;
        }
  return out;
}

}  // namespace

TEST(Tensor, DataLengthMatchesShape) {
  Tensor<double> t({2, 3, 4, 5});
  EXPECT_EQ(t.size(), 120u);
  EXPECT_THROW(Tensor<double>({1, 1, 2, 2}, std::vector<double>(3)), ShapeError);
  t.ensure_grad();
  EXPECT_EQ(t.grad().size(), t.size());
}

TEST(Conv2d, IdentityKernel) {
  auto x = make_tensor<double>({1, 1, 3, 3}, 1.0);
  auto k = make_tensor<double>({1, 1, 1, 1}, 1.0);
  auto y = conv2d<double>(nullptr, x, k);
  EXPECT_EQ(y->shape(), (Shape{1, 1, 3, 3}));
  for (double v : y->data()) EXPECT_EQ(v, 1.0);
}

TEST(Conv2d, BoxSumCounting) {
  auto x = make_tensor<double>({1, 1, 3, 3}, 1.0);
  auto k = make_tensor<double>({1, 1, 3, 3}, 1.0);
  auto y = conv2d<double>(nullptr, x, k, 1, 1);
  EXPECT_EQ(y->at(0, 0, 1, 1), 9.0);
  EXPECT_EQ(y->at(0, 0, 0, 0), 4.0);
  EXPECT_EQ(y->at(0, 0, 2, 2), 4.0);
  EXPECT_EQ(y->at(0, 0, 0, 1), 6.0);
}

TEST(Conv2d, MatchesNaiveLoops) {
  Rng rng(11);
  auto x = rand_tensor({1, 2, 5, 5}, rng);
  auto k = rand_tensor({3, 2, 3, 3}, rng);
  for (std::size_t stride : {1u, 2u})
    for (std::size_t pad : {0u, 1u}) {
      auto y = conv2d<double>(nullptr, x, k, stride, pad);
      auto ref = naive_conv(*x, *k, stride, pad);
      ASSERT_EQ(y->shape(), ref.shape());
      for (std::size_t i = 0; i < ref.size(); ++i) EXPECT_NEAR((*y)[i], ref[i], 1e-12);
    }
}

TEST(Conv2d, OutputSizeFormula) {
  Rng rng(1);
  auto x = rand_tensor({2, 3, 7, 6}, rng);
  auto k = rand_tensor({4, 3, 3, 3}, rng);
  auto y = conv2d<double>(nullptr, x, k, 2, 1);
  EXPECT_EQ(y->shape(), (Shape{2, 4, (7 + 2 - 3) / 2 + 1, (6 + 2 - 3) / 2 + 1}));
}

TEST(Conv2d, Linearity) {
  Rng rng(3);
  auto x = rand_tensor({2, 3, 6, 6}, rng);
  auto z = rand_tensor({2, 3, 6, 6}, rng);
  auto k = rand_tensor({4, 3, 3, 3}, rng);
  const double a = 0.7, b = -1.3;
  auto mix = make_tensor<double>(x->shape());
  for (std::size_t i = 0; i < x->size(); ++i) (*mix)[i] = a * (*x)[i] + b * (*z)[i];
  auto lhs = conv2d<double>(nullptr, mix, k, 1, 1);
  auto cx = conv2d<double>(nullptr, x, k, 1, 1);
  auto cz = conv2d<double>(nullptr, z, k, 1, 1);
  for (std::size_t i = 0; i < lhs->size(); ++i) EXPECT_NEAR((*lhs)[i], a * (*cx)[i] + b * (*cz)[i], 1e-10);
}

TEST(Conv2d, ShapeMismatchNamesBothShapes) {
  auto x = make_tensor<double>({1, 3, 4, 4});
  auto k = make_tensor<double>({2, 5, 3, 3});
  try {
    conv2d<double>(nullptr, x, k);
    FAIL() << "expected ShapeError";
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find(x->shape().str()), std::string::npos) << msg;
    EXPECT_NE(msg.find(k->shape().str()), std::string::npos) << msg;
  }
  EXPECT_THROW(conv2d<double>(nullptr, x, make_tensor<double>({2, 3, 2, 2})), ShapeError);
}

TEST(Relu, SignCasesAndIdentity) {
  auto x = make_tensor<double>({1, 1, 1, 3}, std::vector<double>{-1, 0, 2});
  auto y = relu<double>(nullptr, x);
  EXPECT_EQ(y->values(), (std::vector<double>{0, 0, 2}));
  Rng rng(2);
  auto p = rand_tensor({1, 2, 3, 3}, rng, 0.1, 2.0);
  EXPECT_EQ(relu<double>(nullptr, p)->values(), p->values());
}

TEST(Relu, PlusNegatedIsAbs) {
  Rng rng(5);
  auto x = rand_tensor({2, 3, 4, 4}, rng);
  auto a = relu<double>(nullptr, x);
  auto b = relu<double>(nullptr, scale<double>(nullptr, x, -1.0));
  for (std::size_t i = 0; i < x->size(); ++i) EXPECT_EQ((*a)[i] + (*b)[i], std::abs((*x)[i]));
}

TEST(Relu, SubgradientAtZeroIsZero) {
  auto x = make_leaf<double>({1, 1, 1, 1}, 0.0);
  Tape<double> tape;
  auto loss = sum(&tape, relu(&tape, x));
  tape.backward(loss);
  EXPECT_EQ(x->grad()[0], 0.0);
}

TEST(Sigmoid, KnownValuesAndSymmetry) {
  auto z = make_tensor<double>({1, 1, 1, 2}, std::vector<double>{0.0, 10.0});
  auto y = sigmoid<double>(nullptr, z);
  EXPECT_EQ((*y)[0], 0.5);
  const long double ref = 1.0L / (1.0L + std::exp(-10.0L));
  EXPECT_NEAR((*y)[1], 0.9999546, 1e-6);
  EXPECT_NEAR((*y)[1], static_cast<double>(ref), 1e-15);
  Rng rng(8);
  auto x = rand_tensor({1, 2, 4, 4}, rng, -30, 30);
  auto p = sigmoid<double>(nullptr, x);
  auto q = sigmoid<double>(nullptr, scale<double>(nullptr, x, -1.0));
  for (std::size_t i = 0; i < x->size(); ++i) {
    EXPECT_NEAR((*p)[i] + (*q)[i], 1.0, 1e-15);
    EXPECT_GT((*p)[i], 0.0);
    EXPECT_LT((*p)[i], 1.0);
  }
}

TEST(BatchNorm, ConstantChannelMapsToBeta) {
  BatchNorm<double> bn(2);
  auto x = make_tensor<double>({3, 2, 2, 2});
  for (std::size_t n = 0; n < 3; ++n)
    for (std::size_t i = 0; i < 4; ++i) {
      (*x)[(n * 2 + 0) * 4 + i] = 5.0;
      (*x)[(n * 2 + 1) * 4 + i] = -2.0;
    }
  auto y = batchnorm<double>(nullptr, x, bn, Mode::train);
  for (double v : y->data()) EXPECT_EQ(v, 0.0);
}

TEST(BatchNorm, ZeroGammaGivesBeta) {
  Rng rng(4);
  BatchNorm<double> bn(3);
  for (double& g : bn.gamma->data()) g = 0.0;
  bn.beta->values() = {0.5, -1.0, 2.0};
  auto x = rand_tensor({4, 3, 2, 2}, rng);
  for (Mode m : {Mode::train, Mode::eval}) {
    auto y = batchnorm<double>(nullptr, x, bn, m);
    for (std::size_t n = 0; n < 4; ++n)
      for (std::size_t c = 0; c < 3; ++c)
        for (std::size_t i = 0; i < 4; ++i) EXPECT_EQ(y->at(n, c, i / 2, i % 2), (*bn.beta)[c]);
  }
}

TEST(BatchNorm, MomentsAfterNormalization) {
  Rng rng(9);
  BatchNorm<double> bn(3);
  auto x = rand_tensor({4, 3, 2, 2}, rng, -10.0, 10.0);
  auto y = batchnorm<double>(nullptr, x, bn, Mode::train);
  for (std::size_t c = 0; c < 3; ++c) {
    double s = 0, sq = 0;
    for (std::size_t n = 0; n < 4; ++n)
      for (std::size_t i = 0; i < 4; ++i) s += y->at(n, c, i / 2, i % 2);
    const double mean = s / 16;
    for (std::size_t n = 0; n < 4; ++n)
      for (std::size_t i = 0; i < 4; ++i) sq += std::pow(y->at(n, c, i / 2, i % 2) - mean, 2);
    EXPECT_NEAR(mean, 0.0, 1e-10);
    EXPECT_NEAR(sq / 16, 1.0, 1e-6);
  }
}

TEST(BatchNorm, RunningStatisticsFollowEma) {
  Rng rng(10);
  BatchNorm<double> bn(1);
  auto x = rand_tensor({4, 1, 2, 2}, rng);
  double s = 0;
  for (double v : x->data()) s += v;
  const double mean = s / 16;
  double sq = 0;
  for (double v : x->data()) sq += (v - mean) * (v - mean);
  batchnorm<double>(nullptr, x, bn, Mode::train);
  EXPECT_NEAR((*bn.running_mean)[0], 0.1 * mean, 1e-15);
  EXPECT_NEAR((*bn.running_var)[0], 0.9 + 0.1 * sq / 15, 1e-15);
  auto e = batchnorm<double>(nullptr, x, bn, Mode::eval);
  EXPECT_NEAR((*e)[0], ((*x)[0] - (*bn.running_mean)[0]) / std::sqrt((*bn.running_var)[0] + 1e-5), 1e-12);
}

TEST(FullyConnected, IdentityZeroAndLoopOracle) {
  Rng rng(12);
  auto x = rand_tensor({1, 3, 1, 1}, rng);
  auto eye = make_tensor<double>({3, 3, 1, 1});
  for (std::size_t i = 0; i < 3; ++i) (*eye)[i * 3 + i] = 1.0;
  EXPECT_EQ(fully_connected<double>(nullptr, x, eye)->values(), x->values());
  auto zero = make_tensor<double>({3, 3, 1, 1});
  const auto z = fully_connected<double>(nullptr, x, zero);
  for (double v : z->data()) EXPECT_EQ(v, 0.0);

  auto w = rand_tensor({4, 3, 1, 1}, rng);
  auto y = fully_connected<double>(nullptr, x, w);
  for (std::size_t o = 0; o < 4; ++o) {
    double acc = 0;
    for (std::size_t i = 0; i < 3; ++i) acc += (*w)[o * 3 + i] * (*x)[i];
    EXPECT_NEAR((*y)[o], acc, 1e-12);
  }
  EXPECT_THROW(fully_connected<double>(nullptr, rand_tensor({1, 5, 1, 1}, rng), w), ShapeError);
}

TEST(Elementwise, MulAddConcatPool) {
  Rng rng(13);
  auto x = rand_tensor({2, 3, 2, 2}, rng);
  auto ones = make_tensor<double>(x->shape(), 1.0);
  EXPECT_EQ(mul<double>(nullptr, x, ones)->values(), x->values());
  const auto diff = add<double>(nullptr, x, scale<double>(nullptr, x, -1.0));
  for (double v : diff->data()) EXPECT_EQ(v, 0.0);
  auto g = global_avg_pool<double>(nullptr, make_tensor<double>({1, 1, 2, 2}, std::vector<double>{1, 2, 3, 4}));
  EXPECT_EQ((*g)[0], 2.5);
  auto c = concat_channels<double>(nullptr, x, rand_tensor({2, 1, 2, 2}, rng));
  EXPECT_EQ(c->shape(), (Shape{2, 4, 2, 2}));
  EXPECT_EQ(c->at(1, 2, 1, 0), x->at(1, 2, 1, 0));
  EXPECT_THROW(mul<double>(nullptr, x, rand_tensor({2, 3, 2, 1}, rng)), ShapeError);
  EXPECT_THROW(add<double>(nullptr, x, rand_tensor({1, 3, 2, 2}, rng)), ShapeError);
  EXPECT_THROW(concat_channels<double>(nullptr, x, rand_tensor({2, 1, 3, 2}, rng)), ShapeError);
}

TEST(Backward, SumGivesOnes) {
  Rng rng(14);
  auto x = make_leaf<double>({2, 2, 3, 3}, random_vector<double>(36, rng));
  Tape<double> tape;
  auto loss = sum(&tape, x);
  tape.backward(loss);
  for (double g : x->grad()) EXPECT_EQ(g, 1.0);
}

TEST(Backward, HalfSquaredNormGivesX) {
  Rng rng(15);
  auto x = make_leaf<double>({1, 2, 3, 3}, random_vector<double>(18, rng));
  Tape<double> tape;
  auto loss = scale(&tape, sum(&tape, mul(&tape, x, x)), 0.5);
  tape.backward(loss);
  for (std::size_t i = 0; i < x->size(); ++i) EXPECT_DOUBLE_EQ(x->grad()[i], (*x)[i]);
}

TEST(Backward, Diagnostics) {
  Tape<double> tape;
  auto x = make_leaf<double>({1, 1, 1, 1}, 2.0);
  EXPECT_THROW(tape.backward(x), std::logic_error);  // nothing recorded yet
  auto y = make_leaf<double>({1, 1, 2, 1}, 1.0);
  auto v = relu(&tape, y);
  EXPECT_THROW(tape.backward(v), std::logic_error);  // not scalar
  auto loss = sum(&tape, v);
  tape.backward(loss);
  EXPECT_THROW(tape.backward(loss), std::logic_error);  // consumed
}

TEST(Tape, TopologicalOrderAndSingleVisit) {
  Rng rng(16);
  auto x = make_leaf<double>({2, 2, 2, 2}, random_vector<double>(16, rng));
  Tape<double> tape;
  auto a = relu(&tape, x);
  auto b = sigmoid(&tape, x);
  auto loss = sum(&tape, mul(&tape, a, b));
  ASSERT_EQ(tape.size(), 4u);
  const auto& e = tape.entries();
  for (std::size_t i = 0; i < e.size(); ++i)
    for (const auto& in : e[i].inputs)
      for (std::size_t j = i; j < e.size(); ++j) EXPECT_NE(in.get(), e[j].output.get());
  tape.backward(loss);
  EXPECT_TRUE(tape.consumed());
}

TEST(Determinism, ForwardIsBitwiseRepeatable) {
  Rng rng(17);
  auto x = rand_tensor({2, 4, 8, 8}, rng);
  auto k = rand_tensor({6, 4, 3, 3}, rng);
  BatchNorm<double> bn1(6), bn2(6);
  auto run = [&](BatchNorm<double>& bn) {
    return sigmoid<double>(nullptr, batchnorm<double>(nullptr, conv2d<double>(nullptr, x, k, 1, 1), bn, Mode::train));
  };
  EXPECT_EQ(run(bn1)->values(), run(bn2)->values());
}

TEST(Gradients, EveryOperatorMatchesFiniteDifferences) {
  for (const auto& row : operator_gradcheck_suite(2024)) {
    EXPECT_TRUE(row.pass) << row.op << " max rel error " << row.max_rel_error;
    EXPECT_GT(row.checked, 0u) << row.op;
  }
}

TEST(Gradients, NoNaNOnFiniteInputs) {
  Rng rng(18);
  auto x = make_leaf<double>({2, 3, 4, 4}, random_vector<double>(96, rng, -50, 50));
  BatchNorm<double> bn(3);
  Tape<double> tape;
  auto loss = sum(&tape, sigmoid(&tape, batchnorm(&tape, x, bn, Mode::train)));
  tape.backward(loss);
  EXPECT_TRUE(x->all_finite());
  for (double g : x->grad()) EXPECT_TRUE(std::isfinite(g));
}
