#include <gtest/gtest.h>

#include <cmath>

#include "mssar/gradcheck.hpp"

using namespace mssar;

namespace {

// y = x^2 elementwise, with the backward pass scaled by `factor` (1 = correct).
TensorPtr<double> square(Tape<double>* tape, const TensorPtr<double>& x, double factor) {
  auto out = make_tensor<double>(x->shape());
  for (std::size_t i = 0; i < x->size(); ++i) (*out)[i] = (*x)[i] * (*x)[i];
  if (tape && x->requires_grad()) {
    out->set_requires_grad(true);
    Tensor<double>* o = out.get();
    tape->record("square", {x}, out, [x, o, factor]() {
      auto g = o->grad();
      auto dx = x->grad();
      for (std::size_t i = 0; i < g.size(); ++i) dx[i] += factor * 2.0 * (*x)[i] * g[i];
    });
  }
  return out;
}

}  // namespace

TEST(Gradcheck, RelativeErrorFloor) {
  EXPECT_DOUBLE_EQ(relative_error(1.0, 1.0, 1e-4), 0.0);
  EXPECT_DOUBLE_EQ(relative_error(2.0, 1.0, 1e-4), 0.5);
  EXPECT_DOUBLE_EQ(relative_error(1e-9, 0.0, 1e-4), 1e-5);
}

TEST(Gradcheck, AcceptsCorrectAndRejectsWrongGradient) {
  Rng rng(1);
  auto x = detail::random_leaf({2, 3, 2, 2}, rng);
  const Tensor<double> w({2, 3, 2, 2}, random_vector<double>(24, rng));
  auto good = gradcheck("square", [&](Tape<double>* t) { return weighted_sum(t, square(t, x, 1.0), w); }, {x}, rng);
  EXPECT_TRUE(good.pass) << good.max_rel_error;
  EXPECT_EQ(good.checked, 24u);
  auto bad = gradcheck("square", [&](Tape<double>* t) { return weighted_sum(t, square(t, x, 1.01), w); }, {x}, rng);
  EXPECT_FALSE(bad.pass);
  EXPECT_NEAR(bad.max_rel_error, 0.01 / 1.01, 1e-4);
}

TEST(Gradcheck, MissingGradientIsCaught) {
  Rng rng(2);
  auto x = detail::random_leaf({1, 4, 1, 1}, rng, 0.5, 1.0);
  auto y = detail::random_leaf({1, 4, 1, 1}, rng, 0.5, 1.0);
  // y is used but its gradient never flows: detach by copying into a fresh tensor
  auto row = gradcheck(
      "detached",
      [&](Tape<double>* t) {
        auto y_copy = make_tensor<double>(y->shape(), y->values());
        return sum(t, mul(t, x, y_copy));
      },
      {x, y}, rng);
  EXPECT_FALSE(row.pass);
}

TEST(Gradcheck, SamplingCapsEntries) {
  Rng rng(3);
  auto x = detail::random_leaf({1, 1, 20, 20}, rng);
  GradcheckOptions opt;
  opt.max_entries = 17;
  auto row = gradcheck("sum", [&](Tape<double>* t) { return sum(t, square(t, x, 1.0)); }, {x}, rng, opt);
  EXPECT_EQ(row.checked, 17u);
  EXPECT_TRUE(row.pass);
}

TEST(Gradcheck, OperatorSuitePasses) {
  const auto rows = operator_gradcheck_suite(11);
  EXPECT_GE(rows.size(), 20u);
  for (const auto& r : rows) {
    EXPECT_TRUE(r.pass) << r.op << " " << r.max_rel_error;
    EXPECT_GT(r.checked, 0u) << r.op;
  }
}
