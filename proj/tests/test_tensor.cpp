#include <gtest/gtest.h>

#include "gsgn/gradcheck.hpp"
#include "gsgn/ops.hpp"

namespace {

using namespace gsgn;
using F = Tensor<float>;
using D = Tensor<double>;

TEST(Tensor, ElementwiseArithmetic) {
  EXPECT_EQ(add(F::from({1, 2}), F::from({3, 4})).values(), (std::vector<float>{4, 6}));
  EXPECT_EQ(mul(F::from({2}), F::from({0.5f})).values(), (std::vector<float>{1}));
  EXPECT_DOUBLE_EQ(log10(D::from({0.01})).item(), -2.0);
}

TEST(Tensor, Reductions) {
  EXPECT_EQ(mean(F::from({1, 3})).item(), 2.0f);
  EXPECT_EQ(l2_norm(F::from({3, 4}), {0}).item(), 5.0f);
  auto s = sum(F::ones({2, 3}), {0});
  EXPECT_EQ(s.shape(), (Shape{3}));
  EXPECT_EQ(s.values(), (std::vector<float>{2, 2, 2}));
}

TEST(Tensor, BroadcastShapes) {
  // Equal-rank broadcasting plus single-element tensors; no implicit rank padding.
  EXPECT_EQ(add(F::ones({2, 1, 4}), F::ones({1, 3, 1})).shape(), (Shape{2, 3, 4}));
  EXPECT_EQ(add(F::ones({2, 3}), F::scalar(1)).shape(), (Shape{2, 3}));
  EXPECT_THROW(add(F::ones({2, 3}), F::ones({1, 4})), ShapeError);
  EXPECT_THROW(add(F::ones({2, 1, 4}), F::ones({3, 1})), ShapeError);
}

TEST(Tensor, RejectsBadConstruction) {
  EXPECT_THROW(F(Shape{2, 2}, {1, 2, 3}), ShapeError);
  EXPECT_THROW(F(Shape{0}, {}), ShapeError);
}

TEST(Tensor, NonFiniteResultsThrow) {
  EXPECT_THROW(log(F::from({0.0f})), NumericError);
  EXPECT_THROW(div(F::from({1.0f}), F::from({0.0f})), NumericError);
}

TEST(Autograd, SquareGradient) {
  auto x = F::from({1, 2});
  x.set_requires_grad(true);
  backward(sum(mul(x, x)));
  EXPECT_EQ(x.grad().values(), (std::vector<float>{2, 4}));
}

TEST(Autograd, MeanGradient) {
  auto x = F::from({1, 2, 3, 4});
  x.set_requires_grad(true);
  backward(mean(x));
  EXPECT_EQ(x.grad().values(), (std::vector<float>(4, 0.25f)));
}

TEST(Autograd, IndependentLeafGetsZeros) {
  auto x = F::from({1, 2}), y = F::from({5, 6});
  x.set_requires_grad(true);
  y.set_requires_grad(true);
  auto g = grad(sum(mul(x, x)), {x, y});
  EXPECT_EQ(g[1].values(), (std::vector<float>{0, 0}));
}

TEST(Autograd, GradientsAccumulateAcrossBackwardCalls) {
  auto x = F::from({3});
  x.set_requires_grad(true);
  backward(mul(x, x));
  backward(mul(x, x));
  EXPECT_EQ(x.grad().item(), 12.0f);
  x.zero_grad();
  EXPECT_FALSE(x.grad().defined());
}

TEST(Autograd, FunctionalGradLeavesBuffersUntouched) {
  auto x = F::from({3});
  x.set_requires_grad(true);
  auto g = grad(mul(x, x), {x});
  EXPECT_EQ(g[0].item(), 6.0f);
  EXPECT_FALSE(x.grad().defined());
}

TEST(Autograd, ReleasedGraphCannotBeReused) {
  auto x = F::from({3});
  x.set_requires_grad(true);
  auto y = mul(x, x);
  backward(y);
  EXPECT_THROW(backward(y), GraphError);
}

TEST(Autograd, RetainedGraphCanBeReused) {
  auto x = F::from({3});
  x.set_requires_grad(true);
  auto y = mul(x, x);
  backward(y, true);
  backward(y);
  EXPECT_EQ(x.grad().item(), 12.0f);
}

TEST(Autograd, BackwardNeedsScalarRecordedRoot) {
  auto x = F::from({1, 2});
  x.set_requires_grad(true);
  EXPECT_THROW(backward(mul(x, x)), GraphError);
  EXPECT_THROW(backward(sum(F::from({1, 2}))), GraphError);
}

TEST(Autograd, NoGradGuardRecordsNothing) {
  auto x = F::from({1, 2});
  x.set_requires_grad(true);
  NoGradGuard ng;
  auto y = sum(mul(x, x));
  EXPECT_FALSE(y.requires_grad());
}

TEST(Autograd, SecondDerivative) {
  auto x = D::from({2.0});
  x.set_requires_grad(true);
  auto y = pow(x, 3.0);
  auto g = grad(y, {x}, true)[0];
  EXPECT_DOUBLE_EQ(g.item(), 12.0);
  auto h = grad(g, {x})[0];
  EXPECT_DOUBLE_EQ(h.item(), 12.0);
}

TEST(GradCheck, SquareFunction) {
  auto x = D::from({1.0, 2.0});
  EXPECT_LT(finite_difference_check([](const D& v) { return sum(mul(v, v)); }, x), 1e-6);
}

TEST(GradCheck, ConstantFunction) {
  auto x = D::from({1.0, 2.0});
  EXPECT_EQ(finite_difference_check([](const D&) { return D::scalar(3.0); }, x), 0.0);
}

TEST(GradCheck, DetectsAWrongRule) {
  // The analytic pass and the probes see different functions; the oracle
  // must report the mismatch.
  auto x = D::from({0.5, 1.5});
  x.set_requires_grad(true);
  const double err = finite_difference_check(
      [&] {
        if (grad_enabled()) return sum(mul(x, x));   // analytic pass: 2x
        return sum(affine(mul(x, x), 2.0, 0.0));     // probes: 4x
      },
      {x});
  EXPECT_GT(err, 0.5);
}

}  // namespace
