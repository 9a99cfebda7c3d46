#include <gtest/gtest.h>

#include <random>

#include "fd_suite.hpp"
#include "lopt/errors.hpp"

using namespace lopt;
using namespace lopt::testing;
using lopt::ag::Parameter;
using lopt::ag::Tape;
using lopt::ag::Var;

TEST(FiniteDifference, EveryPrimitiveAgreesOnRandomInstances) {
  for (const auto& r : run_fd_suite(20, 17)) {
    SCOPED_TRACE(r.primitive);
    EXPECT_GE(r.instances, 20u);
    EXPECT_LT(r.worst, 1e-4);
    std::printf("%-18s n=%zu worst=%.3g\n", r.primitive.c_str(), r.instances, r.worst);
  }
}

namespace {

Tensor<double> filled(Shape s, double start) {
  Tensor<double> t(std::move(s));
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = start + 0.1 * static_cast<double>(i);
  return t;
}

}  // namespace

TEST(StopGradient, BlocksEverythingUpstream) {
  Parameter<double> w{"w", filled({2, 3}, 0.5)};
  Parameter<double> v{"v", filled({2, 3}, -0.2)};
  Tape<double> tape;
  auto a = ag::stop_gradient(ag::mul(tape.param(w), tape.param(w)));
  auto loss = ag::sum(ag::mul(a, tape.param(v)));
  EXPECT_FALSE(a.requires_grad());
  const auto g = tape.backward(loss);
  EXPECT_FALSE(g.has(w));
  ASSERT_TRUE(g.has(v));
  // d/dv sum(w^2 * v) = w^2
  for (std::size_t i = 0; i < 6; ++i) EXPECT_DOUBLE_EQ((*g.find(v))[i], w.value[i] * w.value[i]);
}

TEST(Backward, UnreachedParametersGetNoEntry) {
  Parameter<double> used{"used", filled({3}, 1.0)};
  Parameter<double> unused{"unused", filled({3}, 2.0)};
  Tape<double> tape;
  tape.param(unused);
  const auto g = tape.backward(ag::sum(tape.param(used)));
  EXPECT_TRUE(g.has(used));
  EXPECT_FALSE(g.has(unused));
  EXPECT_EQ(g.size(), 1u);
}

TEST(Backward, ReusedParameterAccumulates) {
  Parameter<double> w{"w", filled({4}, 0.3)};
  Tape<double> tape;
  EXPECT_EQ(tape.param(w).id, tape.param(w).id);
  auto x = tape.param(w);
  const auto g = tape.backward(ag::sum(ag::add(ag::mul(x, x), x)));
  for (std::size_t i = 0; i < 4; ++i) EXPECT_DOUBLE_EQ((*g.find(w))[i], 2 * w.value[i] + 1);
}

TEST(Shapes, MismatchesThrowShapeError) {
  Tape<double> tape;
  auto a = tape.variable(filled({2, 3}, 0.0));
  auto b = tape.variable(filled({3, 2}, 0.0));
  auto c = tape.variable(filled({4}, 0.0));
  EXPECT_THROW(ag::add(a, b), ShapeError);
  EXPECT_THROW(ag::mul(a, c), ShapeError);
  EXPECT_THROW(ag::matmul(a, a), ShapeError);
  EXPECT_NO_THROW(ag::matmul(a, b));
  EXPECT_THROW(ag::slice(c, 3, 2), ShapeError);
  const std::vector<double> w(3, 1.0);
  EXPECT_THROW(ag::weighted_sum(c, std::span<const double>(w)), ShapeError);
}

TEST(Backward, NonScalarLossIsRejected) {
  Tape<double> tape;
  auto a = tape.variable(filled({2}, 0.0));
  EXPECT_THROW(tape.backward(a), Error);
}

TEST(Gelu, ValueAndSlopeAtZero) {
  Tape<double> tape;
  auto x = tape.variable(Tensor<double>({1}, {0.0}));
  auto y = ag::gelu(x);
  EXPECT_EQ(y.value()[0], 0.0);
  tape.backward(ag::sum(y), true);
  EXPECT_NEAR((*tape.grad(x))[0], 0.5, 1e-15);
}

// sum(sg(x) * w): d/dw = x and x gets nothing.
TEST(StopGradient, ProductWithWeights) {
  Tape<double> tape;
  const Tensor<double> xv = filled({3}, 0.7), wv = filled({3}, -1.0);
  auto x = tape.variable(xv);
  auto w = tape.variable(wv);
  tape.backward(ag::sum(ag::mul(ag::stop_gradient(x), w)), true);
  for (std::size_t i = 0; i < 3; ++i) EXPECT_EQ((*tape.grad(w))[i], xv[i]);
  const auto* gx = tape.grad(x);
  if (gx)
    for (double v : gx->values()) EXPECT_EQ(v, 0.0);
}

// sum(sg(x) * x): only the plain factor differentiates, so the gradient is x.
TEST(StopGradient, SelfProduct) {
  Tape<double> tape;
  const Tensor<double> xv = filled({4}, -0.3);
  auto x = tape.variable(xv);
  tape.backward(ag::sum(ag::mul(ag::stop_gradient(x), x)), true);
  for (std::size_t i = 0; i < 4; ++i) EXPECT_DOUBLE_EQ((*tape.grad(x))[i], xv[i]);
}

TEST(FiniteDifferenceCheck, SquareAtThree) {
  const ag::ScalarBuilder<double> f = [](Tape<double>&, Var<double> x) { return ag::sum(ag::mul(x, x)); };
  EXPECT_LT(ag::finite_difference_check(f, Tensor<double>({1}, {3.0}), 1e-5), 1e-8);
}

// Random compositions of four primitives against central differences.
TEST(FiniteDifferenceCheck, RandomFourOpGraphs) {
  std::mt19937_64 rng(31);
  std::normal_distribution<double> g;
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t r = 2 + rng() % 3, c = 3 + rng() % 3;
    Tensor<double> w({c, c}), point({r, c});
    for (auto& v : w.values()) v = g(rng);
    for (auto& v : point.values()) v = g(rng);
    std::vector<double> weights(r * c);
    for (auto& v : weights) v = g(rng);
    const int variant = static_cast<int>(rng() % 3);
    const ag::ScalarBuilder<double> f = [&](Tape<double>& t, Var<double> x) {
      Var<double> h = ag::matmul(x, t.constant(w));
      h = variant == 0 ? ag::gelu(h) : variant == 1 ? ag::softmax(h) : ag::mul(h, x);
      h = ag::add(h, x);
      return ag::weighted_sum(h, std::span<const double>(weights));
    };
    EXPECT_LT(ag::finite_difference_check(f, point, 1e-5), 1e-4) << trial;
  }
}
