#include <gtest/gtest.h>

#include <cmath>
#include <functional>

#include "tcma/autodiff.hpp"
#include "tcma/random.hpp"

using namespace tcma;
namespace ad = tcma::ad;

namespace {

Tensor random_tensor(Rng& rng, Shape shape, double scale = 1.0) {
  Tensor t(std::move(shape));
  for (double& v : t.data()) v = scale * rng.normal();
  return t;
}

double rel_err(const Tensor& a, const Tensor& b) {
  double num = 0.0, da = 0.0, db = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    num += (a[i] - b[i]) * (a[i] - b[i]);
    da += a[i] * a[i];
    db += b[i] * b[i];
  }
  return std::sqrt(num) / std::max({std::sqrt(da), std::sqrt(db), 1e-300});
}

// Builds f(x) on a fresh graph; returns (value, analytic gradient wrt x).
using Builder = std::function<ad::Var(ad::Graph&, ad::Var)>;

std::pair<double, Tensor> eval_with_grad(const Builder& build, const Tensor& x) {
  ad::Graph g;
  const auto xv = g.parameter(x);
  const auto root = build(g, xv);
  g.backward(root);
  return {g.value(root)[0], g.grad(xv)};
}

double eval(const Builder& build, const Tensor& x) {
  ad::Graph g;
  return g.value(build(g, g.parameter(x)))[0];
}

void expect_gradient_matches(const Builder& build, Shape shape, int seeds = 20) {
  for (int seed = 0; seed < seeds; ++seed) {
    Rng rng(100 + seed);
    const Tensor x = random_tensor(rng, shape);
    const auto [value, analytic] = eval_with_grad(build, x);
    const Tensor numeric = finite_diff_grad([&](const Tensor& t) { return eval(build, t); }, x, 1e-5);
    EXPECT_LT(rel_err(analytic, numeric), 1e-6) << "seed " << seed;
  }
}

}  // namespace

TEST(Backward, SumOfSquaresGivesTwoX) {
  ad::Graph g;
  const Tensor x = Tensor::vector({1.5, -2.0, 0.25});
  const auto xv = g.parameter(x);
  const auto root = ad::sum(g, ad::square(g, xv));
  g.backward(root);
  for (std::size_t i = 0; i < 3; ++i) EXPECT_DOUBLE_EQ(g.grad(xv)[i], 2 * x[i]);
}

TEST(Backward, DisconnectedParameterStaysZero) {
  ad::Graph g;
  const auto x = g.parameter(Tensor::vector({1, 2}));
  const auto unused = g.parameter(Tensor::vector({3, 4, 5}));
  const auto root = ad::sum(g, x);
  g.backward(root);
  for (double v : g.grad(unused).data()) EXPECT_EQ(v, 0.0);
  EXPECT_EQ(g.grad(unused).shape(), g.value(unused).shape());
}

TEST(Backward, NonScalarRootIsContractError) {
  ad::Graph g;
  const auto x = g.parameter(Tensor::vector({1, 2}));
  EXPECT_THROW(g.backward(ad::scale(g, x, 2.0)), ContractError);
}

TEST(Backward, DiamondVisitsEachNodeOnce) {
  // y = x*x + 3x reuses x along two paths.
  ad::Graph g;
  const auto x = g.parameter(Tensor::vector({2.0}));
  const auto sq = ad::mul(g, x, x);
  const auto lin = ad::scale(g, x, 3.0);
  const auto root = ad::sum(g, ad::add(g, sq, lin));
  g.backward(root);
  EXPECT_DOUBLE_EQ(g.grad(x)[0], 2 * 2.0 + 3.0);
  EXPECT_EQ(g.backward_visits(), 4u);  // mul, scale, add, sum
}

TEST(Backward, ConstantsDoNotRecordRules) {
  ad::Graph g;
  const auto c = g.constant(Tensor::vector({1, 2}));
  const auto y = ad::square(g, c);
  EXPECT_FALSE(g.needs_grad(y));
}

TEST(Backward, SoftmaxDotMatchesFiniteDifferences) {
  Rng rng(7);
  const Tensor w = random_tensor(rng, {6});
  expect_gradient_matches(
      [&](ad::Graph& g, ad::Var x) {
        const auto tau = g.constant(Tensor::scalar(0.7));
        return ad::dot(g, ad::softmax_temp(g, x, tau), g.constant(w));
      },
      {6});
}

TEST(Backward, SoftmaxTemperatureGradient) {
  Rng rng(8);
  const Tensor s = random_tensor(rng, {5});
  const Tensor w = random_tensor(rng, {5});
  expect_gradient_matches(
      [&](ad::Graph& g, ad::Var t) {
        const auto tau = ad::add_constant(g, ad::softplus(g, t), 0.1);
        return ad::dot(g, ad::softmax_temp(g, g.constant(s), tau), g.constant(w));
      },
      {1});
}

TEST(Backward, EveryGenericOpMatchesFiniteDifferences) {
  Rng rng(9);
  const Tensor b = random_tensor(rng, {3, 4});
  const Tensor m = random_tensor(rng, {4, 2});
  const Tensor w34 = random_tensor(rng, {3, 4});
  const Tensor w3 = random_tensor(rng, {3});
  const Tensor w2 = random_tensor(rng, {2, 4});
  // add / sub / mul / dot
  expect_gradient_matches(
      [&](ad::Graph& g, ad::Var x) {
        const auto c = g.constant(b);
        const auto y = ad::mul(g, ad::add(g, x, c), ad::sub(g, x, ad::scale(g, c, 0.5)));
        return ad::dot(g, y, g.constant(w34));
      },
      {3, 4});
  // matmul (both sides) and reshape
  expect_gradient_matches(
      [&](ad::Graph& g, ad::Var x) {
        const auto y = ad::matmul(g, x, g.constant(m));
        const auto z = ad::matmul(g, ad::reshape(g, y, {2, 3}), x);
        return ad::dot(g, z, g.constant(w2));
      },
      {3, 4});
  // softplus, exp, add_scalar, weighted_sum
  expect_gradient_matches(
      [&](ad::Graph& g, ad::Var x) {
        const auto s = ad::sum(g, ad::softplus(g, x));
        const auto e = ad::sum(g, ad::exp(g, ad::scale(g, x, 0.3)));
        const auto shifted = ad::add_scalar(g, g.constant(w3), s);
        return ad::weighted_sum(g, {s, e, ad::dot(g, shifted, shifted)}, {0.5, 2.0, 0.1});
      },
      {3});
  // mean_axis on each axis
  for (std::size_t axis = 0; axis < 3; ++axis) {
    const Tensor wm = random_tensor(rng, axis == 0 ? Shape{3, 4} : axis == 1 ? Shape{2, 4} : Shape{2, 3});
    expect_gradient_matches(
        [&](ad::Graph& g, ad::Var x) { return ad::dot(g, ad::mean_axis(g, x, axis), g.constant(wm)); }, {2, 3, 4},
        5);
  }
  // l2_normalize_last
  expect_gradient_matches(
      [&](ad::Graph& g, ad::Var x) { return ad::dot(g, ad::l2_normalize_last(g, x), g.constant(w34)); }, {3, 4});
}
