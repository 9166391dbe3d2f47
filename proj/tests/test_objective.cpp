#include <gtest/gtest.h>

#include "test_support.hpp"

using namespace tcma;
using namespace tcma::testing;

namespace {

void expect_breakdown_near(const LossBreakdown& a, const LossBreakdown& b, double tol) {
  EXPECT_NEAR(a.video.contrastive, b.video.contrastive, tol);
  EXPECT_NEAR(a.video.pearson, b.video.pearson, tol);
  EXPECT_NEAR(a.frame.contrastive, b.frame.contrastive, tol);
  EXPECT_NEAR(a.frame.pearson, b.frame.pearson, tol);
  EXPECT_NEAR(a.patch.contrastive, b.patch.contrastive, tol);
  EXPECT_NEAR(a.patch.pearson, b.patch.pearson, tol);
  EXPECT_NEAR(a.total, b.total, tol);
}

}  // namespace

TEST(Objective, BatchedPathMatchesPerPairReference) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    Rng rng(seed);
    const auto corpus = tiny_corpus(seed, 3 + seed % 3);
    const auto heads = random_heads(rng, 8, 3, 2);
    const auto batch = diagonal_batch(corpus);
    expect_breakdown_near(objective_value(heads, batch, {}), reference_objective(heads, batch, {}), 1e-10);
  }
}

TEST(Objective, InitialHeadsMatchReference) {
  const auto corpus = tiny_corpus(4, 5);
  const auto heads = HeadParameters::initial(8, 8, 3);
  const auto batch = diagonal_batch(corpus);
  expect_breakdown_near(objective_value(heads, batch, {}), reference_objective(heads, batch, {}), 1e-10);
}

TEST(Objective, GradientMatchesFiniteDifferences) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    Rng rng(1000 + seed);
    const auto corpus = tiny_corpus(seed, 3);
    const auto heads = random_heads(rng, 8, 3, 2);
    const auto check = gradient_check(heads, diagonal_batch(corpus), {});
    EXPECT_LT(check.worst, 1e-6) << "seed " << seed << " worst tensor " << check.worst_name;
  }
}

TEST(Objective, SkippedLevelsContributeNothing) {
  const auto corpus = tiny_corpus(2, 4);
  Rng rng(2);
  const auto heads = random_heads(rng, 8, 3, 2);
  LossConfig cfg;
  cfg.lambda_frame = 0.0;
  cfg.lambda_patch = 0.0;
  const auto b = objective_value(heads, diagonal_batch(corpus), cfg);
  EXPECT_EQ(b.frame.total(), 0.0);
  EXPECT_EQ(b.patch.total(), 0.0);
  EXPECT_NEAR(b.total, 5.0 * b.video.total(), 1e-12);
}

TEST(Objective, VideoLevelHasNoHeadGradientExceptScale) {
  const auto corpus = tiny_corpus(3, 4);
  Rng rng(3);
  const auto heads = random_heads(rng, 8, 3, 2);
  LossConfig cfg;
  cfg.lambda_frame = cfg.lambda_patch = 0.0;
  ad::Graph g;
  const auto hv = ad::HeadVars::bind(g, heads);
  g.backward(build_objective(g, hv, heads, diagonal_batch(corpus), cfg).loss);
  hv.for_each([&](std::string_view name, ad::Var v) {
    const double n = norm(g.grad(v).data());
    if (name == "logit_scale") EXPECT_GT(n, 0.0);
    else EXPECT_EQ(n, 0.0) << name;
  });
}

TEST(Objective, RejectsNonSquareBatch) {
  const auto corpus = tiny_corpus(1, 3);
  const auto batch = make_batch(corpus, {0, 1}, {0});
  EXPECT_THROW(objective_value(HeadParameters::initial(8), batch, {}), DimensionError);
}

TEST(Objective, PatchBudgetAboveMIsConfigError) {
  const auto corpus = tiny_corpus(1, 3);
  EXPECT_THROW(objective_value(HeadParameters::initial(8, 3, 7), diagonal_batch(corpus), {}), ConfigError);
}
