#include <gtest/gtest.h>

#include <chrono>
#include <cmath>
#include <random>

#include "gspen/inner_solver.hpp"
#include "oracles.hpp"

namespace gspen {
namespace {

using testing::enumerate_argmax;
using testing::enumerate_gibbs_marginals;
using testing::max_abs_diff;
using testing::random_scores;
using testing::random_tree;

InnerConfig bethe(double eps) {
  InnerConfig c;
  c.entropy = eps;
  c.counting = CountingPreset::bethe;
  return c;
}

TEST(TreeExactMarginals, SingleVariableIsSoftmax) {
  auto g = build_chain_graph(1, {2});
  ScoreVector s(std::vector<double>{0.3, -1.2});
  auto p = tree_exact_marginals(g, s, 1.0);
  const double z = std::exp(0.3) + std::exp(-1.2);
  EXPECT_NEAR(p[0], std::exp(0.3) / z, 1e-15);
  EXPECT_NEAR(p[1], std::exp(-1.2) / z, 1e-15);
}

TEST(TreeExactMarginals, MatchesEnumerationOnChain) {
  std::mt19937_64 rng(3);
  auto g = build_chain_graph(3, {3, 3, 3});
  for (int trial = 0; trial < 5; ++trial) {
    auto s = random_scores(g, rng);
    EXPECT_LE(max_abs_diff(tree_exact_marginals(g, s, 1.0).values, enumerate_gibbs_marginals(g, s, 1.0).values), 1e-10);
  }
}

TEST(TreeExactMarginals, MatchesEnumerationOnRandomForestsAndStars) {
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 20; ++trial) {
    auto g = random_tree(rng, 1 + trial % 5, 4);
    auto s = random_scores(g, rng);
    const double eps = 0.5 + 0.1 * trial;
    EXPECT_LE(max_abs_diff(tree_exact_marginals(g, s, eps).values, enumerate_gibbs_marginals(g, s, eps).values), 1e-10);
  }
  auto star = build_star_graph(5, 3, {2, 3, 2, 4, 2});
  auto s = random_scores(star, rng);
  EXPECT_LE(max_abs_diff(tree_exact_marginals(star, s, 1.0).values, enumerate_gibbs_marginals(star, s, 1.0).values), 1e-10);
  // Forest: two disconnected chains.
  RegionGraph forest({2, 3, 2, 2}, {{0}, {1}, {2}, {3}, {0, 1}, {2, 3}});
  auto sf = random_scores(forest, rng);
  EXPECT_LE(max_abs_diff(tree_exact_marginals(forest, sf, 1.0).values, enumerate_gibbs_marginals(forest, sf, 1.0).values),
            1e-10);
}

TEST(TreeExactMarginals, HighTemperatureIsUniform) {
  std::mt19937_64 rng(1);
  auto g = build_chain_graph(4, {3, 2, 3, 2});
  auto p = tree_exact_marginals(g, random_scores(g, rng), 1e6);
  EXPECT_LE(max_abs_diff(p.values, uniform_beliefs(g).values), 1e-5);
}

TEST(TreeExactMarginals, RejectsCycles) {
  auto g = build_full_pairwise_graph(3, {2, 2, 2});
  EXPECT_THROW(tree_exact_marginals(g, ScoreVector(g.flat_size()), 1.0), UnsupportedStructure);
  EXPECT_THROW(tree_exact_map(g, ScoreVector(g.flat_size())), UnsupportedStructure);
}

TEST(TreeExactMap, MatchesEnumeration) {
  std::mt19937_64 rng(9);
  std::uniform_int_distribution<int> ints(-3, 3);
  auto g = build_chain_graph(3, {2, 2, 2});
  for (int trial = 0; trial < 50; ++trial) {
    ScoreVector s(g.flat_size());
    for (auto& v : s.values) v = ints(rng);
    auto map = tree_exact_map(g, s);
    auto ref = enumerate_argmax(g, s);
    EXPECT_DOUBLE_EQ(map.value, ref.value);
    if (ref.value > ref.runner_up) {
      EXPECT_EQ(map.labeling, ref.labeling);
    }
  }
}

TEST(TreeExactMap, RandomTrees) {
  std::mt19937_64 rng(10);
  for (int trial = 0; trial < 50; ++trial) {
    auto g = random_tree(rng, 1 + trial % 5, 4);
    auto s = random_scores(g, rng);
    auto map = tree_exact_map(g, s);
    auto ref = enumerate_argmax(g, s);
    EXPECT_NEAR(map.value, ref.value, 1e-12);
    EXPECT_EQ(map.labeling, ref.labeling);
  }
}

TEST(TreeExactMap, TieBreaksAndSingleVariable) {
  auto g = build_chain_graph(4, {3, 2, 3, 2});
  auto zero = tree_exact_map(g, ScoreVector(g.flat_size()));
  EXPECT_EQ(zero.labeling, (std::vector<int>{0, 0, 0, 0}));
  EXPECT_EQ(zero.value, 0.0);
  auto one = build_chain_graph(1, {2});
  auto m = tree_exact_map(one, ScoreVector(std::vector<double>{0.2, 0.9}));
  EXPECT_EQ(m.labeling, std::vector<int>{1});
  EXPECT_DOUBLE_EQ(m.value, 0.9);
}

TEST(BruteForceOracle, ZeroTemperatureIsEnumeratedArgmax) {
  std::mt19937_64 rng(12);
  auto g = build_full_pairwise_graph(3, {2, 3, 2});
  auto s = random_scores(g, rng);
  auto p = brute_force_oracle(g, s, 0.0, make_counting(g, CountingPreset::paper));
  EXPECT_EQ(p, one_hot_beliefs(g, enumerate_argmax(g, s).labeling));
}

TEST(BruteForceOracle, AgreesWithTreeExactUnderBethe) {
  std::mt19937_64 rng(13);
  for (int trial = 0; trial < 10; ++trial) {
    auto g = random_tree(rng, 2 + trial % 4, 3);
    auto s = random_scores(g, rng);
    auto p = brute_force_oracle(g, s, 1.0, make_counting(g, CountingPreset::bethe));
    EXPECT_LE(max_abs_diff(p.values, tree_exact_marginals(g, s, 1.0).values), 1e-6);
  }
}

TEST(BruteForceOracle, SymmetricZeroScoresGiveUniform) {
  auto g = build_chain_graph(2, {2, 2});
  auto p = brute_force_oracle(g, ScoreVector(g.flat_size()), 1.0, make_counting(g, CountingPreset::paper));
  EXPECT_LE(max_abs_diff(p.values, uniform_beliefs(g).values), 1e-12);
}

TEST(BruteForceOracle, ResourceLimit) {
  auto g = build_chain_graph(6, std::vector<int>(6, 10));
  EXPECT_THROW(brute_force_oracle(g, ScoreVector(g.flat_size()), 1.0, make_counting(g, CountingPreset::paper)),
               ResourceLimit);
}

TEST(SolveInner, BetheChainMatchesOracle) {
  std::mt19937_64 rng(14);
  auto g = build_chain_graph(3, {2, 2, 2});
  auto s = random_scores(g, rng);
  auto p = solve_inner(g, s, bethe(1.0));
  EXPECT_LE(max_abs_diff(p.values, brute_force_oracle(g, s, 1.0, make_counting(g, CountingPreset::bethe)).values), 1e-5);
}

TEST(SolveInner, ZeroScoresGiveUniform) {
  for (const auto& g : {build_chain_graph(3, {2, 3, 2}), build_full_pairwise_graph(4, {2, 3, 2, 2}),
                        build_star_graph(4, 1, {3, 2, 2, 2})}) {
    for (auto preset : {CountingPreset::paper, CountingPreset::bethe}) {
      InnerConfig cfg;
      cfg.counting = preset;
      auto p = solve_inner(g, ScoreVector(g.flat_size()), cfg);
      EXPECT_LE(max_abs_diff(p.values, uniform_beliefs(g).values), 1e-12);
    }
  }
}

TEST(SolveInner, ZeroEntropyOnTreeIsMapVertex) {
  auto g = build_chain_graph(2, {2, 2});
  ScoreVector s(std::vector<double>{1, 0, 0, 1, 0, 0, 0, 0});
  InnerConfig cfg;
  cfg.entropy = 0.0;
  auto p = solve_inner(g, s, cfg);
  const std::vector<int> y{0, 1};
  EXPECT_EQ(p, one_hot_beliefs(g, y));
  EXPECT_DOUBLE_EQ(dot(s, p), 2.0);
}

TEST(SolveInner, RejectsNonFiniteScores) {
  auto g = build_chain_graph(2, {2, 2});
  ScoreVector s(g.flat_size());
  s[3] = std::nan("");
  EXPECT_THROW(solve_inner(g, s, InnerConfig{}), InvalidArgument);
  s[3] = INFINITY;
  EXPECT_THROW(solve_inner(g, s, InnerConfig{}), InvalidArgument);
  EXPECT_THROW(solve_inner(g, ScoreVector(3), InnerConfig{}), InvalidArgument);
}

TEST(SolveInner, AlwaysFeasible) {
  std::mt19937_64 rng(15);
  for (int trial = 0; trial < 30; ++trial) {
    const auto K = static_cast<std::size_t>(2 + trial % 4);
    std::vector<int> domains(K, 2 + trial % 3);
    for (const auto& g : {build_full_pairwise_graph(K, domains), build_chain_graph(K, domains)}) {
      for (double eps : {0.0, 0.1, 1.0}) {
        for (auto preset : {CountingPreset::paper, CountingPreset::bethe}) {
          InnerConfig cfg;
          cfg.entropy = eps;
          cfg.counting = preset;
          cfg.max_passes = 1 + trial % 5;
          auto p = solve_inner(g, random_scores(g, rng, -5, 5), cfg);
          EXPECT_LE(check_local_polytope(p, g).max(), 1e-6);
        }
      }
    }
  }
}

TEST(SolveInner, DualObjectiveIsNonIncreasing) {
  std::mt19937_64 rng(16);
  for (double damping : {0.0, 0.5}) {
    for (const auto& g : {build_full_pairwise_graph(4, {3, 2, 3, 2}), build_chain_graph(4, {3, 2, 3, 2})}) {
      InnerConfig cfg;
      cfg.max_passes = 50;
      cfg.objective_tolerance = 0.0;
      cfg.damping = damping;
      std::vector<double> duals;
      solve_inner(g, random_scores(g, rng, -3, 3), cfg, [&](const InnerTraceRow& row) { duals.push_back(row.dual_objective); });
      ASSERT_EQ(duals.size(), 50u);
      for (std::size_t i = 1; i < duals.size(); ++i) EXPECT_LE(duals[i], duals[i - 1] + 1e-10) << "pass " << i + 1;
    }
  }
}

TEST(SolveInner, MessagePassingOnTreeConvergesToExactOptimum) {
  // With all-ones counting the local polytope equals the marginal polytope on
  // trees, so converged message passing must agree with the joint-space oracle.
  std::mt19937_64 rng(17);
  for (int trial = 0; trial < 5; ++trial) {
    auto g = random_tree(rng, 3 + trial % 2, 3);
    auto s = random_scores(g, rng);
    InnerConfig cfg;
    cfg.max_passes = 2000;
    cfg.objective_tolerance = 1e-14;
    auto p = solve_inner(g, s, cfg);
    auto ref = brute_force_oracle(g, s, 1.0, make_counting(g, CountingPreset::paper), {1e-14});
    EXPECT_LE(max_abs_diff(p.values, ref.values), 1e-5);
  }
}

TEST(SolveInner, AgreementSweepAcyclicBethe) {
  std::mt19937_64 rng(2024);
  std::uniform_int_distribution<std::size_t> kd(1, 5);
  double worst = 0.0;
  for (int i = 0; i < 50; ++i) {
    auto g = random_tree(rng, kd(rng), 4);
    auto s = random_scores(g, rng);
    auto p = solve_inner(g, s, bethe(1.0));
    auto ref = brute_force_oracle(g, s, 1.0, make_counting(g, CountingPreset::bethe));
    worst = std::max(worst, max_abs_diff(p.values, ref.values));
  }
  EXPECT_LE(worst, 1e-5);
}

TEST(SolveInner, LinearDominanceOnTrees) {
  std::mt19937_64 rng(18);
  for (int i = 0; i < 30; ++i) {
    auto g = random_tree(rng, 1 + i % 5, 4);
    auto s = random_scores(g, rng);
    InnerConfig cfg;
    cfg.entropy = 0.0;
    EXPECT_EQ(dot(s, solve_inner(g, s, cfg)), enumerate_argmax(g, s).value);
  }
}

TEST(SolveInner, ScaleCovariance) {
  std::mt19937_64 rng(19);
  const double c = 3.5;
  for (const auto& g : {build_chain_graph(4, {2, 3, 2, 3}), build_full_pairwise_graph(3, {2, 3, 2})}) {
    auto s = random_scores(g, rng);
    ScoreVector scaled = s;
    for (auto& v : scaled.values) v *= c;
    for (auto preset : {CountingPreset::paper, CountingPreset::bethe}) {
      InnerConfig cfg;
      cfg.counting = preset;
      InnerConfig cfg_scaled = cfg;
      cfg_scaled.entropy = c;
      EXPECT_LE(max_abs_diff(solve_inner(g, s, cfg).values, solve_inner(g, scaled, cfg_scaled).values), 1e-8);
    }
    if (g.is_acyclic()) {
      InnerConfig zero;
      zero.entropy = 0.0;
      EXPECT_EQ(tree_exact_map(g, s).labeling, tree_exact_map(g, scaled).labeling);
      EXPECT_EQ(solve_inner(g, s, zero), solve_inner(g, scaled, zero));
    }
  }
}

TEST(SolveInner, LoopyZeroEntropyIsFeasibleAndNearMap) {
  std::mt19937_64 rng(20);
  auto g = build_full_pairwise_graph(4, {3, 3, 3, 3});
  auto s = random_scores(g, rng);
  InnerConfig cfg;
  cfg.entropy = 0.0;
  cfg.max_passes = 100;
  auto p = solve_inner(g, s, cfg);
  EXPECT_LE(check_local_polytope(p, g).max(), 1e-6);
  // The LP relaxation upper-bounds the integral optimum; the smoothed value
  // cannot be far below it.
  EXPECT_GE(dot(s, p), enumerate_argmax(g, s).value - 0.1);
}

TEST(InnerConfig, Validation) {
  InnerConfig c;
  c.entropy = -1;
  EXPECT_THROW(c.validate(), InvalidArgument);
  c = {};
  c.max_passes = 0;
  EXPECT_THROW(c.validate(), InvalidArgument);
  c = {};
  c.damping = 1.0;
  EXPECT_THROW(c.validate(), InvalidArgument);
}

}  // namespace
}  // namespace gspen
