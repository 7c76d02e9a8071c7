// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>

#include "metrics.hpp"
#include "reverse.hpp"
#include "stats.hpp"

using namespace mdm;

namespace {

DataModel sticky_chain() { return DataModel::markov({0.5, 0.5}, {0.9, 0.1, 0.1, 0.9}); }

SeqState state_of(std::size_t k, std::vector<int> toks) {
  Vocab v(k);
  std::vector<Token> t;
  for (int x : toks) t.push_back(x < 0 ? v.mask() : x);
  return SeqState(v, std::move(t), 1);
}

}  // namespace

TEST(ShannonEntropy, BinaryReference) {
  const double h = shannon_entropy(std::vector<double>{0.9, 0.1});
  EXPECT_NEAR(h, -(0.9 * std::log(0.9) + 0.1 * std::log(0.1)), 1e-15);
  EXPECT_NEAR(h, 0.325083, 1e-6);
  EXPECT_DOUBLE_EQ(shannon_entropy(std::vector<double>{1.0, 0.0}), 0.0);
  EXPECT_NEAR(shannon_entropy(std::vector<double>(8, 0.125)), std::log(8.0), 1e-15);
  EXPECT_THROW(shannon_entropy(std::vector<double>{0.5, 0.6}), DomainError);
}

TEST(StateEntropy, AveragesOverMaskedPositions) {
  MarkovOracle o(sticky_chain());
  const auto d = o.predict(state_of(2, {0, -1, 1, -1}));
  const auto r = state_entropy(d);
  EXPECT_EQ(r.mask_count, 2u);
  EXPECT_NEAR(r.h_de, 0.5 * (r.per_position.at(1) + r.per_position.at(3)), 1e-15);
  EXPECT_DOUBLE_EQ(r.h_de, state_entropy_value(d));
  EXPECT_NEAR(r.per_position.at(1), std::log(2.0), 1e-12);  // 0 -> ? -> 1 is symmetric
}

TEST(OracleUncertainty, StrictSubadditivityOnCorrelatedMasks) {
  MarkovOracle o(sticky_chain());
  const auto s = state_of(2, {0, -1, -1});
  const double joint = oracle_state_uncertainty(o, s);
  const double bound = 2.0 * state_entropy_value(o.predict(s));
  EXPECT_LT(joint, bound - 1e-6);
}

TEST(OracleUncertainty, EqualityForIidOracle) {
  IIDOracle o(DataModel::iid({0.2, 0.3, 0.5}));
  const auto s = state_of(3, {-1, 2, -1, -1});
  EXPECT_NEAR(oracle_state_uncertainty(o, s), 3.0 * state_entropy_value(o.predict(s)), 1e-12);
}

TEST(EvaluateNll, StickyChainAllSame) {
  const std::vector<Token> aaa{0, 0, 0};
  const auto s = evaluate_nll(aaa, sticky_chain());
  EXPECT_NEAR(s.ln_ppl, -std::log(0.5 * 0.9 * 0.9) / 3.0, 1e-15);
  EXPECT_NEAR(s.ln_ppl, 0.301289, 1e-6);
  EXPECT_DOUBLE_EQ(s.diversity, 0.0);
  EXPECT_FALSE(s.zero_probability);
}

TEST(EvaluateNll, ZeroProbabilityAndMaskedInput) {
  const auto m = DataModel::markov({1.0, 0.0}, {1.0, 0.0, 0.0, 1.0});
  const auto s = evaluate_nll(std::vector<Token>{1, 1}, m);
  EXPECT_TRUE(s.zero_probability);
  EXPECT_TRUE(std::isinf(s.ln_ppl));
  EXPECT_THROW(evaluate_nll(std::vector<Token>{0, 2}, m), PreconditionError);
}

TEST(Diversity, TokenHistogramEntropy) {
  EXPECT_NEAR(diversity(std::vector<Token>{0, 1, 2, 3}), std::log(4.0), 1e-15);
  EXPECT_NEAR(diversity(std::vector<Token>{0, 0, 1, 1}), std::log(2.0), 1e-15);
  EXPECT_DOUBLE_EQ(diversity(std::vector<Token>{5, 5, 5}), 0.0);
}

TEST(PathEntropy, MeanOfTrace) {
  EXPECT_DOUBLE_EQ(path_entropy(std::vector<double>{1.0, 2.0, 3.0}), 2.0);
  EXPECT_THROW(path_entropy(std::vector<double>{}), DomainError);
}

TEST(ApproximateNelbo, LinearScheduleIidOracleTracksLTimesPathEntropy) {
  const std::size_t L = 32, N = 32;
  const auto data = DataModel::iid({0.4, 0.3, 0.2, 0.1});
  IIDOracle o(data);
  StrategyConfig s;
  s.token_temperature = 1.0;
  s.policy = TokenPolicy::stochastic_kernel;
  NoiseSchedule lin;
  TimeGrid grid(N);
  double nelbo = 0.0, target = 0.0;
  for (int r = 0; r < 100; ++r) {
    const auto p = run_path(SeqState::fully_masked(Vocab(4), L, N), o, s, lin, grid, RngStream(3, r));
    nelbo += approximate_nelbo(p, lin, grid);
    target += static_cast<double>(L) * p.path_entropy;
  }
  EXPECT_LT(std::abs(nelbo - target) / target, 0.10);
}

TEST(Pearson, PerfectAndIndependent) {
  const std::vector<double> x{1, 2, 3, 4, 5};
  const std::vector<double> y{2, 4, 6, 8, 10};
  const std::vector<double> z{10, 8, 6, 4, 2};
  EXPECT_NEAR(pearson(x, y), 1.0, 1e-15);
  EXPECT_NEAR(pearson(x, z), -1.0, 1e-15);

  RngStream rng(17, 0);
  std::vector<double> a(10000), b(10000);
  for (std::size_t i = 0; i < a.size(); ++i) {
    a[i] = rng.uniform();
    b[i] = rng.uniform();
  }
  EXPECT_LT(std::abs(pearson(a, b)), 0.05);
  EXPECT_THROW(pearson(std::vector<double>{1, 1, 1}, std::vector<double>{1, 2, 3}), DomainError);
}

TEST(Spearman, MonotoneTransformIsPerfect) {
  const std::vector<double> x{0.1, 0.5, 0.2, 0.9, 0.3};
  std::vector<double> y;
  for (double v : x) y.push_back(std::exp(5 * v));
  EXPECT_NEAR(spearman(x, y), 1.0, 1e-15);
}

TEST(Stats, PairedAndWelchTests) {
  const std::vector<double> a{1.0, 2.0, 3.0, 4.0};
  const std::vector<double> b{1.5, 2.4, 3.6, 4.3};
  const auto paired = stats::paired_t_less(a, b);
  // d = -0.5, -0.4, -0.6, -0.3: mean -0.45, sd 0.129099
  EXPECT_NEAR(paired.statistic, -0.45 / (0.1290994448735806 / 2.0), 1e-9);
  EXPECT_NEAR(paired.dof, 3.0, 0.0);
  EXPECT_LT(paired.p_value, 0.01);
  EXPECT_GT(stats::paired_t_less(b, a).p_value, 0.99);

  const auto w = stats::welch_t_less(a, b);
  EXPECT_GT(w.p_value, 0.3);
  EXPECT_LT(w.p_value, 0.5);
  EXPECT_THROW(stats::paired_t_less(a, std::vector<double>{1.0}), DomainError);
}
