// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "metrics.hpp"
#include "reverse.hpp"

using namespace mdm;

namespace {

const DataModel& bench_model() {
  static const DataModel m = DataModel::random_markov(8, 23);
  return m;
}

StrategyConfig sampling(StrategyKind kind = StrategyKind::uniform) {
  StrategyConfig s;
  s.kind = kind;
  s.token_temperature = 1.0;
  return s;
}

// Fixed table of per-position distributions for selection tests.
PredictiveDistribution table(std::size_t k, std::vector<std::size_t> positions, std::vector<std::vector<double>> rows) {
  std::vector<double> flat;
  for (auto& r : rows) flat.insert(flat.end(), r.begin(), r.end());
  return PredictiveDistribution(k, std::move(positions), std::move(flat));
}

void expect_valid_path(const PathRecord& p, std::size_t L, std::size_t N) {
  ASSERT_FALSE(p.states.empty());
  EXPECT_EQ(p.states.front().mask_count(), L);
  EXPECT_EQ(p.states.front().time_index(), N);
  EXPECT_EQ(p.states.back().time_index(), 0u);
  EXPECT_TRUE(p.states.back().fully_unmasked());
  EXPECT_EQ(p.final_sequence.size(), L);
  EXPECT_EQ(p.entropy_trace.size(), p.trace_steps.size());
  for (double h : p.entropy_trace) {
    EXPECT_GE(h, 0.0);
    EXPECT_LE(h, std::log(8.0) + 1e-12);
  }
  if (!p.entropy_trace.empty()) {
    EXPECT_NEAR(p.path_entropy, path_entropy(p.entropy_trace), 1e-15);
  }
  // Revealed tokens are never changed again by an ordinary reverse step.
  for (std::size_t i = 1; i < p.states.size(); ++i)
    for (std::size_t l = 0; l < L; ++l)
      if (!p.states[i - 1].is_masked(l)) {
        EXPECT_EQ(p.states[i][l], p.states[i - 1][l]);
      }
}

}  // namespace

TEST(UnmaskProbability, LinearScheduleTelescopesToOneOverI) {
  NoiseSchedule lin;
  const std::size_t N = 16;
  TimeGrid g(N);
  for (std::size_t i = 1; i <= N; ++i)
    EXPECT_NEAR(unmask_probability(lin.alpha(g.time(i - 1)), lin.alpha(g.time(i))), 1.0 / i, 1e-12);
  // Survival of a mask through all N steps is the product of (1 - 1/i), which includes a zero at i = 1.
  double survive = 1.0;
  for (std::size_t i = N; i >= 1; --i) survive *= 1.0 - unmask_probability(lin.alpha(g.time(i - 1)), lin.alpha(g.time(i)));
  EXPECT_EQ(survive, 0.0);
  EXPECT_THROW(unmask_probability(0.5, 0.5), DomainError);
}

TEST(ScheduledCount, SpreadsLengthOverSteps) {
  std::size_t total = 0;
  for (std::size_t j = 0; j < 5; ++j) total += scheduled_unmask_count(13, 5, j);
  EXPECT_EQ(total, 13u);
  EXPECT_EQ(scheduled_unmask_count(13, 5, 0), 3u);
  EXPECT_EQ(scheduled_unmask_count(13, 5, 4), 2u);
}

TEST(SelectPositions, ConfidenceEntropyAndMarginOrder) {
  const auto s = SeqState::fully_masked(Vocab(3), 3, 1);
  // pos 0: peaked but second large; pos 1: flat; pos 2: peaked with a clear margin
  const auto d = table(3, {0, 1, 2}, {{0.5, 0.45, 0.05}, {0.34, 0.33, 0.33}, {0.6, 0.2, 0.2}});
  RngStream rng(1, 0);
  StrategyConfig c;
  c.kind = StrategyKind::confidence;
  EXPECT_EQ(select_positions(c, d, s, 1, rng), (std::vector<std::size_t>{2}));
  c.kind = StrategyKind::margin;
  EXPECT_EQ(select_positions(c, d, s, 1, rng), (std::vector<std::size_t>{2}));
  c.kind = StrategyKind::entropy;
  EXPECT_EQ(select_positions(c, d, s, 2, rng), (std::vector<std::size_t>{0, 2}));
  EXPECT_THROW(select_positions(c, d, s, 4, rng), PreconditionError);
}

TEST(SelectPositions, TinySelectionTemperatureEqualsTopK) {
  RngStream rng(9, 0);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t n = 4 + rng.uniform_index(8);
    const std::size_t k = 1 + rng.uniform_index(n);
    std::vector<std::size_t> pos(n);
    std::iota(pos.begin(), pos.end(), 0);
    std::vector<std::vector<double>> rows;
    std::vector<double> conf;
    for (std::size_t i = 0; i < n; ++i) {
      const double top = 0.3 + 0.7 * rng.uniform();
      rows.push_back({top, 1.0 - top});
      conf.push_back(std::max(top, 1.0 - top));
    }
    const auto d = table(2, pos, rows);
    const auto s = SeqState::fully_masked(Vocab(2), n, 1);
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return conf[a] > conf[b]; });
    std::vector<std::size_t> expect(order.begin(), order.begin() + k);
    std::sort(expect.begin(), expect.end());
    StrategyConfig c;
    c.kind = StrategyKind::confidence;
    c.selection_temperature = 1e-8;
    EXPECT_EQ(select_positions(c, d, s, k, rng), expect);
  }
}

TEST(SelectPositions, VariableSizeStrategies) {
  const auto s = SeqState::fully_masked(Vocab(2), 4, 1);
  const auto d = table(2, {0, 1, 2, 3}, {{0.99, 0.01}, {0.5, 0.5}, {0.95, 0.05}, {0.7, 0.3}});
  RngStream rng(1, 0);
  StrategyConfig eb;
  eb.kind = StrategyKind::eb_sampler;
  eb.gamma = 0.0;
  EXPECT_EQ(select_positions(eb, d, s, 1, rng), (std::vector<std::size_t>{0}));
  eb.gamma = 0.3;  // H(.99) + H(.95) = 0.056 + 0.199
  EXPECT_EQ(select_positions(eb, d, s, 1, rng), (std::vector<std::size_t>{0, 2}));
  StrategyConfig th;
  th.kind = StrategyKind::threshold;
  th.conf_min = 0.9;
  EXPECT_EQ(select_positions(th, d, s, 1, rng), (std::vector<std::size_t>{0, 2}));
  th.conf_min = 0.999;
  EXPECT_EQ(select_positions(th, d, s, 1, rng), (std::vector<std::size_t>{0}));
}

TEST(SelectPositions, SemiAutoregressiveStaysInLeftBlockThenSpills) {
  auto s = SeqState::fully_masked(Vocab(2), 8, 1);
  s.set(0, 0);
  const auto d = table(2, {1, 2, 3, 4, 5, 6, 7}, std::vector<std::vector<double>>(7, {0.6, 0.4}));
  RngStream rng(1, 0);
  StrategyConfig c;
  c.kind = StrategyKind::semi_ar;
  c.blocks = 2;
  EXPECT_EQ(select_positions(c, d, s, 2, rng), (std::vector<std::size_t>{1, 2}));
  EXPECT_EQ(select_positions(c, d, s, 4, rng), (std::vector<std::size_t>{1, 2, 3, 4}));
}

TEST(SelectPositions, PositionAwareConfidencePrefersEarlyMasks) {
  const auto s = SeqState::fully_masked(Vocab(2), 3, 1);
  const auto d = table(2, {0, 1, 2}, {{0.6, 0.4}, {0.7, 0.3}, {0.99, 0.01}});
  RngStream rng(1, 0);
  StrategyConfig c;
  c.kind = StrategyKind::pos_confidence;
  EXPECT_EQ(select_positions(c, d, s, 1, rng), (std::vector<std::size_t>{0}));
  c.alpha_pos = 0.0;
  EXPECT_EQ(select_positions(c, d, s, 1, rng), (std::vector<std::size_t>{2}));
}

TEST(ChooseToken, ArgmaxAndTemperedSampling) {
  RngStream rng(4, 0);
  const std::vector<double> p{0.2, 0.5, 0.3};
  EXPECT_EQ(choose_token(p, 0.0, rng), 1);
  const int n = 50000;
  std::vector<int> hot(3, 0), cold(3, 0);
  for (int i = 0; i < n; ++i) {
    ++hot[choose_token(p, 1.0, rng)];
    ++cold[choose_token(p, 0.5, rng)];
  }
  for (std::size_t a = 0; a < 3; ++a) EXPECT_NEAR(hot[a] / double(n), p[a], 0.01);
  const double z = 0.04 + 0.25 + 0.09;  // p^2
  EXPECT_NEAR(cold[1] / double(n), 0.25 / z, 0.01);
}

TEST(Step, ScheduledCountRevealsAllByTheLastStep) {
  MarkovOracle o(bench_model());
  NoiseSchedule lin;
  TimeGrid g(5);
  auto s = SeqState::fully_masked(Vocab(8), 13, 5);
  RngStream rng(2, 0);
  std::vector<std::size_t> masks{13};
  for (std::size_t i = 5; i >= 1; --i) {
    s = step(s, o, sampling(StrategyKind::confidence), lin, g, i, rng);
    masks.push_back(s.mask_count());
  }
  EXPECT_EQ(masks, (std::vector<std::size_t>{13, 10, 7, 4, 2, 0}));
  EXPECT_THROW(step(s, o, sampling(), lin, g, 1, rng), PreconditionError);
}

TEST(StochasticKernel, AlwaysFullyUnmaskedAndUnmaskTimesMatchClosedForm) {
  const std::size_t L = 16, N = 16;
  IIDOracle o(DataModel::iid({0.25, 0.25, 0.25, 0.25}));
  StrategyConfig s = sampling();
  s.policy = TokenPolicy::stochastic_kernel;
  NoiseSchedule lin;
  TimeGrid g(N);
  // Under the linear schedule the grid index i at which a position is revealed is uniform on 1..N.
  const double mean = (N + 1) / 2.0;
  const double var = (static_cast<double>(N) * N - 1) / 12.0;
  const int paths = 10000;
  double sum = 0.0;
  for (int r = 0; r < paths; ++r) {
    const auto p = run_path(SeqState::fully_masked(Vocab(4), L, N), o, s, lin, g, RngStream(8, r));
    ASSERT_TRUE(p.states.back().fully_unmasked());
    for (std::size_t l = 0; l < L; ++l) {
      std::size_t j = 0;
      while (p.states[j].is_masked(l)) ++j;
      sum += static_cast<double>(p.states[j].time_index() + 1);
    }
  }
  const double n = static_cast<double>(paths) * L;
  EXPECT_LT(std::abs(sum / n - mean), 3.0 * std::sqrt(var / n));
}

TEST(RunPath, RecordsAreValidAndDeterministic) {
  MarkovOracle o(bench_model());
  NoiseSchedule lin;
  TimeGrid g(8);
  const auto x = SeqState::fully_masked(Vocab(8), 32, 8);
  const auto a = run_path(x, o, sampling(), lin, g, RngStream(1, 5));
  const auto b = run_path(x, o, sampling(), lin, g, RngStream(1, 5));
  expect_valid_path(a, 32, 8);
  EXPECT_EQ(a.final_sequence, b.final_sequence);
  EXPECT_EQ(a.entropy_trace, b.entropy_trace);
  EXPECT_EQ(a.entropy_trace.size(), 8u);
  EXPECT_EQ(a.strategy, "uniform");
  EXPECT_THROW(run_path(a.states.back(), o, sampling(), lin, g, RngStream(1, 5)), PreconditionError);
}

TEST(RunPath, DifferentStrategiesSameSeedGiveDifferentValidPaths) {
  MarkovOracle o(bench_model());
  NoiseSchedule lin;
  TimeGrid g(16);
  const auto x = SeqState::fully_masked(Vocab(8), 32, 16);
  int differing = 0;
  for (int r = 0; r < 100; ++r) {
    const auto a = run_path(x, o, sampling(StrategyKind::uniform), lin, g, RngStream(3, r));
    const auto b = run_path(x, o, sampling(StrategyKind::entropy), lin, g, RngStream(3, r));
    expect_valid_path(a, 32, 16);
    expect_valid_path(b, 32, 16);
    differing += a.final_sequence != b.final_sequence;
  }
  EXPECT_GT(differing, 90);
}

TEST(RunPath, EveryStrategyProducesAValidPath) {
  MarkovOracle o(bench_model());
  NoiseSchedule cos(ScheduleKind::cosine);
  TimeGrid g(12);
  const auto x = SeqState::fully_masked(Vocab(8), 32, 12);
  for (auto kind : {StrategyKind::uniform, StrategyKind::confidence, StrategyKind::entropy, StrategyKind::margin,
                    StrategyKind::eb_sampler, StrategyKind::semi_ar, StrategyKind::threshold,
                    StrategyKind::pos_confidence, StrategyKind::p2}) {
    auto s = sampling(kind);
    s.blocks = 4;
    s.gamma = 1.0;
    s.draft_fraction = 0.5;
    s.refine_iters = 2;
    for (int r = 0; r < 10; ++r) {
      const auto p = run_path(x, o, s, cos, g, RngStream(6, r));
      ASSERT_TRUE(p.states.back().fully_unmasked()) << to_string(kind);
      EXPECT_EQ(p.final_sequence.size(), 32u);
      EXPECT_EQ(p.strategy, to_string(kind));
    }
  }
}

TEST(RunPath, DraftThenRefineRemasksAndRefills) {
  MarkovOracle o(bench_model());
  NoiseSchedule lin;
  TimeGrid g(8);
  auto s = sampling(StrategyKind::p2);
  s.draft_fraction = 0.5;
  s.refine_iters = 3;
  const auto p = run_path(SeqState::fully_masked(Vocab(8), 30, 8), o, s, lin, g, RngStream(2, 2));
  // 9 grid states plus a remasked and a refilled state per refinement iteration.
  EXPECT_EQ(p.states.size(), 9u + 2 * 3);
  std::size_t remasked = 0;
  for (std::size_t i = 1; i < p.states.size(); ++i)
    if (p.states[i].mask_count() > p.states[i - 1].mask_count()) {
      EXPECT_EQ(p.states[i].mask_count() - p.states[i - 1].mask_count(), 3u);
      ++remasked;
    }
  EXPECT_EQ(remasked, 3u);
}
