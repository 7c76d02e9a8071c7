// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include "invariants.hpp"

using namespace mdm;

TEST(InvariantSuite, EveryScopePassesOnTwoSeeds) {
  for (std::uint64_t seed : {1, 2})
    for (auto scope : kInvariantScopes) {
      const auto r = run_invariant_suite(scope, seed);
      EXPECT_TRUE(r.passed()) << scope << " seed " << seed << "\n" << r.to_json().dump(2);
      EXPECT_GT(r.count("pass"), 0u) << scope;
    }
}

TEST(InvariantSuite, UnknownScopeThrows) { EXPECT_THROW(run_invariant_suite("prop4"), DomainError); }

TEST(InvariantSuite, SmallestPathSpaceHasPositiveSlack) {
  const auto r = run_invariant_suite("prop3");
  bool found = false;
  for (const auto& c : r.cases)
    if (c.name == "L=3 K=2 N=2 eps=0.2") {
      found = true;
      EXPECT_EQ(c.status, "pass");
      EXPECT_GT(c.slack, 0.0);
    }
  EXPECT_TRUE(found);
}

TEST(InvariantSuite, IidEqualityIsTight) {
  const auto r = run_invariant_suite("prop1");
  for (const auto& c : r.cases)
    if (c.name.rfind("iid", 0) == 0) {
      EXPECT_GT(c.slack, -1e-9);
    }
}

TEST(InvariantSuite, ReportJson) {
  const auto j = run_invariant_suite("temperature").to_json();
  EXPECT_EQ(j["scope"], "temperature");
  EXPECT_TRUE(j["passed"].get<bool>());
  EXPECT_EQ(j["fail"], 0);
  ASSERT_FALSE(j["cases"].empty());
  for (const char* key : {"name", "status", "slack", "tolerance", "checks", "detail"})
    EXPECT_TRUE(j["cases"][0].contains(key)) << key;
}

TEST(InvariantSuite, CapacityErrorsAreSkipsNotFailures) {
  std::vector<InvariantCase> cases;
  detail::run_case(cases, "too big", []() -> InvariantCase { throw CapacityError("cap"); });
  ASSERT_EQ(cases.size(), 1u);
  EXPECT_EQ(cases[0].status, "skipped");
  InvariantReport r{"x", cases, 0.0};
  EXPECT_TRUE(r.passed());
  EXPECT_EQ(r.count("skipped"), 1u);
}

TEST(PathSpace, ExactIidModelHasZeroDivergence) {
  const auto truth = make_oracle(DataModel::iid({0.2, 0.5, 0.3}));
  const auto a = analyze_path_space(*truth, *truth, 3, NoiseSchedule(), TimeGrid(2));
  EXPECT_NEAR(a.kl_paths, 0.0, 1e-12);
  EXPECT_NEAR(a.kl_chain(), 0.0, 1e-12);
  EXPECT_NEAR(a.total_reference, 1.0, 1e-12);
  EXPECT_NEAR(a.mu_model, a.mu_reference, 1e-12);
  EXPECT_GT(a.path_count, 0u);
}

// Exact marginals still fill jointly revealed positions independently, which a chain penalizes.
TEST(PathSpace, ExactMarkovMarginalsPayForFactorizedFills) {
  const auto truth = make_oracle(DataModel::random_markov(2, 4, 2.0));
  const auto coarse = analyze_path_space(*truth, *truth, 3, NoiseSchedule(), TimeGrid(2));
  EXPECT_GT(coarse.kl_paths, 1e-3);
  EXPECT_NEAR(coarse.kl_paths, coarse.kl_chain(), 1e-10);
  EXPECT_NEAR(coarse.total_reference, 1.0, 1e-12);
  const auto fine = analyze_path_space(*truth, *truth, 3, NoiseSchedule(), TimeGrid(3));
  EXPECT_LT(fine.kl_paths, coarse.kl_paths);
}

TEST(PathSpace, DivergenceGrowsWithPerturbation) {
  const auto data = DataModel::random_markov(2, 4, 2.0);
  auto truth = std::make_shared<const MarkovOracle>(data);
  double prev = 0.0;
  for (double eps : {0.1, 0.2, 0.5}) {
    const auto a = analyze_path_space(*truth, PerturbedOracle(truth, eps), 3, NoiseSchedule(), TimeGrid(2));
    EXPECT_GT(a.kl_paths, prev);
    EXPECT_NEAR(a.kl_paths, a.kl_chain(), 1e-10);
    EXPECT_GE(a.kl_paths, a.pinsker_lower_bound() - 1e-9);
    EXPECT_LE(a.kl_paths, a.accumulation_upper_bound() + 1e-9);
    prev = a.kl_paths;
  }
}
