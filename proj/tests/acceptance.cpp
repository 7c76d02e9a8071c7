// SPDX-License-Identifier: Apache-2.0
// ============================================================================
// acceptance.cpp
// One PASS/FAIL line per acceptance criterion, each with its runtime budget.
// Exit status is nonzero if any criterion fails.
// ============================================================================

#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <limits>
#include <string>
#include <vector>

#include "mdmlab.hpp"

using namespace mdm;

namespace {

struct Outcome {
  bool ok = false;
  std::string detail;
};

struct Criterion {
  std::string name;
  double budget_s;
  std::function<Outcome()> check;
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

Outcome from_suite(const std::vector<std::string>& scopes) {
  Outcome o{true, ""};
  for (const auto& scope : scopes) {
    const auto r = run_invariant_suite(scope, 1);
    o.ok = o.ok && r.passed() && r.count("pass") > 0;
    o.detail += fmt("%s %zu/%zu pass, min slack %.3g; ", scope.c_str(), r.count("pass"), r.cases.size(), r.min_slack());
    for (const auto& c : r.cases)
      if (c.status != "pass") o.detail += fmt("[%s %s slack %.3g] ", c.status.c_str(), c.name.c_str(), c.slack);
  }
  return o;
}

ExperimentConfig benchmark(std::size_t replicates) {
  ExperimentConfig c;
  c.replicates = replicates;
  return c;
}

std::vector<double> lnppl(const RunSummary& s) { return s.column(&SummaryRow::ln_ppl); }

Outcome correlation_trend() {
  const auto study = run_correlation_study(benchmark(200));
  std::string means;
  for (const auto& s : study.per_steps)
    means += fmt("S=%zu H_DE %.4f lnppl %.4f; ", s.point.steps, s.mean_hde, s.mean_lnppl);
  const double r = study.pooled_r.value_or(std::numeric_limits<double>::quiet_NaN());
  return {study.hde_non_increasing && study.lnppl_non_increasing && r >= 0.5,
          means + fmt("pooled r %.4f (bar 0.5)", r)};
}

Outcome method_ordering() {
  const Bench bench(benchmark(200));
  const GridPoint p{32, 4, 8};
  const auto van = run_replicates(bench, Method::vanilla, p);
  const auto bon = run_replicates(bench, Method::e_bon, p);
  const auto smc = run_replicates(bench, Method::e_smc, p);
  const double p_bv = stats::paired_t_less(lnppl(bon), lnppl(van)).p_value;
  const double p_sb = stats::paired_t_less(lnppl(smc), lnppl(bon)).p_value;
  const double div_b = bon.mean_diversity / van.mean_diversity;
  const double div_s = smc.mean_diversity / van.mean_diversity;
  const bool ok = smc.mean_lnppl <= bon.mean_lnppl && bon.mean_lnppl <= van.mean_lnppl && p_bv < 0.05 &&
                  p_sb < 0.05 && div_b >= 0.95 && div_s >= 0.95;
  return {ok, fmt("lnppl vanilla %.4f e_bon %.4f e_smc %.4f; p(e_bon<vanilla) %.2g p(e_smc<e_bon) %.2g; "
                  "diversity ratio e_bon %.3f e_smc %.3f",
                  van.mean_lnppl, bon.mean_lnppl, smc.mean_lnppl, p_bv, p_sb, div_b, div_s)};
}

Outcome delta_monotonicity() {
  const Bench bench(benchmark(1000));
  std::vector<double> means;
  std::string detail = "e_smc lnppl by delta_ir:";
  for (std::size_t d : {4, 8, 16, 32}) {
    means.push_back(run_replicates(bench, Method::e_smc, {32, 4, d}).mean_lnppl);
    detail += fmt(" %zu->%.4f", d, means.back());
  }
  bool ok = true;
  for (std::size_t i = 1; i < means.size(); ++i) ok = ok && means[i - 1] <= means[i];
  return {ok, detail + " (1000 paired replicates)"};
}

Outcome greedy_tradeoff() {
  const Bench bench(benchmark(200));
  const auto smc = run_replicates(bench, Method::e_smc, {32, 4, 8});
  const auto greedy = run_replicates(bench, Method::greedy, {32, 4, 8});
  const double p_div = stats::welch_t_less(greedy.column(&SummaryRow::diversity), smc.column(&SummaryRow::diversity)).p_value;
  const bool ok = greedy.mean_lnppl < smc.mean_lnppl && greedy.mean_diversity < smc.mean_diversity && p_div < 0.05;
  return {ok, fmt("lnppl greedy(c=8,s=1) %.4f e_smc %.4f; diversity greedy %.4f e_smc %.4f, p %.2g",
                  greedy.mean_lnppl, smc.mean_lnppl, greedy.mean_diversity, smc.mean_diversity, p_div)};
}

Outcome e_bon_exactness() {
  const Bench bench(benchmark(200));
  const auto& cfg = bench.cfg;
  std::size_t runs = 0, mismatches = 0;
  for (std::size_t steps : {8, 32}) {
    const TimeGrid grid(steps);
    const auto x = SeqState::fully_masked(Vocab(cfg.vocab_size), cfg.length, steps);
    for (std::size_t m : {2, 4, 8}) {
      for (std::size_t r = 0; r < cfg.replicates; ++r) {
        const RngStream base(cfg.seed, r);
        const auto c = sample_candidates(x, *bench.backend, cfg.strategy, bench.schedule, grid, m, base);
        double h_min = std::numeric_limits<double>::infinity();
        for (const auto& p : c) h_min = std::min(h_min, p.path_entropy);
        const auto selected = run_method(bench, Method::e_bon, {steps, m, 0}, r);
        if (c[e_bon_index(c)].path_entropy != h_min || selected.path_entropy != h_min) ++mismatches;
        ++runs;
      }
    }
  }
  return {mismatches == 0, fmt("%zu runs, %zu with selected H_DE != min over candidates", runs, mismatches)};
}

}  // namespace

int main() {
  const std::vector<Criterion> criteria = {
      {"prop1: H_oracle <= |M| h_DE, iid equality", 30, [] { return from_suite({"prop1"}); }},
      {"prop2: mean true-token NLL within 3 sigma of mean h_DE", 60, [] { return from_suite({"prop2"}); }},
      {"prop3: path KL between Pinsker and accumulation bounds", 60, [] { return from_suite({"prop3"}); }},
      {"asymptotics and context sensitivity", 60, [] { return from_suite({"asymptotics", "context"}); }},
      {"temperature: monotone expected entropy, bisection", 60, [] { return from_suite({"temperature"}); }},
      {"correlation trend over S", 300, correlation_trend},
      {"method ordering e_smc < e_bon < vanilla", 600, method_ordering},
      {"delta_ir monotonicity", 600, delta_monotonicity},
      {"greedy trade-off", 600, greedy_tradeoff},
      {"e_bon exactness", 600, e_bon_exactness},
  };

  int failed = 0;
  for (const auto& c : criteria) {
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = c.check();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    const double s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    const bool in_time = s < c.budget_s;
    const bool ok = o.ok && in_time;
    failed += !ok;
    std::printf("%s  %-58s %7.2fs / %4.0fs%s  %s\n", ok ? "PASS" : "FAIL", c.name.c_str(), s, c.budget_s,
                in_time ? "" : " (over budget)", o.detail.c_str());
    std::fflush(stdout);
  }
  std::printf("%zu criteria, %d failed\n", criteria.size(), failed);
  return failed == 0 ? 0 : 1;
}
