// SPDX-License-Identifier: Apache-2.0
#pragma once

/*
 * Scalar measurements. Natural log throughout.
 *
 *   h_DE(z)   = mean_{l in M} H(p(X^l | z))          state entropy
 *   H_DE(tau) = mean over steps with |M| > 0 of h_DE  path entropy
 *   H_oracle  = H(X_M | z)                           joint entropy of the exact posterior
 */

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <map>
#include <numeric>
#include <span>
#include <vector>

#include "core.hpp"
#include "denoiser.hpp"
#include "errors.hpp"
#include "path_record.hpp"

namespace mdm {

inline double shannon_entropy(std::span<const double> p) {
  double sum = 0.0;
  for (double v : p) {
    if (v < 0.0 || !std::isfinite(v)) throw DomainError("shannon_entropy: negative or non-finite probability");
    sum += v;
  }
  if (std::abs(sum - 1.0) > 1e-6) throw DomainError("shannon_entropy: probabilities do not sum to 1");
  double h = 0.0;
  for (double v : p)
    if (v > 0.0) h -= v * std::log(v);
  return std::max(h, 0.0);
}

struct EntropyReport {
  double h_de = 0.0;
  std::map<std::size_t, double> per_position;
  std::size_t mask_count = 0;
};

inline EntropyReport state_entropy(const PredictiveDistribution& dist) {
  if (dist.size() == 0) throw PreconditionError("state entropy is defined only for |M_t| > 0");
  EntropyReport r;
  r.mask_count = dist.size();
  double total = 0.0;
  for (std::size_t i = 0; i < dist.size(); ++i) {
    const double h = shannon_entropy(dist.row(i));
    r.per_position.emplace(dist.positions()[i], h);
    total += h;
  }
  r.h_de = total / static_cast<double>(dist.size());
  return r;
}

// h_DE only, without the per-position map.
inline double state_entropy_value(const PredictiveDistribution& dist) {
  if (dist.size() == 0) throw PreconditionError("state entropy is defined only for |M_t| > 0");
  double total = 0.0;
  for (std::size_t i = 0; i < dist.size(); ++i) total += shannon_entropy(dist.row(i));
  return total / static_cast<double>(dist.size());
}

inline double path_entropy(std::span<const double> trace) {
  if (trace.empty()) throw DomainError("path entropy of an empty trace");
  return std::accumulate(trace.begin(), trace.end(), 0.0) / static_cast<double>(trace.size());
}

inline double oracle_state_uncertainty(const ExactOracle& backend, const SeqState& state,
                                       std::size_t cap = kDefaultEnumerationCap) {
  return shannon_entropy(backend.joint_conditional(state, cap).probs);
}

// Entropy of the token histogram of `seq`.
inline double diversity(std::span<const Token> seq) {
  if (seq.empty()) return 0.0;
  std::map<Token, std::size_t> counts;
  for (Token t : seq) ++counts[t];
  const double n = static_cast<double>(seq.size());
  double d = 0.0;
  for (const auto& [tok, c] : counts) {
    const double f = static_cast<double>(c) / n;
    d -= f * std::log(f);
  }
  return std::max(d, 0.0);
}

struct EvalScore {
  double nll_per_token = 0.0;
  double ln_ppl = 0.0;
  double diversity = 0.0;
  bool zero_probability = false;  // nll is +inf
};

inline EvalScore evaluate_nll(std::span<const Token> seq, const DataModel& data) {
  if (seq.empty()) throw DomainError("evaluate_nll: empty sequence");
  for (Token t : seq)
    if (t < 0 || static_cast<std::size_t>(t) >= data.vocab_size())
      throw PreconditionError("evaluate_nll requires a fully unmasked sequence");
  EvalScore s;
  const double lp = data.sequence_log_prob(seq);
  s.zero_probability = !std::isfinite(lp);
  s.nll_per_token = s.zero_probability ? std::numeric_limits<double>::infinity()
                                       : -lp / static_cast<double>(seq.size());
  s.ln_ppl = s.nll_per_token;
  s.diversity = diversity(seq);
  return s;
}

// Riemann sum of w(t) |M_t| h_DE(z_t) dt with w(t) = |d alpha/dt| / (1 - alpha(t)) and d alpha/dt
// taken as the grid finite difference.
inline double approximate_nelbo(const PathRecord& path, const NoiseSchedule& schedule, const TimeGrid& grid) {
  if (path.trace_steps.size() != path.entropy_trace.size())
    throw PreconditionError("approximate_nelbo: trace is not aligned with its states");
  const double dt = grid.spacing();
  double total = 0.0;
  for (std::size_t j = 0; j < path.entropy_trace.size(); ++j) {
    const std::size_t i = path.trace_steps[j].time_index;
    if (i == 0 || i > grid.steps()) throw PreconditionError("approximate_nelbo: trace entry off the grid");
    const double a_cur = schedule.alpha(grid.time(i));
    const double a_prev = schedule.alpha(grid.time(i - 1));
    if (1.0 - a_cur < 1e-9) continue;
    const double w = std::abs(a_prev - a_cur) / dt / (1.0 - a_cur);
    total += w * static_cast<double>(path.trace_steps[j].mask_count) * path.entropy_trace[j] * dt;
  }
  return total;
}

// ============================================================================
// Correlation
// ============================================================================

inline double pearson(std::span<const double> xs, std::span<const double> ys) {
  if (xs.size() != ys.size() || xs.size() < 3) throw DomainError("pearson: need equal lengths >= 3");
  const double n = static_cast<double>(xs.size());
  const double mx = std::accumulate(xs.begin(), xs.end(), 0.0) / n;
  const double my = std::accumulate(ys.begin(), ys.end(), 0.0) / n;
  double sxx = 0.0, syy = 0.0, sxy = 0.0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    const double dx = xs[i] - mx, dy = ys[i] - my;
    sxx += dx * dx;
    syy += dy * dy;
    sxy += dx * dy;
  }
  if (!(sxx > 0.0) || !(syy > 0.0) || !std::isfinite(sxx * syy)) throw DomainError("pearson: degenerate variance");
  return std::clamp(sxy / std::sqrt(sxx * syy), -1.0, 1.0);
}

namespace detail {

inline std::vector<double> average_ranks(std::span<const double> v) {
  std::vector<std::size_t> idx(v.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
  std::vector<double> ranks(v.size());
  for (std::size_t i = 0; i < idx.size();) {
    std::size_t j = i;
    while (j + 1 < idx.size() && v[idx[j + 1]] == v[idx[i]]) ++j;
    const double r = 0.5 * static_cast<double>(i + j);
    for (std::size_t t = i; t <= j; ++t) ranks[idx[t]] = r;
    i = j + 1;
  }
  return ranks;
}

}  // namespace detail

inline double spearman(std::span<const double> xs, std::span<const double> ys) {
  auto rx = detail::average_ranks(xs);
  auto ry = detail::average_ranks(ys);
  return pearson(rx, ry);
}

}  // namespace mdm
