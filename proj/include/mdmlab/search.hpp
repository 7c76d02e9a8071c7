// SPDX-License-Identifier: Apache-2.0
#pragma once

/*
 * Entropy-guided path search.
 *
 * E-BoN    generate M complete paths, keep argmin H_DE.
 * E-SMC    propagate M particles; after reverse step i, when (N - i + 1) mod interval == 0 and
 *          i > 1, weight particles by G = exp(lambda * r), r = 1 - h_DE / ln K, and draw M
 *          ancestors with replacement. Traces follow lineages. Output argmin H_DE survivor.
 * Greedy   s beams, each expanded into c sampled next states, keep the s lowest partial H_DE.
 * Majority modal final sequence.
 */

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <map>
#include <span>
#include <vector>

#include "core.hpp"
#include "denoiser.hpp"
#include "errors.hpp"
#include "metrics.hpp"
#include "parallel.hpp"
#include "reverse.hpp"

namespace mdm {

// ============================================================================
// Reward, potential, resampling weights
// ============================================================================

inline double reward(double h_de, std::size_t vocab_size) {
  if (vocab_size < 2) throw DomainError("reward: vocabulary size must be >= 2");
  const double h_max = std::log(static_cast<double>(vocab_size));
  return std::clamp(1.0 - std::clamp(h_de, 0.0, h_max) / h_max, 0.0, 1.0);
}

inline double potential(double h_de, double lambda, std::size_t vocab_size) {
  if (!(lambda > 0.0)) throw DomainError("potential: lambda must be > 0");
  return std::exp(lambda * reward(h_de, vocab_size));
}

// Normalized potentials, computed in log space.
inline std::vector<double> resampling_weights(std::span<const double> h_de, double lambda, std::size_t vocab_size) {
  if (h_de.empty()) throw DomainError("resampling_weights: empty particle set");
  if (lambda < 0.0) throw DomainError("resampling_weights: lambda must be >= 0");
  std::vector<double> logw(h_de.size());
  for (std::size_t m = 0; m < h_de.size(); ++m) logw[m] = lambda * reward(h_de[m], vocab_size);
  const double top = *std::max_element(logw.begin(), logw.end());
  double total = 0.0;
  for (double& v : logw) {
    v = std::exp(v - top);
    total += v;
  }
  for (double& v : logw) v /= total;
  return logw;
}

// Expected entropy after one resampling with weights softmax(-lambda * H).
inline double resample_expected_entropy(std::span<const double> h_values, double lambda) {
  if (h_values.empty()) throw DomainError("resample_expected_entropy: empty list");
  if (lambda < 0.0) throw DomainError("resample_expected_entropy: lambda must be >= 0");
  const double h_min = *std::min_element(h_values.begin(), h_values.end());
  if (std::isinf(lambda)) return h_min;
  double num = 0.0, den = 0.0;
  for (double h : h_values) {
    const double w = std::exp(-lambda * (h - h_min));
    num += w * h;
    den += w;
  }
  return num / den;
}

// lambda* >= 0 with resample_expected_entropy(h, lambda*) == target, for min(h) < target <= mean(h).
inline double solve_temperature(std::span<const double> h_values, double target, double tol = 1e-10) {
  const double h_min = *std::min_element(h_values.begin(), h_values.end());
  const double h_mean = resample_expected_entropy(h_values, 0.0);
  if (!(target > h_min && target <= h_mean)) throw DomainError("solve_temperature: target outside (min, mean]");
  double lo = 0.0, hi = 1.0;
  while (resample_expected_entropy(h_values, hi) > target) {
    hi *= 2.0;
    if (hi > 1e300) throw DomainError("solve_temperature: no bracket");
  }
  for (int iter = 0; iter < 400 && hi - lo > tol * std::max(1.0, hi); ++iter) {
    const double mid = 0.5 * (lo + hi);
    (resample_expected_entropy(h_values, mid) > target ? lo : hi) = mid;
  }
  return 0.5 * (lo + hi);
}

// ============================================================================
// Configuration and particle set
// ============================================================================

struct SearchConfig {
  std::size_t particles = 4;          // M
  double lambda = 50.0;
  std::size_t resample_interval = 8;  // delta i_r
  bool systematic = false;

  void validate() const {
    if (particles == 0) throw DomainError("search: need at least one particle");
    if (resample_interval == 0) throw DomainError("search: resample interval must be >= 1");
    if (!(lambda > 0.0)) throw DomainError("search: lambda must be > 0");
  }
};

struct ParticleSet {
  std::vector<Trajectory> particles;
  std::vector<double> potentials;     // from the last evaluation
  std::vector<double> weights;        // from the last evaluation
  std::vector<std::size_t> ancestors; // from the last resample
  std::size_t resample_count = 0;
};

struct SmcResult {
  ParticleSet population;
  std::vector<PathRecord> survivors;
  std::size_t selected = 0;
  const PathRecord& best() const { return survivors[selected]; }
};

// Parallel propagation inside a step is opt-in; results do not depend on `jobs`.
struct SearchRuntime {
  std::size_t jobs = 1;
};

namespace detail {

inline constexpr std::uint64_t kResampleStream = 0x7265'7361'6d70'6c65ULL;

inline std::vector<std::size_t> multinomial_ancestors(std::span<const double> w, RngStream& rng) {
  std::vector<std::size_t> a(w.size());
  for (auto& v : a) v = rng.categorical(w);
  return a;
}

inline std::vector<std::size_t> systematic_ancestors(std::span<const double> w, RngStream& rng) {
  const std::size_t m = w.size();
  std::vector<std::size_t> a(m);
  const double u0 = rng.uniform() / static_cast<double>(m);
  double cum = w[0];
  std::size_t j = 0;
  for (std::size_t i = 0; i < m; ++i) {
    const double u = u0 + static_cast<double>(i) / static_cast<double>(m);
    while (u > cum && j + 1 < m) cum += w[++j];
    a[i] = j;
  }
  return a;
}

inline std::size_t argmin_path_entropy(std::span<const PathRecord> paths) {
  std::size_t best = 0;
  for (std::size_t m = 1; m < paths.size(); ++m)
    if (paths[m].path_entropy < paths[best].path_entropy) best = m;
  return best;
}

}  // namespace detail

// ============================================================================
// E-BoN
// ============================================================================

inline std::size_t e_bon_index(std::span<const PathRecord> candidates) {
  if (candidates.empty()) throw DomainError("e_bon: no candidates");
  return detail::argmin_path_entropy(candidates);
}

inline PathRecord e_bon(std::span<const PathRecord> candidates) { return candidates[e_bon_index(candidates)]; }

// Candidate m uses stream rng.derive(m); candidate 0 is the vanilla path for the same base stream.
inline std::vector<PathRecord> sample_candidates(const SeqState& x_init, const Denoiser& backend,
                                                 const StrategyConfig& strategy, const NoiseSchedule& schedule,
                                                 const TimeGrid& grid, std::size_t count, const RngStream& rng,
                                                 SearchRuntime rt = {}) {
  std::vector<PathRecord> out(count);
  parallel_for(count, rt.jobs, [&](std::size_t m) {
    out[m] = run_path(x_init, backend, strategy, schedule, grid, rng.derive(m));
  });
  return out;
}

// ============================================================================
// E-SMC
// ============================================================================

inline SmcResult e_smc(const SeqState& x_init, const Denoiser& backend, const StrategyConfig& strategy,
                       const NoiseSchedule& schedule, const TimeGrid& grid, const SearchConfig& cfg,
                       const RngStream& rng, SearchRuntime rt = {}) {
  cfg.validate();
  strategy.validate();
  if (x_init.mask_count() != x_init.length() || x_init.time_index() != grid.steps())
    throw PreconditionError("e_smc: x_init must be fully masked at t_N");
  const std::size_t n_steps = grid.steps();
  const std::size_t k = backend.vocab_size();

  SmcResult result;
  ParticleSet& pop = result.population;
  pop.particles.reserve(cfg.particles);
  for (std::size_t m = 0; m < cfg.particles; ++m) pop.particles.emplace_back(x_init, rng.derive(m));
  RngStream resample_rng = rng.derive(detail::kResampleStream);

  std::vector<double> h(cfg.particles);
  for (std::size_t i = n_steps; i >= 1; --i) {
    parallel_for(cfg.particles, rt.jobs, [&](std::size_t m) {
      pop.particles[m].advance(backend, strategy, schedule, grid);
    });
    if ((n_steps - i + 1) % cfg.resample_interval != 0 || i <= 1) continue;

    parallel_for(cfg.particles, rt.jobs, [&](std::size_t m) { h[m] = pop.particles[m].current_entropy(backend); });
    pop.weights = resampling_weights(h, cfg.lambda, k);
    pop.potentials.resize(cfg.particles);
    for (std::size_t m = 0; m < cfg.particles; ++m) pop.potentials[m] = potential(h[m], cfg.lambda, k);
    pop.ancestors = cfg.systematic ? detail::systematic_ancestors(pop.weights, resample_rng)
                                   : detail::multinomial_ancestors(pop.weights, resample_rng);
    // Slot m keeps its own random stream so duplicated ancestors diverge afterwards.
    std::vector<Trajectory> next;
    next.reserve(cfg.particles);
    for (std::size_t m = 0; m < cfg.particles; ++m) {
      next.push_back(pop.particles[pop.ancestors[m]]);
      next.back().set_rng(pop.particles[m].rng());
    }
    pop.particles = std::move(next);
    ++pop.resample_count;
  }

  result.survivors.reserve(cfg.particles);
  for (const auto& p : pop.particles) result.survivors.push_back(p.finish(strategy.id() + "+e_smc"));
  result.selected = detail::argmin_path_entropy(result.survivors);
  return result;
}

// ============================================================================
// Greedy search
// ============================================================================

inline PathRecord greedy_search(const SeqState& x_init, const Denoiser& backend, const StrategyConfig& strategy,
                                const NoiseSchedule& schedule, const TimeGrid& grid, std::size_t candidates,
                                std::size_t beams, const RngStream& rng) {
  if (candidates == 0 || beams == 0) throw DomainError("greedy_search: c and s must be >= 1");
  strategy.validate();
  if (x_init.mask_count() != x_init.length() || x_init.time_index() != grid.steps())
    throw PreconditionError("greedy_search: x_init must be fully masked at t_N");

  std::vector<Trajectory> live;
  for (std::size_t b = 0; b < beams; ++b) live.emplace_back(x_init, rng.derive(b));

  std::uint64_t expansion = 0;
  while (!live.front().done()) {
    struct Scored {
      double score;
      std::size_t order;
      Trajectory path;
    };
    std::vector<Scored> pool;
    pool.reserve(live.size() * candidates);
    for (auto& beam : live) {
      for (std::size_t j = 0; j < candidates; ++j) {
        Trajectory child = beam;
        // Candidate 0 continues the beam's stream; the others draw from fresh children of it.
        if (j > 0) child.set_rng(beam.rng().derive(++expansion));
        child.advance(backend, strategy, schedule, grid);
        const double score = child.running_path_entropy(backend);
        pool.push_back({score, pool.size(), std::move(child)});
      }
    }
    std::stable_sort(pool.begin(), pool.end(), [](const Scored& a, const Scored& b) {
      if (a.score != b.score) return a.score < b.score;
      return a.order < b.order;
    });
    live.clear();
    for (std::size_t b = 0; b < std::min(beams, pool.size()); ++b) live.push_back(std::move(pool[b].path));
  }

  std::vector<PathRecord> finished;
  for (const auto& p : live) finished.push_back(p.finish(strategy.id() + "+greedy"));
  return finished[detail::argmin_path_entropy(finished)];
}

// ============================================================================
// Majority vote
// ============================================================================

inline std::size_t majority_vote_index(std::span<const PathRecord> candidates) {
  if (candidates.empty()) throw DomainError("majority_vote: no candidates");
  std::map<std::vector<Token>, std::pair<std::size_t, std::size_t>> tally;  // count, first index
  for (std::size_t m = 0; m < candidates.size(); ++m) {
    auto [it, inserted] = tally.try_emplace(candidates[m].final_sequence, 0, m);
    ++it->second.first;
  }
  std::size_t best = 0, best_count = 0;
  for (const auto& [seq, entry] : tally) {
    const auto [count, first] = entry;
    if (count > best_count || (count == best_count && first < best)) {
      best = first;
      best_count = count;
    }
  }
  return best;
}

inline PathRecord majority_vote(std::span<const PathRecord> candidates) {
  return candidates[majority_vote_index(candidates)];
}

}  // namespace mdm
