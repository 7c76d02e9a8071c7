// SPDX-License-Identifier: Apache-2.0
#pragma once

/*
 * Reverse generation: unmasking-order strategies, selection temperature, the per-step kernel and
 * the step loop that produces PathRecords.
 *
 * Two tokens-per-step policies:
 *   scheduled_count   n_i positions per step (L spread over N steps, earlier steps take the
 *                     remainder), chosen by the strategy
 *   stochastic_kernel every masked position unmasks independently with probability
 *                     (alpha_{i-1} - alpha_i) / (1 - alpha_i); strategy ordering is unused
 *
 * Positions are filled by argmax (token_temperature == 0) or by sampling p^(1/T).
 */

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "core.hpp"
#include "denoiser.hpp"
#include "errors.hpp"
#include "metrics.hpp"
#include "path_record.hpp"

namespace mdm {

// ============================================================================
// Strategy configuration
// ============================================================================

enum class StrategyKind { uniform, confidence, entropy, margin, eb_sampler, semi_ar, threshold, pos_confidence, p2 };

enum class TokenPolicy { scheduled_count, stochastic_kernel };

inline std::string_view to_string(StrategyKind k) {
  switch (k) {
    case StrategyKind::uniform: return "uniform";
    case StrategyKind::confidence: return "confidence";
    case StrategyKind::entropy: return "entropy";
    case StrategyKind::margin: return "margin";
    case StrategyKind::eb_sampler: return "eb_sampler";
    case StrategyKind::semi_ar: return "semi_ar";
    case StrategyKind::threshold: return "threshold";
    case StrategyKind::pos_confidence: return "pos_confidence";
    case StrategyKind::p2: return "p2";
  }
  return "?";
}

inline StrategyKind parse_strategy_kind(std::string_view s) {
  for (auto k : {StrategyKind::uniform, StrategyKind::confidence, StrategyKind::entropy, StrategyKind::margin,
                 StrategyKind::eb_sampler, StrategyKind::semi_ar, StrategyKind::threshold,
                 StrategyKind::pos_confidence, StrategyKind::p2})
    if (to_string(k) == s) return k;
  throw DomainError("unknown strategy '" + std::string(s) + "'");
}

inline std::string_view to_string(TokenPolicy p) {
  return p == TokenPolicy::scheduled_count ? "scheduled_count" : "stochastic_kernel";
}

inline TokenPolicy parse_token_policy(std::string_view s) {
  if (s == "scheduled_count") return TokenPolicy::scheduled_count;
  if (s == "stochastic_kernel") return TokenPolicy::stochastic_kernel;
  throw DomainError("unknown tokens-per-step policy '" + std::string(s) + "'");
}

struct StrategyConfig {
  StrategyKind kind = StrategyKind::uniform;
  double gamma = 0.0;           // eb_sampler entropy budget
  std::size_t blocks = 1;       // semi_ar block count; also scopes threshold
  double conf_min = 0.9;        // threshold
  double lambda_pos = 0.25;     // pos_confidence decay rate
  double alpha_pos = 10.0;      // pos_confidence bias weight
  double draft_fraction = 1.0;  // p2
  std::size_t refine_iters = 0; // p2
  double selection_temperature = 0.0;
  double token_temperature = 0.0;  // 0 = argmax
  TokenPolicy policy = TokenPolicy::scheduled_count;

  void validate() const {
    if (gamma < 0.0) throw DomainError("eb_sampler gamma must be >= 0");
    if (blocks == 0) throw DomainError("semi_ar needs at least one block");
    if (!(conf_min >= 0.0 && conf_min <= 1.0)) throw DomainError("threshold conf_min must lie in [0, 1]");
    if (!(draft_fraction >= 0.0 && draft_fraction <= 1.0)) throw DomainError("p2 draft_fraction must lie in [0, 1]");
    if (selection_temperature < 0.0) throw DomainError("selection temperature must be >= 0");
    if (token_temperature < 0.0) throw DomainError("token temperature must be >= 0");
  }

  std::string id() const {
    std::string s(to_string(kind));
    if (policy == TokenPolicy::stochastic_kernel) s += "+kernel";
    return s;
  }
};

// ============================================================================
// Kernel pieces
// ============================================================================

// Probability that a position masked at t_i is revealed at t_{i-1}.
inline double unmask_probability(double alpha_prev, double alpha_cur) {
  if (!(alpha_cur >= 0.0 && alpha_prev <= 1.0 && alpha_cur < 1.0))
    throw DomainError("unmask_probability: alphas must satisfy 0 <= alpha_cur < 1 and alpha_prev <= 1");
  if (!(alpha_cur < alpha_prev)) throw DomainError("unmask_probability: alpha must strictly decrease in t");
  return (alpha_prev - alpha_cur) / (1.0 - alpha_cur);
}

// Positions revealed at executed step j (0-based, j = N - i) under scheduled_count.
inline std::size_t scheduled_unmask_count(std::size_t length, std::size_t steps, std::size_t executed) {
  return length / steps + (executed < length % steps ? 1 : 0);
}

namespace detail {

inline double max_prob(std::span<const double> p) { return *std::max_element(p.begin(), p.end()); }

inline double top_margin(std::span<const double> p) {
  double first = -1.0, second = -1.0;
  for (double v : p) {
    if (v > first) {
      second = first;
      first = v;
    } else if (v > second) {
      second = v;
    }
  }
  return first - std::max(second, 0.0);
}

// Deterministic top-k by score (ties: lowest position) or, with temperature > 0, k draws without
// replacement from softmax(score / T) over the top-2k pool.
inline std::vector<std::size_t> pick_by_score(std::vector<std::size_t> candidates, std::vector<double> scores,
                                              std::size_t k, double temperature, RngStream& rng) {
  std::vector<std::size_t> order(candidates.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (scores[a] != scores[b]) return scores[a] > scores[b];
    return candidates[a] < candidates[b];
  });
  k = std::min(k, candidates.size());
  std::vector<std::size_t> chosen;
  chosen.reserve(k);
  if (temperature == 0.0) {
    for (std::size_t r = 0; r < k; ++r) chosen.push_back(candidates[order[r]]);
  } else {
    std::vector<std::size_t> pool(order.begin(), order.begin() + std::min(2 * k, order.size()));
    std::vector<double> w(pool.size());
    for (std::size_t draw = 0; draw < k; ++draw) {
      double top = -INFINITY;
      for (std::size_t p : pool) top = std::max(top, scores[p] / temperature);
      for (std::size_t j = 0; j < pool.size(); ++j) w[j] = std::exp(scores[pool[j]] / temperature - top);
      const std::size_t pick = rng.categorical(std::span<const double>(w.data(), pool.size()));
      chosen.push_back(candidates[pool[pick]]);
      pool.erase(pool.begin() + static_cast<std::ptrdiff_t>(pick));
      w.pop_back();
    }
  }
  std::sort(chosen.begin(), chosen.end());
  return chosen;
}

inline std::size_t block_of(std::size_t pos, std::size_t length, std::size_t blocks) {
  const std::size_t block_len = (length + blocks - 1) / blocks;
  return pos / block_len;
}

}  // namespace detail

// Score used by order-based strategies; higher is revealed first.
inline double strategy_score(const StrategyConfig& s, std::span<const double> p, std::size_t masked_rank) {
  switch (s.kind) {
    case StrategyKind::entropy:
    case StrategyKind::eb_sampler:
      return -shannon_entropy(p);
    case StrategyKind::margin:
      return detail::top_margin(p);
    case StrategyKind::pos_confidence:
      return detail::max_prob(p) + s.alpha_pos * std::exp(-s.lambda_pos * static_cast<double>(masked_rank));
    default:
      return detail::max_prob(p);
  }
}

// Positions to reveal this step. Fixed-count strategies return exactly min(k, |M|) positions;
// eb_sampler and threshold return a variable-size set of at least one.
inline std::vector<std::size_t> select_positions(const StrategyConfig& strategy, const PredictiveDistribution& dist,
                                                 const SeqState& state, std::size_t k, RngStream& rng) {
  const auto masked = state.masked_positions();
  if (masked.empty()) throw PreconditionError("select_positions: no masked positions");
  for (std::size_t pos : masked)
    if (!dist.covers(pos)) throw PreconditionError("select_positions: distribution does not cover the mask set");

  std::vector<double> scores(masked.size());
  for (std::size_t r = 0; r < masked.size(); ++r) scores[r] = strategy_score(strategy, dist.at(masked[r]), r);

  switch (strategy.kind) {
    case StrategyKind::uniform: {
      if (k == 0 || k > masked.size()) throw PreconditionError("select_positions: k must satisfy 1 <= k <= |M|");
      std::vector<std::size_t> pool = masked;
      for (std::size_t i = 0; i < k; ++i) std::swap(pool[i], pool[i + rng.uniform_index(pool.size() - i)]);
      pool.resize(k);
      std::sort(pool.begin(), pool.end());
      return pool;
    }
    case StrategyKind::eb_sampler: {
      std::vector<std::size_t> order(masked.size());
      std::iota(order.begin(), order.end(), 0);
      std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
      std::vector<std::size_t> chosen{masked[order[0]]};
      double budget_used = -scores[order[0]];
      for (std::size_t r = 1; r < order.size(); ++r) {
        const double h = -scores[order[r]];
        if (budget_used + h > strategy.gamma) break;
        budget_used += h;
        chosen.push_back(masked[order[r]]);
      }
      std::sort(chosen.begin(), chosen.end());
      return chosen;
    }
    case StrategyKind::threshold: {
      // Restricted to the leftmost block that still has masks.
      const std::size_t active = detail::block_of(masked.front(), state.length(), strategy.blocks);
      std::vector<std::size_t> chosen;
      std::size_t best = masked.size();
      for (std::size_t r = 0; r < masked.size(); ++r) {
        if (detail::block_of(masked[r], state.length(), strategy.blocks) != active) continue;
        if (best == masked.size() || scores[r] > scores[best]) best = r;
        if (scores[r] >= strategy.conf_min) chosen.push_back(masked[r]);
      }
      if (chosen.empty()) chosen.push_back(masked[best]);
      return chosen;
    }
    case StrategyKind::semi_ar: {
      if (k == 0 || k > masked.size()) throw PreconditionError("select_positions: k must satisfy 1 <= k <= |M|");
      // Fill blocks left to right; once a block is exhausted the remaining quota spills into the next.
      std::vector<std::size_t> chosen;
      std::size_t r = 0;
      while (chosen.size() < k && r < masked.size()) {
        const std::size_t block = detail::block_of(masked[r], state.length(), strategy.blocks);
        std::vector<std::size_t> cand;
        std::vector<double> sc;
        while (r < masked.size() && detail::block_of(masked[r], state.length(), strategy.blocks) == block) {
          cand.push_back(masked[r]);
          sc.push_back(scores[r]);
          ++r;
        }
        auto part = detail::pick_by_score(std::move(cand), std::move(sc), k - chosen.size(),
                                          strategy.selection_temperature, rng);
        chosen.insert(chosen.end(), part.begin(), part.end());
      }
      std::sort(chosen.begin(), chosen.end());
      return chosen;
    }
    default: {
      if (k == 0 || k > masked.size()) throw PreconditionError("select_positions: k must satisfy 1 <= k <= |M|");
      return detail::pick_by_score(masked, std::move(scores), k, strategy.selection_temperature, rng);
    }
  }
}

// Token for one position: argmax (ties lowest index) or a tempered categorical draw.
inline Token choose_token(std::span<const double> p, double token_temperature, RngStream& rng) {
  if (token_temperature == 0.0) return static_cast<Token>(std::max_element(p.begin(), p.end()) - p.begin());
  if (token_temperature == 1.0) return static_cast<Token>(rng.categorical(p));
  std::vector<double> w(p.size());
  double top = -INFINITY;
  for (std::size_t a = 0; a < p.size(); ++a)
    if (p[a] > 0.0) top = std::max(top, std::log(p[a]) / token_temperature);
  for (std::size_t a = 0; a < p.size(); ++a) w[a] = p[a] > 0.0 ? std::exp(std::log(p[a]) / token_temperature - top) : 0.0;
  return static_cast<Token>(rng.categorical(w));
}

namespace detail {

struct StepOutcome {
  SeqState next;
  std::vector<std::pair<std::size_t, double>> filled;  // position, probability of the chosen token
};

inline StepOutcome step_with(const SeqState& state, const PredictiveDistribution& dist,
                             const StrategyConfig& strategy, const NoiseSchedule& schedule,
                             const TimeGrid& grid, RngStream& rng) {
  const std::size_t i = state.time_index();
  if (i == 0 || i > grid.steps()) throw PreconditionError("step: state must sit at grid index 1..N");
  StepOutcome out{state, {}};
  out.next.set_time_index(i - 1);
  const auto masked = state.masked_positions();
  if (masked.empty()) return out;

  std::vector<std::size_t> reveal;
  if (strategy.policy == TokenPolicy::stochastic_kernel) {
    const double rho = unmask_probability(schedule.alpha(grid.time(i - 1)), schedule.alpha(grid.time(i)));
    for (std::size_t pos : masked)
      if (rng.bernoulli(rho)) reveal.push_back(pos);
  } else if (i == 1) {
    reveal = masked;
  } else {
    const std::size_t n = std::min(masked.size(), scheduled_unmask_count(state.length(), grid.steps(), grid.steps() - i));
    const bool variable = strategy.kind == StrategyKind::eb_sampler || strategy.kind == StrategyKind::threshold;
    if (n > 0 || variable) reveal = select_positions(strategy, dist, state, std::max<std::size_t>(n, 1), rng);
  }

  for (std::size_t pos : reveal) {
    auto p = dist.at(pos);
    const Token tok = choose_token(p, strategy.token_temperature, rng);
    out.next.set(pos, tok);
    out.filled.emplace_back(pos, p[static_cast<std::size_t>(tok)]);
  }
  return out;
}

}  // namespace detail

// One reverse step z_{t_i} -> z_{t_{i-1}}.
inline SeqState step(const SeqState& state, const Denoiser& backend, const StrategyConfig& strategy,
                     const NoiseSchedule& schedule, const TimeGrid& grid, std::size_t i, RngStream& rng) {
  if (state.time_index() != i || i == 0) throw PreconditionError("step: state.time_index must equal i >= 1");
  if (state.fully_unmasked()) {
    SeqState next = state;
    next.set_time_index(i - 1);
    return next;
  }
  const auto dist = backend.predict(state);
  return detail::step_with(state, dist, strategy, schedule, grid, rng).next;
}

// ============================================================================
// Trajectory: a path under construction
// ============================================================================

// Owns the current state, its random stream and the running trace. E-SMC particles and greedy
// beams are trajectories; copying one forks the path.
class Trajectory {
 public:
  Trajectory(SeqState start, RngStream rng) : state_(std::move(start)), rng_(std::move(rng)) {
    states_.push_back(state_);
    confidence_.assign(state_.length(), 0.0);
  }

  const SeqState& state() const noexcept { return state_; }
  std::span<const double> trace() const noexcept { return trace_; }
  RngStream& rng() noexcept { return rng_; }
  void set_rng(RngStream rng) { rng_ = std::move(rng); }
  bool done() const noexcept { return state_.time_index() == 0; }

  // h_DE of the current state (0 once fully unmasked). The prediction is cached for the next advance.
  double current_entropy(const Denoiser& backend) {
    if (state_.fully_unmasked()) return 0.0;
    return state_entropy_value(prediction(backend));
  }

  // Mean of the trace extended by the current state's h_DE; the running H_DE of a partial path.
  double running_path_entropy(const Denoiser& backend) {
    double sum = std::accumulate(trace_.begin(), trace_.end(), 0.0);
    std::size_t n = trace_.size();
    if (!state_.fully_unmasked()) {
      sum += current_entropy(backend);
      ++n;
    }
    return n == 0 ? 0.0 : sum / static_cast<double>(n);
  }

  // Advances one grid step, recording h_DE of the state before the step.
  void advance(const Denoiser& backend, const StrategyConfig& strategy, const NoiseSchedule& schedule,
               const TimeGrid& grid) {
    if (done()) throw PreconditionError("trajectory already reached t_0");
    if (state_.fully_unmasked()) {
      state_.set_time_index(state_.time_index() - 1);
      states_.push_back(state_);
      return;
    }
    const PredictiveDistribution& dist = prediction(backend);
    trace_.push_back(state_entropy_value(dist));
    steps_.push_back({state_.time_index(), state_.mask_count()});
    auto outcome = detail::step_with(state_, dist, strategy, schedule, grid, rng_);
    for (const auto& [pos, conf] : outcome.filled) confidence_[pos] = conf;
    state_ = std::move(outcome.next);
    cached_.reset();
    states_.push_back(state_);
    if (strategy.kind == StrategyKind::p2) maybe_refine(backend, strategy);
  }

  PathRecord finish(const std::string& strategy_id) const {
    if (!state_.fully_unmasked()) throw PreconditionError("path finished with masked positions left");
    PathRecord rec;
    rec.states = states_;
    rec.entropy_trace = trace_;
    rec.trace_steps = steps_;
    rec.final_sequence.assign(state_.tokens().begin(), state_.tokens().end());
    rec.path_entropy = trace_.empty() ? 0.0 : path_entropy(trace_);
    rec.seed = rng_.seed();
    rec.stream_id = rng_.stream_id();
    rec.strategy = strategy_id;
    return rec;
  }

 private:
  const PredictiveDistribution& prediction(const Denoiser& backend) {
    if (!cached_) cached_.emplace(backend.predict(state_));
    return *cached_;
  }

  // Draft-then-refine: once the filled fraction reaches draft_fraction, remask the floor(0.1 L)
  // least confident generated tokens and re-predict them, refine_iters times.
  void maybe_refine(const Denoiser& backend, const StrategyConfig& strategy) {
    if (refined_ || strategy.refine_iters == 0) return;
    const std::size_t len = state_.length();
    const std::size_t filled = len - state_.mask_count();
    const auto draft = static_cast<std::size_t>(std::ceil(strategy.draft_fraction * static_cast<double>(len)));
    if (filled < draft) return;
    refined_ = true;
    const std::size_t remask = len / 10;
    if (remask == 0) return;
    for (std::size_t it = 0; it < strategy.refine_iters; ++it) {
      std::vector<std::size_t> generated;
      for (std::size_t pos = 0; pos < len; ++pos)
        if (!state_.is_masked(pos)) generated.push_back(pos);
      if (generated.size() < remask) return;
      std::stable_sort(generated.begin(), generated.end(),
                       [&](std::size_t a, std::size_t b) { return confidence_[a] < confidence_[b]; });
      generated.resize(remask);
      for (std::size_t pos : generated) state_.mask(pos);
      states_.push_back(state_);
      const auto dist = backend.predict(state_);
      for (std::size_t pos : generated) {
        auto p = dist.at(pos);
        const Token tok = choose_token(p, strategy.token_temperature, rng_);
        state_.set(pos, tok);
        confidence_[pos] = p[static_cast<std::size_t>(tok)];
      }
      states_.push_back(state_);
    }
  }

  SeqState state_;
  RngStream rng_;
  std::vector<SeqState> states_;
  std::vector<double> trace_;
  std::vector<TraceStep> steps_;
  std::vector<double> confidence_;
  std::optional<PredictiveDistribution> cached_;
  bool refined_ = false;
};

// Denoises x_init (fully masked at t_N) down to t_0.
inline PathRecord run_path(const SeqState& x_init, const Denoiser& backend, const StrategyConfig& strategy,
                           const NoiseSchedule& schedule, const TimeGrid& grid, RngStream rng) {
  strategy.validate();
  if (x_init.mask_count() != x_init.length() || x_init.time_index() != grid.steps())
    throw PreconditionError("run_path: x_init must be fully masked at t_N");
  Trajectory path(x_init, std::move(rng));
  while (!path.done()) path.advance(backend, strategy, schedule, grid);
  return path.finish(strategy.id());
}

}  // namespace mdm
