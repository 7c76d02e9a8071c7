// SPDX-License-Identifier: Apache-2.0
#pragma once

/*
 * Exact analysis of the path space for tiny problems (L <= 4, K <= 3, N <= 3).
 *
 * Reference paths: x_0 ~ q, then forward masking along the grid.
 *   Pr(tau) = q(z_0) prod_i q(z_{t_i} | z_{t_{i-1}})
 * Model paths: fully masked start, stochastic reverse kernel with fills from the model marginals.
 *   P^(tau) = prod_i p(z_{t_{i-1}} | z_{t_i})
 *
 * KL(Pr || P^) is computed twice: by summing over every enumerated path, and by the chain rule as
 * a sum of per-step expected kernel KLs built from the exact joint posterior. Path entropy f(tau)
 * is evaluated with the model's predictions.
 */

#include <cmath>
#include <cstddef>
#include <limits>
#include <map>
#include <span>
#include <vector>

#include "core.hpp"
#include "denoiser.hpp"
#include "errors.hpp"
#include "metrics.hpp"
#include "reverse.hpp"

namespace mdm {

struct PathSpaceAnalysis {
  std::size_t steps = 0;
  std::size_t path_count = 0;
  double total_reference = 0.0;  // sum of Pr over enumerated paths (1 when supports nest)
  double total_model = 0.0;
  double kl_paths = 0.0;         // sum_tau Pr log(Pr / P^)
  std::vector<double> step_kl;   // index i - 1 holds E_{z_{t_i} ~ Pr}[KL] for reverse step i
  double mu_reference = 0.0;
  double mu_model = 0.0;
  double bound = 0.0;            // B = max |H_DE(tau)|

  double kl_chain() const {
    double s = 0.0;
    for (double v : step_kl) s += v;
    return s;
  }
  double max_step_kl() const {
    double m = 0.0;
    for (double v : step_kl) m = std::max(m, v);
    return m;
  }
  // (mu_model - mu_ref)^2 / (2 B^2)
  double pinsker_lower_bound() const {
    if (bound == 0.0) return 0.0;
    const double gap = mu_model - mu_reference;
    return gap * gap / (2.0 * bound * bound);
  }
  double accumulation_upper_bound() const { return static_cast<double>(steps) * max_step_kl(); }
};

namespace detail {

class PathSpaceWalker {
 public:
  PathSpaceWalker(const ExactOracle& truth, const Denoiser& model, const NoiseSchedule& schedule,
                  const TimeGrid& grid, std::size_t path_cap)
      : truth_(truth), model_(model), schedule_(schedule), grid_(grid), cap_(path_cap), vocab_(truth.vocab_size()) {}

  PathSpaceAnalysis run(std::size_t length) {
    out_ = {};
    out_.steps = grid_.steps();
    double max_f = 0.0;
    max_f_ = &max_f;
    SeqState start = SeqState::fully_masked(vocab_, length, grid_.steps());
    visit(start, 1.0, 1.0, 0.0, 0);
    out_.bound = max_f;
    out_.step_kl = chain_rule_step_kl(length);
    return out_;
  }

 private:
  struct Cached {
    PredictiveDistribution dist;
    double h;
  };

  const Cached& model_prediction(const SeqState& z) {
    std::vector<Token> key(z.tokens().begin(), z.tokens().end());
    auto it = cache_.find(key);
    if (it == cache_.end()) {
      auto dist = model_.predict(z);
      const double h = state_entropy_value(dist);
      it = cache_.emplace(std::move(key), Cached{std::move(dist), h}).first;
    }
    return it->second;
  }

  double unmask_rate(std::size_t i) const {
    return unmask_probability(schedule_.alpha(grid_.time(i - 1)), schedule_.alpha(grid_.time(i)));
  }

  // Forward transition probability q(z_next | z_prev) when moving from t_{i-1} to t_i.
  double forward_probability(const SeqState& z_prev, const SeqState& z_next, std::size_t i) const {
    const double a_prev = schedule_.alpha(grid_.time(i - 1));
    const double a_cur = schedule_.alpha(grid_.time(i));
    const double keep = a_prev > 0.0 ? a_cur / a_prev : 0.0;
    double p = 1.0;
    for (std::size_t l = 0; l < z_prev.length(); ++l) {
      if (z_prev.is_masked(l)) {
        if (!z_next.is_masked(l)) return 0.0;
      } else if (z_next.is_masked(l)) {
        p *= 1.0 - keep;
      } else {
        if (z_next[l] != z_prev[l]) return 0.0;
        p *= keep;
      }
    }
    return p;
  }

  // Depth-first over every model transition. `fwd` accumulates the forward-process factors of the
  // reference path; q(z_0) is applied at the leaf.
  void visit(const SeqState& z, double model_prob, double fwd, double f_sum, std::size_t f_count) {
    const std::size_t i = z.time_index();
    if (i == 0) {
      if (++out_.path_count > cap_) throw CapacityError("path space exceeds the enumeration cap");
      const double ref = fwd * std::exp(truth_.data().sequence_log_prob(z.tokens()));
      const double f = f_count == 0 ? 0.0 : f_sum / static_cast<double>(f_count);
      *max_f_ = std::max(*max_f_, std::abs(f));
      out_.total_reference += ref;
      out_.total_model += model_prob;
      out_.mu_reference += ref * f;
      out_.mu_model += model_prob * f;
      if (ref > 0.0) {
        out_.kl_paths += model_prob > 0.0 ? ref * std::log(ref / model_prob) : std::numeric_limits<double>::infinity();
      }
      return;
    }
    const auto masked = z.masked_positions();
    if (masked.empty()) {
      SeqState next = z;
      next.set_time_index(i - 1);
      visit(next, model_prob, fwd * forward_probability(next, z, i), f_sum, f_count);
      return;
    }
    const Cached& pred = model_prediction(z);
    // std::map keeps references valid while the recursion inserts.
    const PredictiveDistribution& dist = pred.dist;
    const double h = pred.h;
    const double rho = unmask_rate(i);
    const std::size_t m = masked.size();
    for (std::size_t subset = 0; subset < (std::size_t{1} << m); ++subset) {
      std::vector<std::size_t> chosen;
      for (std::size_t j = 0; j < m; ++j)
        if (subset & (std::size_t{1} << j)) chosen.push_back(masked[j]);
      const double sel = std::pow(rho, static_cast<double>(chosen.size())) *
                         std::pow(1.0 - rho, static_cast<double>(m - chosen.size()));
      if (sel == 0.0) continue;
      std::size_t fills = 1;
      for (std::size_t c = 0; c < chosen.size(); ++c) fills *= vocab_.size();
      for (std::size_t code = 0; code < fills; ++code) {
        SeqState next = z;
        next.set_time_index(i - 1);
        double p = sel;
        std::size_t rest = code;
        for (std::size_t pos : chosen) {
          const auto tok = static_cast<Token>(rest % vocab_.size());
          rest /= vocab_.size();
          next.set(pos, tok);
          p *= dist.at(pos)[static_cast<std::size_t>(tok)];
        }
        if (p == 0.0) continue;
        visit(next, model_prob * p, fwd * forward_probability(next, z, i), f_sum + h, f_count + 1);
      }
    }
  }

  // E_{z_{t_i} ~ Pr}[ KL(Pr(z_{t_{i-1}} | z_{t_i}) || P^(z_{t_{i-1}} | z_{t_i})) ] for each i. The
  // selection factors coincide, leaving sum_S sel(S) KL(q(X_S | z_O) || prod_{l in S} p^_l).
  std::vector<double> chain_rule_step_kl(std::size_t length) {
    const std::size_t n = grid_.steps();
    const std::size_t k = vocab_.size();
    std::vector<double> step_kl(n, 0.0);
    std::size_t total_states = 1;
    for (std::size_t l = 0; l < length; ++l) total_states *= k + 1;

    for (std::size_t code = 0; code < total_states; ++code) {
      std::vector<Token> tokens(length);
      std::size_t rest = code;
      for (auto& t : tokens) {
        t = static_cast<Token>(rest % (k + 1));
        rest /= k + 1;
      }
      for (std::size_t i = 1; i <= n; ++i) {
        SeqState z(vocab_, tokens, i);
        const auto masked = z.masked_positions();
        if (masked.empty()) continue;
        const double a = schedule_.alpha(grid_.time(i));
        const double mask_factor = std::pow(a, static_cast<double>(length - masked.size())) *
                                   std::pow(1.0 - a, static_cast<double>(masked.size()));
        if (mask_factor == 0.0) continue;
        // q(x_O = z_O) by summing out the masked positions.
        double observed_prob = 0.0;
        std::vector<Token> x = tokens;
        std::size_t fills = 1;
        for (std::size_t c = 0; c < masked.size(); ++c) fills *= k;
        for (std::size_t f = 0; f < fills; ++f) {
          std::size_t r = f;
          for (std::size_t pos : masked) {
            x[pos] = static_cast<Token>(r % k);
            r /= k;
          }
          observed_prob += std::exp(truth_.data().sequence_log_prob(x));
        }
        const double weight = mask_factor * observed_prob;
        if (weight == 0.0) continue;

        const JointDistribution joint = truth_.joint_conditional(z);
        const auto& pred = model_prediction(z);
        const double rho = unmask_rate(i);
        const std::size_t m = masked.size();
        double kl = 0.0;
        for (std::size_t subset = 1; subset < (std::size_t{1} << m); ++subset) {
          std::vector<std::size_t> members;
          for (std::size_t j = 0; j < m; ++j)
            if (subset & (std::size_t{1} << j)) members.push_back(j);
          const double sel = std::pow(rho, static_cast<double>(members.size())) *
                             std::pow(1.0 - rho, static_cast<double>(m - members.size()));
          if (sel == 0.0) continue;
          // Marginal of the joint over the selected masked positions.
          std::size_t sub_fills = 1;
          for (std::size_t c = 0; c < members.size(); ++c) sub_fills *= k;
          std::vector<double> q_sub(sub_fills, 0.0);
          for (std::size_t idx = 0; idx < joint.probs.size(); ++idx) {
            const auto completion = joint.completion(idx);
            std::size_t sub = 0;
            for (std::size_t j : members) sub = sub * k + static_cast<std::size_t>(completion[j]);
            q_sub[sub] += joint.probs[idx];
          }
          double part = 0.0;
          for (std::size_t sub = 0; sub < sub_fills; ++sub) {
            if (q_sub[sub] <= 0.0) continue;
            double p_model = 1.0;
            std::size_t r = sub;
            for (std::size_t c = members.size(); c-- > 0;) {
              p_model *= pred.dist.at(masked[members[c]])[r % k];
              r /= k;
            }
            if (p_model <= 0.0) {
              part = std::numeric_limits<double>::infinity();
              break;
            }
            part += q_sub[sub] * std::log(q_sub[sub] / p_model);
          }
          kl += sel * part;
        }
        step_kl[i - 1] += weight * kl;
      }
    }
    return step_kl;
  }

  const ExactOracle& truth_;
  const Denoiser& model_;
  const NoiseSchedule& schedule_;
  const TimeGrid& grid_;
  std::size_t cap_;
  Vocab vocab_;
  PathSpaceAnalysis out_;
  double* max_f_ = nullptr;
  std::map<std::vector<Token>, Cached> cache_;
};

}  // namespace detail

inline PathSpaceAnalysis analyze_path_space(const ExactOracle& truth, const Denoiser& model, std::size_t length,
                                            const NoiseSchedule& schedule, const TimeGrid& grid,
                                            std::size_t path_cap = 20'000'000) {
  if (truth.vocab_size() != model.vocab_size()) throw DomainError("analyze_path_space: vocabulary mismatch");
  detail::PathSpaceWalker walker(truth, model, schedule, grid, path_cap);
  return walker.run(length);
}

}  // namespace mdm
