// SPDX-License-Identifier: Apache-2.0
#pragma once

/*
 * Denoisers: p(X_0^l | z_t, t) for every masked position l.
 *
 * Backends:
 * - IIDOracle       exact posterior of an i.i.d. data model (every masked position gets the marginal)
 * - MarkovOracle    exact posterior of a first-order Markov chain via nearest-evidence message passing
 * - PerturbedOracle (1 - eps) * inner + eps * uniform; a controllable epsilon-accurate model
 * - RemoteClient    see remote.hpp
 *
 * Oracles ignore t: under uniform random masking the mask pattern is a sufficient statistic.
 */

#include <cmath>
#include <cstddef>
#include <limits>
#include <memory>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "core.hpp"
#include "errors.hpp"

namespace mdm {

inline constexpr double kProbTolerance = 1e-9;
inline constexpr std::size_t kDefaultEnumerationCap = 1'000'000;

namespace detail {

inline void check_distribution(std::span<const double> p, double tol, const char* what) {
  double sum = 0.0;
  for (double v : p) {
    if (!(v >= 0.0) || !std::isfinite(v)) throw DomainError(std::string(what) + ": negative or non-finite entry");
    sum += v;
  }
  if (std::abs(sum - 1.0) > tol) throw DomainError(std::string(what) + ": entries do not sum to 1");
}

inline void normalize(std::span<double> p) {
  double sum = 0.0;
  for (double v : p) sum += v;
  for (double& v : p) v /= sum;
}

}  // namespace detail

// ============================================================================
// PredictiveDistribution
// ============================================================================

class PredictiveDistribution {
 public:
  PredictiveDistribution(std::size_t vocab_size, std::vector<std::size_t> positions,
                         std::vector<double> probs)
      : k_(vocab_size), positions_(std::move(positions)), probs_(std::move(probs)) {
    if (probs_.size() != positions_.size() * k_)
      throw DomainError("predictive distribution: probability table has the wrong shape");
    for (std::size_t i = 1; i < positions_.size(); ++i)
      if (positions_[i] <= positions_[i - 1]) throw DomainError("predictive distribution: positions must be sorted");
    for (std::size_t i = 0; i < positions_.size(); ++i) detail::check_distribution(row(i), kProbTolerance, "predictive distribution");
  }

  std::size_t vocab_size() const noexcept { return k_; }
  std::size_t size() const noexcept { return positions_.size(); }
  std::span<const std::size_t> positions() const noexcept { return positions_; }

  std::span<const double> row(std::size_t i) const { return {probs_.data() + i * k_, k_}; }

  bool covers(std::size_t pos) const {
    return std::binary_search(positions_.begin(), positions_.end(), pos);
  }

  // Distribution at sequence position `pos`. Throws for positions that are not masked.
  std::span<const double> at(std::size_t pos) const {
    auto it = std::lower_bound(positions_.begin(), positions_.end(), pos);
    if (it == positions_.end() || *it != pos)
      throw PreconditionError("predictive distribution queried at an unmasked position");
    return row(static_cast<std::size_t>(it - positions_.begin()));
  }

 private:
  std::size_t k_;
  std::vector<std::size_t> positions_;
  std::vector<double> probs_;
};

// ============================================================================
// DataModel
// ============================================================================

enum class DataKind { iid, markov };

class DataModel {
 public:
  static DataModel iid(std::vector<double> marginal) {
    detail::check_distribution(marginal, kProbTolerance, "iid marginal");
    DataModel m(DataKind::iid, marginal.size());
    m.initial_ = std::move(marginal);
    return m;
  }

  // transition is row-major K x K, rows are next-token distributions.
  static DataModel markov(std::vector<double> initial, std::vector<double> transition) {
    const std::size_t k = initial.size();
    detail::check_distribution(initial, kProbTolerance, "markov initial distribution");
    if (transition.size() != k * k) throw DomainError("markov transition must be K x K");
    for (std::size_t r = 0; r < k; ++r)
      detail::check_distribution(std::span<const double>(transition).subspan(r * k, k), kProbTolerance,
                                 "markov transition row");
    DataModel m(DataKind::markov, k);
    m.initial_ = std::move(initial);
    m.transition_ = std::move(transition);
    return m;
  }

  // Seeded random chain: Dirichlet(1) rows raised elementwise to `sharpen` and renormalized,
  // started from its stationary distribution.
  static DataModel random_markov(std::size_t k, std::uint64_t seed, double sharpen = 3.0) {
    RngStream rng(seed, 0x6d61726b6f76ULL);
    std::vector<double> t(k * k);
    for (std::size_t r = 0; r < k; ++r) {
      std::span<double> row(t.data() + r * k, k);
      for (double& v : row) v = std::pow(-std::log1p(-rng.uniform()), sharpen);
      detail::normalize(row);
    }
    auto pi = stationary_distribution(t, k);
    return markov(std::move(pi), std::move(t));
  }

  static std::vector<double> stationary_distribution(std::span<const double> t, std::size_t k) {
    std::vector<double> pi(k, 1.0 / static_cast<double>(k)), next(k);
    for (int iter = 0; iter < 100000; ++iter) {
      std::fill(next.begin(), next.end(), 0.0);
      for (std::size_t a = 0; a < k; ++a)
        for (std::size_t b = 0; b < k; ++b) next[b] += pi[a] * t[a * k + b];
      detail::normalize(next);
      double diff = 0.0;
      for (std::size_t i = 0; i < k; ++i) diff = std::max(diff, std::abs(next[i] - pi[i]));
      pi.swap(next);
      if (diff < 1e-15) break;
    }
    return pi;
  }

  DataKind kind() const noexcept { return kind_; }
  std::size_t vocab_size() const noexcept { return k_; }

  // iid marginal or markov initial distribution.
  std::span<const double> initial() const noexcept { return initial_; }
  std::span<const double> marginal() const noexcept { return initial_; }
  std::span<const double> transition() const noexcept { return transition_; }
  double transition(std::size_t from, std::size_t to) const { return transition_[from * k_ + to]; }

  // ln q(x). -inf for zero-probability sequences.
  double sequence_log_prob(std::span<const Token> x) const {
    double lp = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
      if (x[i] < 0 || static_cast<std::size_t>(x[i]) >= k_) throw DomainError("sequence contains a non-content token");
      const double p = (kind_ == DataKind::iid || i == 0) ? initial_[x[i]] : transition(x[i - 1], x[i]);
      if (p <= 0.0) return -std::numeric_limits<double>::infinity();
      lp += std::log(p);
    }
    return lp;
  }

  std::vector<Token> sample(std::size_t length, RngStream& rng) const {
    std::vector<Token> x(length);
    for (std::size_t i = 0; i < length; ++i) {
      std::span<const double> p = (kind_ == DataKind::iid || i == 0)
                                      ? std::span<const double>(initial_)
                                      : std::span<const double>(transition_).subspan(x[i - 1] * k_, k_);
      x[i] = static_cast<Token>(rng.categorical(p));
    }
    return x;
  }

  // Marginal distribution of position `pos` under the prior (no evidence).
  std::vector<double> prior_marginal(std::size_t pos) const {
    std::vector<double> m(initial_);
    if (kind_ == DataKind::iid) return m;
    std::vector<double> next(k_);
    for (std::size_t step = 0; step < pos; ++step) {
      std::fill(next.begin(), next.end(), 0.0);
      for (std::size_t a = 0; a < k_; ++a)
        for (std::size_t b = 0; b < k_; ++b) next[b] += m[a] * transition(a, b);
      m.swap(next);
    }
    return m;
  }

 private:
  DataModel(DataKind kind, std::size_t k) : kind_(kind), k_(k) {
    if (k < 2) throw DomainError("data model needs K >= 2");
  }

  DataKind kind_;
  std::size_t k_;
  std::vector<double> initial_;
  std::vector<double> transition_;
};

// ============================================================================
// Joint conditional over masked completions
// ============================================================================

// Exact P(X_M | observed). Completion index is mixed radix over `positions`, first position most
// significant.
struct JointDistribution {
  std::size_t vocab_size = 0;
  std::vector<std::size_t> positions;
  std::vector<double> probs;

  std::vector<Token> completion(std::size_t index) const {
    std::vector<Token> out(positions.size());
    for (std::size_t j = positions.size(); j-- > 0;) {
      out[j] = static_cast<Token>(index % vocab_size);
      index /= vocab_size;
    }
    return out;
  }

  // Marginal of the j-th masked position.
  std::vector<double> marginal(std::size_t j) const {
    std::vector<double> m(vocab_size, 0.0);
    std::size_t stride = 1;
    for (std::size_t r = j + 1; r < positions.size(); ++r) stride *= vocab_size;
    for (std::size_t idx = 0; idx < probs.size(); ++idx) m[(idx / stride) % vocab_size] += probs[idx];
    return m;
  }
};

inline std::size_t enumeration_size(std::size_t k, std::size_t m, std::size_t cap) {
  std::size_t n = 1;
  for (std::size_t i = 0; i < m; ++i) {
    if (n > cap / k) throw CapacityError("enumeration of K^|M| completions exceeds the cap");
    n *= k;
  }
  if (n > cap) throw CapacityError("enumeration of K^|M| completions exceeds the cap");
  return n;
}

// ============================================================================
// Denoiser interface and oracle backends
// ============================================================================

class Denoiser {
 public:
  virtual ~Denoiser() = default;

  virtual std::size_t vocab_size() const = 0;
  virtual std::string name() const = 0;

  // Predictive distribution at every masked position of `state`.
  // Throws PreconditionError when the state has no masks.
  virtual PredictiveDistribution predict(const SeqState& state) const = 0;
};

class ExactOracle : public Denoiser {
 public:
  explicit ExactOracle(DataModel data) : data_(std::move(data)) {}

  const DataModel& data() const noexcept { return data_; }
  std::size_t vocab_size() const override { return data_.vocab_size(); }

  // Brute-force joint posterior of all masked tokens given the observed ones.
  JointDistribution joint_conditional(const SeqState& state, std::size_t cap = kDefaultEnumerationCap) const {
    check_state(state);
    const std::size_t k = vocab_size();
    JointDistribution joint;
    joint.vocab_size = k;
    joint.positions = state.masked_positions();
    const std::size_t n = enumeration_size(k, joint.positions.size(), cap);
    joint.probs.assign(n, 0.0);
    std::vector<Token> x(state.tokens().begin(), state.tokens().end());
    std::vector<double> logp(n);
    double max_lp = -std::numeric_limits<double>::infinity();
    for (std::size_t idx = 0; idx < n; ++idx) {
      std::size_t rest = idx;
      for (std::size_t j = joint.positions.size(); j-- > 0;) {
        x[joint.positions[j]] = static_cast<Token>(rest % k);
        rest /= k;
      }
      logp[idx] = data_.sequence_log_prob(x);
      max_lp = std::max(max_lp, logp[idx]);
    }
    if (!std::isfinite(max_lp)) throw DomainError("observed tokens have zero probability under the data model");
    double total = 0.0;
    for (std::size_t idx = 0; idx < n; ++idx) {
      joint.probs[idx] = std::exp(logp[idx] - max_lp);
      total += joint.probs[idx];
    }
    for (double& p : joint.probs) p /= total;
    return joint;
  }

 protected:
  void check_state(const SeqState& state) const {
    if (state.vocab().size() != vocab_size()) throw DomainError("state vocabulary does not match the denoiser");
    if (state.fully_unmasked()) throw PreconditionError("predict requires at least one masked position");
  }

 private:
  DataModel data_;
};

class IIDOracle final : public ExactOracle {
 public:
  explicit IIDOracle(DataModel data) : ExactOracle(std::move(data)) {
    if (this->data().kind() != DataKind::iid) throw DomainError("IIDOracle requires an iid data model");
  }

  std::string name() const override { return "iid_oracle"; }

  PredictiveDistribution predict(const SeqState& state) const override {
    check_state(state);
    auto positions = state.masked_positions();
    std::vector<double> probs;
    probs.reserve(positions.size() * vocab_size());
    for (std::size_t i = 0; i < positions.size(); ++i)
      probs.insert(probs.end(), data().marginal().begin(), data().marginal().end());
    return PredictiveDistribution(vocab_size(), std::move(positions), std::move(probs));
  }
};

// Exact posterior for a first-order chain. A masked run between observed neighbours a (left) and
// b (right) only depends on those two tokens, so each run is solved by one forward and one backward
// sweep: O(L K^2) per state.
class MarkovOracle final : public ExactOracle {
 public:
  explicit MarkovOracle(DataModel model) : ExactOracle(std::move(model)) {
    if (data().kind() != DataKind::markov) throw DomainError("MarkovOracle requires a markov data model");
  }

  std::string name() const override { return "markov_oracle"; }

  PredictiveDistribution predict(const SeqState& state) const override {
    check_state(state);
    const std::size_t k = vocab_size();
    const std::size_t len = state.length();
    auto positions = state.masked_positions();
    std::vector<double> probs(positions.size() * k);

    std::vector<double> fwd, bwd, tmp(k);
    std::size_t out_row = 0;
    std::size_t pos = 0;
    while (pos < len) {
      if (!state.is_masked(pos)) {
        ++pos;
        continue;
      }
      const std::size_t begin = pos;
      while (pos < len && state.is_masked(pos)) ++pos;
      const std::size_t end = pos;  // exclusive
      const std::size_t run = end - begin;

      // Forward messages, one normalized K-vector per run position.
      fwd.assign(run * k, 0.0);
      if (begin == 0) {
        auto prior = data().prior_marginal(0);
        std::copy(prior.begin(), prior.end(), fwd.begin());
      } else {
        const auto left = static_cast<std::size_t>(state[begin - 1]);
        for (std::size_t b = 0; b < k; ++b) fwd[b] = data().transition(left, b);
      }
      detail::normalize(std::span<double>(fwd.data(), k));
      for (std::size_t r = 1; r < run; ++r) {
        std::span<const double> prev(fwd.data() + (r - 1) * k, k);
        std::span<double> cur(fwd.data() + r * k, k);
        for (std::size_t a = 0; a < k; ++a)
          for (std::size_t b = 0; b < k; ++b) cur[b] += prev[a] * data().transition(a, b);
        detail::normalize(cur);
      }

      // Backward messages: likelihood of the right-hand evidence given the token at each position.
      bwd.assign(run * k, 1.0);
      if (end < len) {
        const auto right = static_cast<std::size_t>(state[end]);
        std::span<double> last(bwd.data() + (run - 1) * k, k);
        for (std::size_t a = 0; a < k; ++a) last[a] = data().transition(a, right);
        normalize_if_positive(last);
        for (std::size_t r = run - 1; r-- > 0;) {
          std::span<const double> nxt(bwd.data() + (r + 1) * k, k);
          std::span<double> cur(bwd.data() + r * k, k);
          for (std::size_t a = 0; a < k; ++a) {
            double acc = 0.0;
            for (std::size_t b = 0; b < k; ++b) acc += data().transition(a, b) * nxt[b];
            cur[a] = acc;
          }
          normalize_if_positive(cur);
        }
      }

      for (std::size_t r = 0; r < run; ++r, ++out_row) {
        std::span<double> out(probs.data() + out_row * k, k);
        double total = 0.0;
        for (std::size_t a = 0; a < k; ++a) {
          out[a] = fwd[r * k + a] * bwd[r * k + a];
          total += out[a];
        }
        if (total > 0.0) {
          for (double& v : out) v /= total;
        } else {
          // Right-hand evidence unreachable from the left: fall back to the forward message.
          std::copy_n(fwd.data() + r * k, k, out.begin());
        }
      }
    }
    return PredictiveDistribution(k, std::move(positions), std::move(probs));
  }

 private:
  static void normalize_if_positive(std::span<double> v) {
    double s = 0.0;
    for (double x : v) s += x;
    if (s > 0.0)
      for (double& x : v) x /= s;
  }
};

class PerturbedOracle final : public Denoiser {
 public:
  PerturbedOracle(std::shared_ptr<const Denoiser> inner, double epsilon_mix)
      : inner_(std::move(inner)), eps_(epsilon_mix) {
    if (!inner_) throw DomainError("PerturbedOracle needs an inner backend");
    if (!(eps_ >= 0.0 && eps_ <= 1.0)) throw DomainError("epsilon_mix must lie in [0, 1]");
  }

  std::size_t vocab_size() const override { return inner_->vocab_size(); }
  std::string name() const override { return "perturbed(" + inner_->name() + ")"; }
  double epsilon_mix() const noexcept { return eps_; }
  const Denoiser& inner() const noexcept { return *inner_; }

  PredictiveDistribution predict(const SeqState& state) const override {
    auto base = inner_->predict(state);
    const std::size_t k = vocab_size();
    std::vector<std::size_t> positions(base.positions().begin(), base.positions().end());
    std::vector<double> probs(positions.size() * k);
    const double u = eps_ / static_cast<double>(k);
    for (std::size_t i = 0; i < positions.size(); ++i) {
      auto src = base.row(i);
      std::span<double> dst(probs.data() + i * k, k);
      for (std::size_t a = 0; a < k; ++a) dst[a] = (1.0 - eps_) * src[a] + u;
      detail::normalize(dst);
    }
    return PredictiveDistribution(k, std::move(positions), std::move(probs));
  }

 private:
  std::shared_ptr<const Denoiser> inner_;
  double eps_;
};

inline PredictiveDistribution predict(const Denoiser& backend, const SeqState& state) {
  return backend.predict(state);
}

inline std::shared_ptr<const ExactOracle> make_oracle(const DataModel& data) {
  if (data.kind() == DataKind::iid) return std::make_shared<IIDOracle>(data);
  return std::make_shared<MarkovOracle>(data);
}

// KL(p || q) in nats; +inf when q misses mass of p.
inline double kl_divergence(std::span<const double> p, std::span<const double> q) {
  if (p.size() != q.size()) throw DomainError("kl_divergence: size mismatch");
  double kl = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (p[i] <= 0.0) continue;
    if (q[i] <= 0.0) return std::numeric_limits<double>::infinity();
    kl += p[i] * std::log(p[i] / q[i]);
  }
  return std::max(kl, 0.0);
}

// Mean per-position KL(true posterior || perturbed prediction) at `state`.
inline double epsilon_of(const PerturbedOracle& backend, const SeqState& state) {
  if (backend.epsilon_mix() == 0.0) return 0.0;
  auto truth = backend.inner().predict(state);
  auto model = backend.predict(state);
  double total = 0.0;
  for (std::size_t i = 0; i < truth.size(); ++i) total += kl_divergence(truth.row(i), model.row(i));
  return total / static_cast<double>(truth.size());
}

}  // namespace mdm
