// SPDX-License-Identifier: Apache-2.0
#pragma once

/*
 * Core value types for masked-diffusion decoding.
 *
 * - Vocab: K content tokens [0, K) plus a MASK sentinel encoded as K.
 * - NoiseSchedule: strictly decreasing survival probability alpha(t), alpha(0) = 1, alpha(1) = 0.
 * - TimeGrid: uniform grid 0 = t_0 < ... < t_N = 1, stored ascending and iterated descending.
 * - SeqState: the latent z_t (tokens + grid index). The masked set is always derived from tokens.
 * - RngStream: reproducible random stream keyed by (seed, stream_id).
 */

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numbers>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "errors.hpp"

namespace mdm {

using Token = std::int32_t;

// ============================================================================
// Vocab
// ============================================================================

class Vocab {
 public:
  explicit Vocab(std::size_t size) : size_(size) {
    if (size < 2) throw DomainError("vocabulary needs at least 2 content tokens");
  }

  std::size_t size() const noexcept { return size_; }
  Token mask() const noexcept { return static_cast<Token>(size_); }
  bool is_content(Token t) const noexcept { return t >= 0 && static_cast<std::size_t>(t) < size_; }

  friend bool operator==(const Vocab&, const Vocab&) = default;

 private:
  std::size_t size_;
};

// ============================================================================
// Noise schedule
// ============================================================================

enum class ScheduleKind { linear, cosine };

inline std::string_view to_string(ScheduleKind k) {
  return k == ScheduleKind::linear ? "linear" : "cosine";
}

inline ScheduleKind parse_schedule_kind(std::string_view s) {
  if (s == "linear") return ScheduleKind::linear;
  if (s == "cosine") return ScheduleKind::cosine;
  throw DomainError("unknown noise schedule '" + std::string(s) + "'");
}

class NoiseSchedule {
 public:
  explicit NoiseSchedule(ScheduleKind kind = ScheduleKind::linear) : kind_(kind) {}

  ScheduleKind kind() const noexcept { return kind_; }

  // Probability that a token survives unmasked at time t.
  double alpha(double t) const {
    if (!(t >= 0.0 && t <= 1.0)) throw DomainError("schedule time must lie in [0, 1]");
    switch (kind_) {
      case ScheduleKind::linear:
        return 1.0 - t;
      case ScheduleKind::cosine: {
        if (t == 1.0) return 0.0;
        const double c = std::cos(std::numbers::pi * t / 2.0);
        return c * c;
      }
    }
    return 0.0;
  }

  // |d alpha / dt|, closed form.
  double alpha_rate(double t) const {
    switch (kind_) {
      case ScheduleKind::linear:
        return 1.0;
      case ScheduleKind::cosine:
        return std::numbers::pi / 2.0 * std::sin(std::numbers::pi * t);
    }
    return 0.0;
  }

 private:
  ScheduleKind kind_;
};

// ============================================================================
// Time grid
// ============================================================================

class TimeGrid {
 public:
  explicit TimeGrid(std::size_t steps) : steps_(steps) {
    if (steps == 0) throw DomainError("time grid needs at least one step");
  }

  std::size_t steps() const noexcept { return steps_; }
  std::size_t size() const noexcept { return steps_ + 1; }

  double time(std::size_t i) const {
    if (i > steps_) throw DomainError("time grid index out of range");
    if (i == steps_) return 1.0;
    return static_cast<double>(i) / static_cast<double>(steps_);
  }

  double spacing() const noexcept { return 1.0 / static_cast<double>(steps_); }

  std::size_t nearest_index(double t) const {
    const double scaled = std::clamp(t, 0.0, 1.0) * static_cast<double>(steps_);
    return static_cast<std::size_t>(std::llround(scaled));
  }

  std::vector<double> times() const {
    std::vector<double> out(size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = time(i);
    return out;
  }

 private:
  std::size_t steps_;
};

inline TimeGrid make_time_grid(std::size_t steps) { return TimeGrid(steps); }

// ============================================================================
// Sequence state
// ============================================================================

class SeqState {
 public:
  SeqState(Vocab vocab, std::vector<Token> tokens, std::size_t time_index)
      : vocab_(vocab), tokens_(std::move(tokens)), time_index_(time_index) {
    for (Token t : tokens_) {
      if (!vocab_.is_content(t) && t != vocab_.mask()) throw DomainError("token index out of range");
    }
  }

  static SeqState fully_masked(Vocab vocab, std::size_t length, std::size_t time_index) {
    return SeqState(vocab, std::vector<Token>(length, vocab.mask()), time_index);
  }

  const Vocab& vocab() const noexcept { return vocab_; }
  std::size_t length() const noexcept { return tokens_.size(); }
  std::span<const Token> tokens() const noexcept { return tokens_; }
  Token operator[](std::size_t pos) const { return tokens_.at(pos); }

  std::size_t time_index() const noexcept { return time_index_; }
  void set_time_index(std::size_t i) noexcept { time_index_ = i; }

  // Continuous time when the state was produced off-grid by forward corruption.
  std::optional<double> raw_time() const noexcept { return raw_time_; }
  void set_raw_time(double t) noexcept { raw_time_ = t; }

  bool is_masked(std::size_t pos) const { return tokens_.at(pos) == vocab_.mask(); }

  std::vector<std::size_t> masked_positions() const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < tokens_.size(); ++i)
      if (tokens_[i] == vocab_.mask()) out.push_back(i);
    return out;
  }

  std::size_t mask_count() const noexcept {
    return static_cast<std::size_t>(std::count(tokens_.begin(), tokens_.end(), vocab_.mask()));
  }

  bool fully_unmasked() const noexcept { return mask_count() == 0; }

  void set(std::size_t pos, Token t) {
    if (!vocab_.is_content(t) && t != vocab_.mask()) throw DomainError("token index out of range");
    tokens_.at(pos) = t;
  }

  void mask(std::size_t pos) { tokens_.at(pos) = vocab_.mask(); }

  friend bool operator==(const SeqState& a, const SeqState& b) {
    return a.vocab_ == b.vocab_ && a.tokens_ == b.tokens_ && a.time_index_ == b.time_index_;
  }

 private:
  Vocab vocab_;
  std::vector<Token> tokens_;
  std::size_t time_index_;
  std::optional<double> raw_time_;
};

// ============================================================================
// Random streams
// ============================================================================

namespace detail {

inline std::uint64_t splitmix64(std::uint64_t x) noexcept {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

}  // namespace detail

class RngStream {
 public:
  RngStream(std::uint64_t seed, std::uint64_t stream_id) : seed_(seed), stream_id_(stream_id) {
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                      static_cast<std::uint32_t>(stream_id),
                      static_cast<std::uint32_t>(stream_id >> 32)};
    engine_.seed(seq);
  }

  std::uint64_t seed() const noexcept { return seed_; }
  std::uint64_t stream_id() const noexcept { return stream_id_; }

  // Independent child stream; the parent is not advanced.
  RngStream derive(std::uint64_t child) const {
    return RngStream(seed_, detail::splitmix64(stream_id_ ^ detail::splitmix64(child + 1)));
  }

  std::uint64_t next_u64() { return engine_(); }

  // Uniform on [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

  bool bernoulli(double p) { return uniform() < p; }

  std::size_t uniform_index(std::size_t n) {
    if (n == 0) throw DomainError("uniform_index over an empty range");
    return static_cast<std::size_t>(uniform() * static_cast<double>(n)) % n;
  }

  // Inverse-CDF draw from unnormalized nonnegative weights.
  std::size_t categorical(std::span<const double> weights) {
    double total = 0.0;
    for (double w : weights) total += w;
    if (!(total > 0.0)) throw DomainError("categorical draw needs positive total weight");
    const double u = uniform() * total;
    double acc = 0.0;
    std::size_t last_positive = 0;
    for (std::size_t i = 0; i < weights.size(); ++i) {
      if (weights[i] <= 0.0) continue;
      acc += weights[i];
      last_positive = i;
      if (u < acc) return i;
    }
    return last_positive;
  }

 private:
  std::uint64_t seed_;
  std::uint64_t stream_id_;
  std::mt19937_64 engine_;
};

// ============================================================================
// Forward corruption
// ============================================================================

// Masks each position independently with probability 1 - alpha(t). Without a grid the raw t is kept
// on the state and time_index is 0.
inline SeqState corrupt_forward(Vocab vocab, std::span<const Token> x0, double t,
                                const NoiseSchedule& schedule, RngStream& rng,
                                const TimeGrid* grid = nullptr) {
  for (Token tok : x0)
    if (!vocab.is_content(tok)) throw DomainError("corrupt_forward: x0 must contain content tokens only");
  const double keep = schedule.alpha(t);
  std::vector<Token> tokens(x0.begin(), x0.end());
  for (auto& tok : tokens)
    if (!(rng.uniform() < keep)) tok = vocab.mask();
  SeqState out(vocab, std::move(tokens), grid ? grid->nearest_index(t) : 0);
  if (!grid) out.set_raw_time(t);
  return out;
}

}  // namespace mdm
