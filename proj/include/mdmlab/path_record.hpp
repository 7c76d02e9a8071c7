// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "core.hpp"

namespace mdm {

// Grid point and mask count of the state an entropy_trace entry was measured on.
struct TraceStep {
  std::size_t time_index = 0;
  std::size_t mask_count = 0;
};

// One decoding path tau = (z_{t_N}, ..., z_{t_0}).
struct PathRecord {
  std::vector<SeqState> states;        // t_N first; p2 refinement states appear in order
  std::vector<double> entropy_trace;   // h_DE before each grid step on a state with masks
  std::vector<TraceStep> trace_steps;  // aligned with entropy_trace
  std::vector<Token> final_sequence;
  double path_entropy = 0.0;           // H_DE, mean of entropy_trace
  std::optional<double> nll_eval;      // ln PPL under the evaluator, filled by metrics
  std::optional<double> diversity;
  std::uint64_t seed = 0;
  std::uint64_t stream_id = 0;
  std::string strategy;
};

}  // namespace mdm
