// SPDX-License-Identifier: Apache-2.0
#pragma once

/*
 * Experiment harness: configuration, method runners with paired seeds, summaries, correlation and
 * ablation studies, and JSONL / CSV persistence.
 *
 * Replicate r of any method starts from the base stream RngStream(seed, r). Vanilla decodes with
 * base.derive(0); E-BoN candidate m and E-SMC particle m use base.derive(m).
 */

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <memory>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "core.hpp"
#include "denoiser.hpp"
#include "errors.hpp"
#include "metrics.hpp"
#include "parallel.hpp"
#include "path_record.hpp"
#include "remote.hpp"
#include "reverse.hpp"
#include "search.hpp"
#include "stats.hpp"

namespace mdm {

using nlohmann::json;

// ============================================================================
// Configuration
// ============================================================================

inline constexpr std::uint64_t kDefaultBenchmarkSeed = 23;

struct DataSpec {
  std::string kind = "random_markov";  // random_markov | markov | iid
  std::uint64_t seed = kDefaultBenchmarkSeed;
  double sharpen = 3.0;
  std::vector<double> marginal;                  // iid
  std::vector<double> initial;                   // markov
  std::vector<std::vector<double>> transition;   // markov, rows
};

struct BackendSpec {
  std::string kind = "oracle";  // oracle | perturbed | remote
  double epsilon = 0.0;
  std::string endpoint;
};

struct GreedySpec {
  std::size_t candidates = 8;  // c
  std::size_t beams = 1;       // s
};

struct SweepSpec {
  std::vector<std::size_t> steps{4, 8, 16, 32};
  std::vector<std::size_t> particles{2, 4, 8};
  std::vector<std::size_t> delta_ir{4, 8, 16, 32};
};

enum class Method { vanilla, e_bon, e_smc, greedy, majority };

inline std::string_view to_string(Method m) {
  switch (m) {
    case Method::vanilla: return "vanilla";
    case Method::e_bon: return "e_bon";
    case Method::e_smc: return "e_smc";
    case Method::greedy: return "greedy";
    case Method::majority: return "majority";
  }
  return "?";
}

inline Method parse_method(std::string_view s) {
  for (auto m : {Method::vanilla, Method::e_bon, Method::e_smc, Method::greedy, Method::majority})
    if (to_string(m) == s) return m;
  throw DomainError("unknown method '" + std::string(s) + "'");
}

struct ExperimentConfig {
  DataSpec data;
  std::size_t length = 32;      // L
  std::size_t vocab_size = 8;   // K
  ScheduleKind schedule = ScheduleKind::linear;
  std::size_t steps = 32;       // S
  StrategyConfig strategy = [] {
    StrategyConfig s;
    s.token_temperature = 1.0;
    return s;
  }();
  SearchConfig search;
  GreedySpec greedy;
  BackendSpec backend;
  std::size_t replicates = 200;
  std::uint64_t seed = 1;
  std::string output_dir = "results";
  SweepSpec sweep;
  std::size_t jobs = 0;  // 0 = logical cores
  Method method = Method::vanilla;

  std::size_t effective_jobs() const { return jobs == 0 ? default_jobs() : jobs; }

  void validate() const {
    if (length == 0) throw DomainError("config: L must be >= 1");
    if (vocab_size < 2) throw DomainError("config: K must be >= 2");
    if (steps == 0) throw DomainError("config: S must be >= 1");
    if (replicates == 0) throw DomainError("config: replicates must be >= 1");
    if (greedy.candidates == 0 || greedy.beams == 0) throw DomainError("config: greedy c and s must be >= 1");
    if (backend.kind != "oracle" && backend.kind != "perturbed" && backend.kind != "remote")
      throw DomainError("config: unknown backend '" + backend.kind + "'");
    if (backend.kind == "perturbed" && !(backend.epsilon >= 0.0 && backend.epsilon <= 1.0))
      throw DomainError("config: backend.epsilon must lie in [0, 1]");
    if (backend.kind == "remote" && backend.endpoint.empty()) throw DomainError("config: backend.endpoint is empty");
    strategy.validate();
    search.validate();
  }
};

namespace detail {

inline void reject_unknown_keys(const json& j, std::initializer_list<std::string_view> allowed, const char* where) {
  if (!j.is_object()) throw DomainError(std::string("config: '") + where + "' must be an object");
  for (const auto& [key, _] : j.items()) {
    if (std::find(allowed.begin(), allowed.end(), key) == allowed.end())
      throw DomainError(std::string("config: unknown key '") + key + "' in " + where);
  }
}

template <typename T>
void read_if(const json& j, const char* key, T& out) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const json::exception& e) {
    throw DomainError(std::string("config: bad value for '") + key + "': " + e.what());
  }
}

}  // namespace detail

inline json to_json(const StrategyConfig& s) {
  return {{"kind", to_string(s.kind)},
          {"gamma", s.gamma},
          {"blocks", s.blocks},
          {"conf_min", s.conf_min},
          {"lambda_pos", s.lambda_pos},
          {"alpha_pos", s.alpha_pos},
          {"draft_fraction", s.draft_fraction},
          {"refine_iters", s.refine_iters},
          {"selection_temperature", s.selection_temperature},
          {"token_temperature", s.token_temperature},
          {"policy", to_string(s.policy)}};
}

inline json to_json(const ExperimentConfig& c) {
  json data = {{"kind", c.data.kind}};
  if (c.data.kind == "random_markov") {
    data["seed"] = c.data.seed;
    data["sharpen"] = c.data.sharpen;
  } else if (c.data.kind == "iid") {
    data["marginal"] = c.data.marginal;
  } else {
    data["initial"] = c.data.initial;
    data["transition"] = c.data.transition;
  }
  json backend = {{"kind", c.backend.kind}};
  if (c.backend.kind == "perturbed") backend["epsilon"] = c.backend.epsilon;
  if (c.backend.kind == "remote") backend["endpoint"] = c.backend.endpoint;
  return {{"data", data},
          {"L", c.length},
          {"K", c.vocab_size},
          {"schedule", to_string(c.schedule)},
          {"S", c.steps},
          {"strategy", to_json(c.strategy)},
          {"search",
           {{"particles", c.search.particles},
            {"lambda", c.search.lambda},
            {"resample_interval", c.search.resample_interval},
            {"systematic", c.search.systematic}}},
          {"greedy", {{"candidates", c.greedy.candidates}, {"beams", c.greedy.beams}}},
          {"backend", backend},
          {"replicates", c.replicates},
          {"seed", c.seed},
          {"output_dir", c.output_dir},
          {"sweep", {{"S", c.sweep.steps}, {"M", c.sweep.particles}, {"delta_ir", c.sweep.delta_ir}}},
          {"jobs", c.jobs},
          {"method", to_string(c.method)}};
}

inline ExperimentConfig config_from_json(const json& j) {
  using detail::read_if;
  detail::reject_unknown_keys(j,
                              {"data", "L", "K", "schedule", "S", "strategy", "search", "greedy", "backend",
                               "replicates", "seed", "output_dir", "sweep", "jobs", "method"},
                              "config");
  ExperimentConfig c;
  if (j.contains("data")) {
    const auto& d = j["data"];
    detail::reject_unknown_keys(d, {"kind", "seed", "sharpen", "marginal", "initial", "transition"}, "data");
    read_if(d, "kind", c.data.kind);
    read_if(d, "seed", c.data.seed);
    read_if(d, "sharpen", c.data.sharpen);
    read_if(d, "marginal", c.data.marginal);
    read_if(d, "initial", c.data.initial);
    read_if(d, "transition", c.data.transition);
  }
  read_if(j, "L", c.length);
  read_if(j, "K", c.vocab_size);
  if (j.contains("schedule")) c.schedule = parse_schedule_kind(j["schedule"].get<std::string>());
  read_if(j, "S", c.steps);
  if (j.contains("strategy")) {
    const auto& s = j["strategy"];
    detail::reject_unknown_keys(s,
                                {"kind", "gamma", "blocks", "conf_min", "lambda_pos", "alpha_pos", "draft_fraction",
                                 "refine_iters", "selection_temperature", "token_temperature", "policy"},
                                "strategy");
    if (s.contains("kind")) c.strategy.kind = parse_strategy_kind(s["kind"].get<std::string>());
    read_if(s, "gamma", c.strategy.gamma);
    read_if(s, "blocks", c.strategy.blocks);
    read_if(s, "conf_min", c.strategy.conf_min);
    read_if(s, "lambda_pos", c.strategy.lambda_pos);
    read_if(s, "alpha_pos", c.strategy.alpha_pos);
    read_if(s, "draft_fraction", c.strategy.draft_fraction);
    read_if(s, "refine_iters", c.strategy.refine_iters);
    read_if(s, "selection_temperature", c.strategy.selection_temperature);
    read_if(s, "token_temperature", c.strategy.token_temperature);
    if (s.contains("policy")) c.strategy.policy = parse_token_policy(s["policy"].get<std::string>());
  }
  if (j.contains("search")) {
    const auto& s = j["search"];
    detail::reject_unknown_keys(s, {"particles", "lambda", "resample_interval", "systematic"}, "search");
    read_if(s, "particles", c.search.particles);
    read_if(s, "lambda", c.search.lambda);
    read_if(s, "resample_interval", c.search.resample_interval);
    read_if(s, "systematic", c.search.systematic);
  }
  if (j.contains("greedy")) {
    const auto& g = j["greedy"];
    detail::reject_unknown_keys(g, {"candidates", "beams"}, "greedy");
    read_if(g, "candidates", c.greedy.candidates);
    read_if(g, "beams", c.greedy.beams);
  }
  if (j.contains("backend")) {
    const auto& b = j["backend"];
    detail::reject_unknown_keys(b, {"kind", "epsilon", "endpoint"}, "backend");
    read_if(b, "kind", c.backend.kind);
    read_if(b, "epsilon", c.backend.epsilon);
    read_if(b, "endpoint", c.backend.endpoint);
  }
  read_if(j, "replicates", c.replicates);
  read_if(j, "seed", c.seed);
  read_if(j, "output_dir", c.output_dir);
  if (j.contains("sweep")) {
    const auto& s = j["sweep"];
    detail::reject_unknown_keys(s, {"S", "M", "delta_ir"}, "sweep");
    read_if(s, "S", c.sweep.steps);
    read_if(s, "M", c.sweep.particles);
    read_if(s, "delta_ir", c.sweep.delta_ir);
  }
  read_if(j, "jobs", c.jobs);
  if (j.contains("method")) c.method = parse_method(j["method"].get<std::string>());
  c.validate();
  return c;
}

inline json read_json_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError(path.string(), "cannot open file");
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw DomainError("config " + path.string() + ": " + e.what());
  }
}

// "search.lambda=30" sets j["search"]["lambda"] = 30. Values parse as JSON, falling back to strings.
inline void apply_override(json& j, std::string_view assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string_view::npos || eq == 0) throw DomainError("override '" + std::string(assignment) + "' is not key=value");
  const std::string key(assignment.substr(0, eq));
  const std::string raw(assignment.substr(eq + 1));
  json value;
  try {
    value = json::parse(raw);
  } catch (const json::parse_error&) {
    value = raw;
  }
  json* node = &j;
  std::size_t start = 0;
  for (;;) {
    const auto dot = key.find('.', start);
    const std::string part = key.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (part.empty()) throw DomainError("override key '" + key + "' has an empty component");
    if (!node->is_object()) throw DomainError("override key '" + key + "' descends into a non-object");
    if (dot == std::string::npos) {
      (*node)[part] = std::move(value);
      return;
    }
    node = &(*node)[part];
    if (node->is_null()) *node = json::object();
    start = dot + 1;
  }
}

// Defaults, then the file (if any), then overrides.
inline ExperimentConfig load_config(const std::optional<std::filesystem::path>& path,
                                    std::span<const std::string> overrides = {}) {
  json j = path ? read_json_file(*path) : to_json(ExperimentConfig{});
  if (path) {
    json base = to_json(ExperimentConfig{});
    base.merge_patch(j);
    j = std::move(base);
  }
  for (const auto& o : overrides) apply_override(j, o);
  return config_from_json(j);
}

// FNV-1a over the canonical JSON of the config with non-semantic fields removed.
inline std::string config_hash(const ExperimentConfig& c) {
  json j = to_json(c);
  j.erase("output_dir");
  j.erase("jobs");
  const std::string text = j.dump();
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : text) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

// ============================================================================
// Building the benchmark
// ============================================================================

inline DataModel make_data_model(const ExperimentConfig& c) {
  DataModel m = [&] {
    if (c.data.kind == "random_markov") return DataModel::random_markov(c.vocab_size, c.data.seed, c.data.sharpen);
    if (c.data.kind == "iid") return DataModel::iid(c.data.marginal);
    if (c.data.kind == "markov") {
      std::vector<double> flat;
      for (const auto& row : c.data.transition) flat.insert(flat.end(), row.begin(), row.end());
      return DataModel::markov(c.data.initial, std::move(flat));
    }
    throw DomainError("config: unknown data kind '" + c.data.kind + "'");
  }();
  if (m.vocab_size() != c.vocab_size) throw DomainError("config: data model vocabulary does not match K");
  return m;
}

inline std::shared_ptr<const Denoiser> make_backend(const ExperimentConfig& c, const DataModel& data,
                                                    std::size_t steps) {
  if (c.backend.kind == "remote") return std::make_shared<RemoteClient>(c.backend.endpoint, c.vocab_size, steps);
  std::shared_ptr<const Denoiser> oracle = make_oracle(data);
  if (c.backend.kind == "perturbed") return std::make_shared<PerturbedOracle>(oracle, c.backend.epsilon);
  return oracle;
}

// Fills the evaluator fields of a finished path.
inline void score_record(PathRecord& rec, const DataModel& data) {
  const auto score = evaluate_nll(rec.final_sequence, data);
  rec.nll_eval = score.ln_ppl;
  rec.diversity = score.diversity;
}

struct GridPoint {
  std::size_t steps = 32;
  std::size_t particles = 4;
  std::size_t delta_ir = 8;
};

// Everything needed to decode one replicate of one method.
struct Bench {
  ExperimentConfig cfg;
  DataModel data;
  std::shared_ptr<const Denoiser> backend;
  NoiseSchedule schedule;

  explicit Bench(ExperimentConfig c)
      : cfg(std::move(c)), data(make_data_model(cfg)), backend(make_backend(cfg, data, cfg.steps)),
        schedule(cfg.schedule) {}

  GridPoint default_point() const { return {cfg.steps, cfg.search.particles, cfg.search.resample_interval}; }
};

inline PathRecord run_method(const Bench& bench, Method method, const GridPoint& point, std::size_t replicate,
                             SearchRuntime rt = {}) {
  const auto& cfg = bench.cfg;
  const TimeGrid grid(point.steps);
  const SeqState x = SeqState::fully_masked(Vocab(cfg.vocab_size), cfg.length, point.steps);
  const RngStream base(cfg.seed, replicate);
  PathRecord rec;
  switch (method) {
    case Method::vanilla:
      rec = run_path(x, *bench.backend, cfg.strategy, bench.schedule, grid, base.derive(0));
      break;
    case Method::e_bon: {
      auto c = sample_candidates(x, *bench.backend, cfg.strategy, bench.schedule, grid, point.particles, base, rt);
      rec = std::move(c[e_bon_index(c)]);
      rec.strategy += "+e_bon";
      break;
    }
    case Method::e_smc: {
      SearchConfig sc = cfg.search;
      sc.particles = point.particles;
      sc.resample_interval = point.delta_ir;
      auto res = e_smc(x, *bench.backend, cfg.strategy, bench.schedule, grid, sc, base, rt);
      rec = std::move(res.survivors[res.selected]);
      break;
    }
    case Method::greedy:
      rec = greedy_search(x, *bench.backend, cfg.strategy, bench.schedule, grid, cfg.greedy.candidates,
                          cfg.greedy.beams, base);
      break;
    case Method::majority: {
      auto c = sample_candidates(x, *bench.backend, cfg.strategy, bench.schedule, grid, point.particles, base, rt);
      rec = std::move(c[majority_vote_index(c)]);
      rec.strategy += "+majority";
      break;
    }
  }
  score_record(rec, bench.data);
  return rec;
}

// ============================================================================
// Summaries
// ============================================================================

struct SummaryRow {
  std::size_t replicate = 0;
  double h_de = 0.0;
  double ln_ppl = 0.0;
  double diversity = 0.0;
  double wall_ms = 0.0;
};

struct RunSummary {
  std::string method;
  GridPoint point;
  std::string config_hash;
  std::vector<SummaryRow> rows;
  double mean_hde = 0.0;
  double std_hde = 0.0;   // sample std over replicates
  double mean_lnppl = 0.0;
  double std_lnppl = 0.0;
  double mean_diversity = 0.0;
  std::optional<double> pearson_r;  // r(H_DE, ln_ppl) over replicates
  std::string pearson_note;         // reason when pearson_r is empty

  std::vector<double> column(double SummaryRow::*field) const {
    std::vector<double> out;
    out.reserve(rows.size());
    for (const auto& r : rows) out.push_back(r.*field);
    return out;
  }
};

namespace detail {

inline void correlation_or_reason(std::span<const double> h, std::span<const double> p, std::optional<double>& r,
                                  std::string& note) {
  r.reset();
  note.clear();
  if (h.size() < 3) {
    note = "fewer than 3 samples";
    return;
  }
  for (std::size_t i = 0; i < h.size(); ++i) {
    if (!std::isfinite(h[i]) || !std::isfinite(p[i])) {
      note = "non-finite ln_ppl (zero-probability sequence)";
      return;
    }
  }
  try {
    r = pearson(h, p);
  } catch (const DomainError&) {
    note = "degenerate variance";
  }
}

}  // namespace detail

inline void finalize_summary(RunSummary& s) {
  const auto h = s.column(&SummaryRow::h_de);
  const auto p = s.column(&SummaryRow::ln_ppl);
  const auto d = s.column(&SummaryRow::diversity);
  s.mean_hde = stats::mean(h);
  s.mean_lnppl = stats::mean(p);
  s.mean_diversity = stats::mean(d);
  s.std_hde = h.size() > 1 ? stats::stddev(h) : 0.0;
  s.std_lnppl = p.size() > 1 && std::isfinite(s.mean_lnppl) ? stats::stddev(p) : 0.0;
  detail::correlation_or_reason(h, p, s.pearson_r, s.pearson_note);
}

using RecordSink = std::function<void(const PathRecord&)>;

// Runs cfg.replicates replicates of `method` at `point`. Replicates run in parallel in chunks; the
// sink (if any) sees records in replicate order.
inline RunSummary run_replicates(const Bench& bench, Method method, const GridPoint& point,
                                 const RecordSink& sink = {}) {
  const std::size_t n = bench.cfg.replicates;
  const std::size_t jobs = bench.cfg.effective_jobs();
  RunSummary s;
  s.method = std::string(to_string(method));
  s.point = point;
  s.config_hash = config_hash(bench.cfg);
  s.rows.resize(n);
  constexpr std::size_t kChunk = 256;
  std::vector<PathRecord> chunk;
  for (std::size_t begin = 0; begin < n; begin += kChunk) {
    const std::size_t count = std::min(kChunk, n - begin);
    chunk.assign(count, {});
    parallel_for(count, jobs, [&](std::size_t j) {
      const auto t0 = std::chrono::steady_clock::now();
      chunk[j] = run_method(bench, method, point, begin + j);
      const auto t1 = std::chrono::steady_clock::now();
      auto& row = s.rows[begin + j];
      row.replicate = begin + j;
      row.h_de = chunk[j].path_entropy;
      row.ln_ppl = *chunk[j].nll_eval;
      row.diversity = *chunk[j].diversity;
      row.wall_ms = std::chrono::duration<double, std::milli>(t1 - t0).count();
    });
    if (sink)
      for (const auto& rec : chunk) sink(rec);
  }
  finalize_summary(s);
  return s;
}

struct CorrelationStudy {
  std::vector<RunSummary> per_steps;  // one vanilla summary per S in the sweep
  std::optional<double> pooled_r;
  std::string pooled_note;
  bool hde_non_increasing = false;    // in S
  bool lnppl_non_increasing = false;

  json to_json() const {
    json per = json::array();
    for (const auto& s : per_steps)
      per.push_back({{"S", s.point.steps},
                     {"mean_hde", s.mean_hde},
                     {"std_hde", s.std_hde},
                     {"mean_lnppl", s.mean_lnppl},
                     {"pearson_r", s.pearson_r ? json(*s.pearson_r) : json(nullptr)}});
    json out = {{"per_S", per},
                {"pooled_r", pooled_r ? json(*pooled_r) : json(nullptr)},
                {"hde_non_increasing", hde_non_increasing},
                {"lnppl_non_increasing", lnppl_non_increasing}};
    if (!pooled_r) out["pooled_note"] = pooled_note;
    return out;
  }
};

inline CorrelationStudy run_correlation_study(const ExperimentConfig& cfg) {
  if (cfg.sweep.steps.empty()) throw DomainError("correlation study: sweep.S is empty");
  CorrelationStudy out;
  std::vector<double> h, p;
  for (std::size_t steps : cfg.sweep.steps) {
    ExperimentConfig c = cfg;
    c.steps = steps;
    const Bench bench(c);
    auto s = run_replicates(bench, Method::vanilla, {steps, 1, c.search.resample_interval});
    const auto hs = s.column(&SummaryRow::h_de);
    const auto ps = s.column(&SummaryRow::ln_ppl);
    h.insert(h.end(), hs.begin(), hs.end());
    p.insert(p.end(), ps.begin(), ps.end());
    out.per_steps.push_back(std::move(s));
  }
  detail::correlation_or_reason(h, p, out.pooled_r, out.pooled_note);
  std::vector<std::size_t> order(out.per_steps.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::sort(order.begin(), order.end(),
            [&](std::size_t a, std::size_t b) { return out.per_steps[a].point.steps < out.per_steps[b].point.steps; });
  out.hde_non_increasing = out.lnppl_non_increasing = true;
  for (std::size_t i = 1; i < order.size(); ++i) {
    const auto& prev = out.per_steps[order[i - 1]];
    const auto& cur = out.per_steps[order[i]];
    if (cur.mean_hde > prev.mean_hde) out.hde_non_increasing = false;
    if (cur.mean_lnppl > prev.mean_lnppl) out.lnppl_non_increasing = false;
  }
  return out;
}

// Vanilla, E-BoN and E-SMC at every (S, M, delta_ir) of the sweep, all on the same base seeds.
inline std::vector<RunSummary> run_ablation(const ExperimentConfig& cfg) {
  if (cfg.sweep.steps.empty() || cfg.sweep.particles.empty() || cfg.sweep.delta_ir.empty())
    throw DomainError("ablation: sweep lists must be nonempty");
  std::vector<RunSummary> out;
  for (std::size_t steps : cfg.sweep.steps) {
    ExperimentConfig c = cfg;
    c.steps = steps;
    const Bench bench(c);
    const RunSummary vanilla = run_replicates(bench, Method::vanilla, {steps, 1, 0});
    for (std::size_t m : cfg.sweep.particles) {
      const RunSummary bon = run_replicates(bench, Method::e_bon, {steps, m, 0});
      for (std::size_t delta : cfg.sweep.delta_ir) {
        RunSummary v = vanilla;
        v.point = {steps, m, delta};
        RunSummary b = bon;
        b.point = {steps, m, delta};
        out.push_back(std::move(v));
        out.push_back(std::move(b));
        out.push_back(run_replicates(bench, Method::e_smc, {steps, m, delta}));
      }
    }
  }
  return out;
}

// ============================================================================
// Persistence
// ============================================================================

inline constexpr std::string_view kSummaryCsvHeader =
    "config_hash,S,M,delta_ir,method,mean_hde,std_hde,mean_lnppl,diversity,pearson_r";

namespace detail {

inline std::string format_double(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

inline std::filesystem::path ensure_directory(const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec || !std::filesystem::is_directory(dir)) throw IoError(dir.string(), "cannot create directory");
  return dir;
}

inline json optional_number(const std::optional<double>& v) {
  if (!v || !std::isfinite(*v)) return nullptr;
  return *v;
}

}  // namespace detail

inline json record_to_json(const PathRecord& rec) {
  return {{"seed", rec.seed},
          {"stream_id", rec.stream_id},
          {"strategy", rec.strategy},
          {"entropy_trace", rec.entropy_trace},
          {"final_tokens", rec.final_sequence},
          {"path_entropy", rec.path_entropy},
          {"ln_ppl", detail::optional_number(rec.nll_eval)},
          {"diversity", detail::optional_number(rec.diversity)}};
}

// States are not persisted. A null ln_ppl reads back as +inf (zero-probability sequence) when
// "final_tokens" is present; a missing one stays empty.
inline PathRecord record_from_json(const json& j) {
  PathRecord rec;
  rec.seed = j.at("seed").get<std::uint64_t>();
  rec.stream_id = j.at("stream_id").get<std::uint64_t>();
  rec.strategy = j.at("strategy").get<std::string>();
  rec.entropy_trace = j.at("entropy_trace").get<std::vector<double>>();
  rec.final_sequence = j.at("final_tokens").get<std::vector<Token>>();
  rec.path_entropy = j.at("path_entropy").get<double>();
  if (j.contains("ln_ppl"))
    rec.nll_eval = j["ln_ppl"].is_null() ? std::numeric_limits<double>::infinity() : j["ln_ppl"].get<double>();
  if (j.contains("diversity") && !j["diversity"].is_null()) rec.diversity = j["diversity"].get<double>();
  return rec;
}

// One JSON object per line, flushed per record; memory use does not grow with the record count.
class JsonlWriter {
 public:
  explicit JsonlWriter(std::filesystem::path path) : path_(std::move(path)) {
    if (path_.has_parent_path()) detail::ensure_directory(path_.parent_path());
    out_.open(path_, std::ios::out | std::ios::trunc);
    if (!out_) throw IoError(path_.string(), "cannot open for writing");
  }

  void write(const PathRecord& rec) {
    out_ << record_to_json(rec).dump() << '\n';
    if (!out_) throw IoError(path_.string(), "write failed");
    ++count_;
  }

  void close() {
    out_.close();
    if (out_.fail()) throw IoError(path_.string(), "close failed");
  }

  const std::filesystem::path& path() const noexcept { return path_; }
  std::size_t count() const noexcept { return count_; }

 private:
  std::filesystem::path path_;
  std::ofstream out_;
  std::size_t count_ = 0;
};

inline std::size_t read_jsonl(const std::filesystem::path& path, const RecordSink& sink) {
  std::ifstream in(path);
  if (!in) throw IoError(path.string(), "cannot open for reading");
  std::string line;
  std::size_t n = 0, line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    try {
      sink(record_from_json(json::parse(line)));
    } catch (const json::exception& e) {
      throw IoError(path.string(), "line " + std::to_string(line_no) + ": " + e.what());
    }
    ++n;
  }
  if (in.bad()) throw IoError(path.string(), "read failed");
  return n;
}

inline std::vector<PathRecord> read_records(const std::filesystem::path& path) {
  std::vector<PathRecord> out;
  read_jsonl(path, [&](const PathRecord& r) { out.push_back(r); });
  return out;
}

inline std::string summary_csv_line(const RunSummary& s) {
  using detail::format_double;
  std::string line = s.config_hash + "," + std::to_string(s.point.steps) + "," + std::to_string(s.point.particles) +
                     "," + std::to_string(s.point.delta_ir) + "," + s.method + "," + format_double(s.mean_hde) + "," +
                     format_double(s.std_hde) + "," + format_double(s.mean_lnppl) + "," +
                     format_double(s.mean_diversity) + ",";
  if (s.pearson_r) line += format_double(*s.pearson_r);
  return line;
}

// Writes the summaries to <dir>/<name> as CSV and returns the file path.
inline std::filesystem::path persist(std::span<const RunSummary> summaries, const std::filesystem::path& dir,
                                     std::string_view name = "summary.csv") {
  detail::ensure_directory(dir);
  const auto path = dir / name;
  std::ofstream out(path, std::ios::out | std::ios::trunc);
  if (!out) throw IoError(path.string(), "cannot open for writing");
  out << kSummaryCsvHeader << '\n';
  for (const auto& s : summaries) out << summary_csv_line(s) << '\n';
  out.close();
  if (out.fail()) throw IoError(path.string(), "write failed");
  return path;
}

// Writes the records to <dir>/<name> as JSONL and returns the file path.
inline std::filesystem::path persist(std::span<const PathRecord> records, const std::filesystem::path& dir,
                                     std::string_view name = "paths.jsonl") {
  detail::ensure_directory(dir);
  JsonlWriter w(dir / name);
  for (const auto& r : records) w.write(r);
  w.close();
  return w.path();
}

inline json summary_to_json(const RunSummary& s) {
  json j = {{"method", s.method},
            {"S", s.point.steps},
            {"M", s.point.particles},
            {"delta_ir", s.point.delta_ir},
            {"replicates", s.rows.size()},
            {"mean_hde", s.mean_hde},
            {"std_hde", s.std_hde},
            {"mean_lnppl", std::isfinite(s.mean_lnppl) ? json(s.mean_lnppl) : json(nullptr)},
            {"diversity", s.mean_diversity},
            {"pearson_r", s.pearson_r ? json(*s.pearson_r) : json(nullptr)}};
  if (!s.pearson_r) j["pearson_note"] = s.pearson_note;
  return j;
}

}  // namespace mdm
