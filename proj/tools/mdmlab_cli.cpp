// SPDX-License-Identifier: Apache-2.0
//
// mdmlab: generate, evaluate, ablate, correlate, verify.
// One JSON line on stdout per invocation; progress and diagnostics on stderr.
// Exit codes: 0 ok, 1 failed check or runtime error, 2 usage error.

#include <algorithm>
#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "mdmlab.hpp"

namespace {

namespace fs = std::filesystem;
using mdm::json;

constexpr int kExitOk = 0;
constexpr int kExitFailed = 1;
constexpr int kExitUsage = 2;

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct Options {
  std::optional<std::string> config;
  std::optional<std::string> out;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> jobs;
  std::optional<std::size_t> steps;
  std::optional<std::size_t> particles;
  std::optional<std::size_t> resample_interval;
  std::optional<double> lambda;
  std::optional<std::string> strategy;
  std::optional<std::string> backend;
  std::optional<std::string> input;
  std::string scope = "all";
  std::vector<std::string> overrides;
};

void add_common(CLI::App* cmd, Options& o) {
  cmd->add_option("--config", o.config, "experiment config (JSON)");
  cmd->add_option("--out", o.out, "output directory");
  cmd->add_option("--seed", o.seed, "base seed (falls back to MDM_LAB_SEED)");
  cmd->add_option("--jobs", o.jobs, "worker threads (default: logical cores)");
  cmd->add_option("overrides", o.overrides, "dotted key=value config overrides");
}

void add_decoding(CLI::App* cmd, Options& o) {
  cmd->add_option("--steps", o.steps, "denoising steps S");
  cmd->add_option("--particles", o.particles, "particles / candidates M");
  cmd->add_option("--resample-interval", o.resample_interval, "E-SMC resampling interval");
  cmd->add_option("--lambda", o.lambda, "E-SMC temperature");
  cmd->add_option("--strategy", o.strategy, "unmasking strategy");
  cmd->add_option("--backend", o.backend, "oracle | perturbed:<eps> | tcp://host:port | stdio:<command>");
}

void set(json& j, const std::string& key, json value) { mdm::apply_override(j, key + "=" + value.dump()); }

// File, then MDM_LAB_SEED, then positional overrides, then explicit flags.
mdm::ExperimentConfig build_config(const Options& o, bool sweep_flags) {
  json j = mdm::to_json(mdm::ExperimentConfig{});
  if (o.config) {
    if (!fs::exists(*o.config)) throw UsageError("config file not found: " + *o.config);
    j.merge_patch(mdm::read_json_file(*o.config));
  }
  if (!o.seed) {
    if (const char* env = std::getenv("MDM_LAB_SEED")) {
      try {
        set(j, "seed", std::stoull(env));
      } catch (const std::exception&) {
        throw UsageError(std::string("MDM_LAB_SEED is not an unsigned integer: ") + env);
      }
    }
  }
  for (const auto& ov : o.overrides) mdm::apply_override(j, ov);
  if (o.seed) set(j, "seed", *o.seed);
  if (o.jobs) set(j, "jobs", *o.jobs);
  if (o.out) set(j, "output_dir", *o.out);
  if (o.steps) {
    set(j, "S", *o.steps);
    if (sweep_flags) set(j, "sweep.S", json::array({*o.steps}));
  }
  if (o.particles) {
    set(j, "search.particles", *o.particles);
    if (sweep_flags) set(j, "sweep.M", json::array({*o.particles}));
  }
  if (o.resample_interval) {
    set(j, "search.resample_interval", *o.resample_interval);
    if (sweep_flags) set(j, "sweep.delta_ir", json::array({*o.resample_interval}));
  }
  if (o.lambda) set(j, "search.lambda", *o.lambda);
  if (o.strategy) set(j, "strategy.kind", *o.strategy);
  if (o.backend) {
    const std::string& b = *o.backend;
    if (b == "oracle") {
      set(j, "backend.kind", "oracle");
    } else if (b.starts_with("perturbed")) {
      set(j, "backend.kind", "perturbed");
      if (b.size() > 10 && b[9] == ':') set(j, "backend.epsilon", std::stod(b.substr(10)));
    } else if (b.starts_with("tcp://") || b.starts_with("stdio:")) {
      set(j, "backend.kind", "remote");
      set(j, "backend.endpoint", b);
    } else {
      throw UsageError("unknown backend '" + b + "'");
    }
  }
  return mdm::config_from_json(j);
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

int cmd_generate(const Options& o) {
  const auto cfg = build_config(o, false);
  const auto t0 = std::chrono::steady_clock::now();
  const mdm::Bench bench(cfg);
  const fs::path out = fs::path(cfg.output_dir) / "paths.jsonl";
  mdm::JsonlWriter writer(out);
  std::cerr << "generate: " << cfg.replicates << " x " << mdm::to_string(cfg.method) << " (S=" << cfg.steps
            << ", M=" << cfg.search.particles << ") -> " << out.string() << "\n";
  const auto summary = mdm::run_replicates(bench, cfg.method, bench.default_point(),
                                           [&](const mdm::PathRecord& r) { writer.write(r); });
  writer.close();
  json line = {{"command", "generate"}, {"output", out.string()}, {"config_hash", mdm::config_hash(cfg)},
               {"seconds", seconds_since(t0)}};
  line.update(mdm::summary_to_json(summary));
  std::cout << line.dump() << std::endl;
  return kExitOk;
}

int cmd_evaluate(const Options& o) {
  if (!o.input) throw UsageError("evaluate needs --input <paths.jsonl>");
  if (!fs::exists(*o.input)) throw UsageError("input file not found: " + *o.input);
  const auto cfg = build_config(o, false);
  const auto data = mdm::make_data_model(cfg);
  const fs::path out = fs::path(cfg.output_dir) / "evaluated.jsonl";
  mdm::JsonlWriter writer(out);
  mdm::RunSummary s;
  s.method = "evaluate";
  s.point = {cfg.steps, cfg.search.particles, cfg.search.resample_interval};
  s.config_hash = mdm::config_hash(cfg);
  mdm::read_jsonl(*o.input, [&](const mdm::PathRecord& rec) {
    mdm::PathRecord scored = rec;
    mdm::score_record(scored, data);
    writer.write(scored);
    s.rows.push_back({s.rows.size(), scored.path_entropy, *scored.nll_eval, *scored.diversity, 0.0});
  });
  writer.close();
  if (s.rows.empty()) throw UsageError("input file has no records: " + *o.input);
  mdm::finalize_summary(s);
  std::cerr << "evaluate: scored " << s.rows.size() << " records -> " << out.string() << "\n";
  json line = {{"command", "evaluate"}, {"input", *o.input}, {"output", out.string()}};
  line.update(mdm::summary_to_json(s));
  std::cout << line.dump() << std::endl;
  return kExitOk;
}

int cmd_ablate(const Options& o) {
  const auto cfg = build_config(o, true);
  const auto t0 = std::chrono::steady_clock::now();
  std::cerr << "ablate: S x M x delta_ir = " << cfg.sweep.steps.size() << " x " << cfg.sweep.particles.size()
            << " x " << cfg.sweep.delta_ir.size() << ", " << cfg.replicates << " replicates each\n";
  const auto rows = mdm::run_ablation(cfg);
  const auto path = mdm::persist(std::span<const mdm::RunSummary>(rows), cfg.output_dir, "ablation.csv");
  for (const auto& r : rows) std::cerr << "  " << mdm::summary_csv_line(r) << "\n";
  std::cout << json{{"command", "ablate"},
                    {"csv", path.string()},
                    {"rows", rows.size()},
                    {"config_hash", mdm::config_hash(cfg)},
                    {"seconds", seconds_since(t0)}}
                   .dump()
            << std::endl;
  return kExitOk;
}

int cmd_correlate(const Options& o) {
  const auto cfg = build_config(o, true);
  const auto t0 = std::chrono::steady_clock::now();
  const auto study = mdm::run_correlation_study(cfg);
  const auto path = mdm::persist(std::span<const mdm::RunSummary>(study.per_steps), cfg.output_dir, "correlation.csv");
  for (const auto& s : study.per_steps)
    std::cerr << "  S=" << s.point.steps << " mean H_DE " << s.mean_hde << " mean ln_ppl " << s.mean_lnppl << "\n";
  json line = {{"command", "correlate"}, {"csv", path.string()}, {"seconds", seconds_since(t0)}};
  line.update(study.to_json());
  std::cout << line.dump() << std::endl;
  return kExitOk;
}

int cmd_verify(const Options& o) {
  const auto cfg = build_config(o, false);
  std::vector<std::string> scopes;
  if (o.scope == "all") {
    for (auto s : mdm::kInvariantScopes) scopes.emplace_back(s);
  } else {
    if (std::find(std::begin(mdm::kInvariantScopes), std::end(mdm::kInvariantScopes), o.scope) ==
        std::end(mdm::kInvariantScopes))
      throw UsageError("unknown scope '" + o.scope + "'");
    scopes.push_back(o.scope);
  }
  bool ok = true;
  json reports = json::array();
  json brief = json::object();
  for (const auto& scope : scopes) {
    const auto r = mdm::run_invariant_suite(scope, cfg.seed);
    for (const auto& c : r.cases)
      std::cerr << "  [" << c.status << "] " << scope << ": " << c.name << " (slack " << c.slack << ")\n";
    ok = ok && r.passed();
    brief[scope] = r.passed();
    reports.push_back(r.to_json());
  }
  mdm::detail::ensure_directory(cfg.output_dir);
  const fs::path path = fs::path(cfg.output_dir) / "verify.json";
  {
    std::ofstream f(path);
    if (!f) throw mdm::IoError(path.string(), "cannot open for writing");
    f << reports.dump(2) << '\n';
    if (!f) throw mdm::IoError(path.string(), "write failed");
  }
  std::cout << json{{"command", "verify"}, {"passed", ok}, {"scopes", brief}, {"report", path.string()}}.dump()
            << std::endl;
  return ok ? kExitOk : kExitFailed;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Masked-diffusion decoding lab"};
  app.require_subcommand(1);
  Options o;

  auto* generate = app.add_subcommand("generate", "decode paths and write them as JSONL");
  add_common(generate, o);
  add_decoding(generate, o);
  auto* evaluate = app.add_subcommand("evaluate", "score an existing JSONL file");
  add_common(evaluate, o);
  evaluate->add_option("--input", o.input, "JSONL file to score");
  auto* ablate = app.add_subcommand("ablate", "vanilla / E-BoN / E-SMC over the S, M, delta_ir sweep");
  add_common(ablate, o);
  add_decoding(ablate, o);
  auto* correlate = app.add_subcommand("correlate", "H_DE vs ln PPL correlation study");
  add_common(correlate, o);
  add_decoding(correlate, o);
  auto* verify = app.add_subcommand("verify", "run invariant suites");
  add_common(verify, o);
  verify->add_option("--scope", o.scope, "prop1 | prop2 | prop3 | asymptotics | context | temperature | all");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitUsage;
  }

  try {
    if (*generate) return cmd_generate(o);
    if (*evaluate) return cmd_evaluate(o);
    if (*ablate) return cmd_ablate(o);
    if (*correlate) return cmd_correlate(o);
    return cmd_verify(o);
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const mdm::DomainError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const mdm::IoError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitFailed;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitFailed;
  }
}
