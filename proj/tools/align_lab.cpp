// Command-line front end: experiment orchestration, metric persistence, and
// static SVG charts. Exit codes: 0 success, 1 usage/config error, 2 runtime
// failure, 3 method-ordering verdict failure.

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "alignlab/config.hpp"
#include "alignlab/frozen_lake.hpp"
#include "alignlab/gradcheck.hpp"
#include "alignlab/property_checks.hpp"
#include "alignlab/report.hpp"
#include "alignlab/toy_lm.hpp"

namespace {

using namespace alignlab;

constexpr int kExitOk = 0;
constexpr int kExitUsage = 1;
constexpr int kExitRuntime = 2;
constexpr int kExitOrdering = 3;

struct CommonOpts {
  std::string config_path;
  std::vector<std::string> overrides;
  std::string out_dir;
  std::optional<std::uint64_t> seed;   // exactly this one seed
  std::optional<int> seed_count;       // seeds 1..N
  std::string methods;                 // comma-separated subset
};

void add_common(CLI::App* cmd, CommonOpts* opts, bool with_run_flags) {
  cmd->add_option("--config", opts->config_path, "config file (key=value)");
  cmd->add_option("--override", opts->overrides,
                  "config override key=value (repeatable; one argument may "
                  "hold several space-separated pairs)");
  if (with_run_flags) {
    cmd->add_option("--out-dir", opts->out_dir,
                    "output directory (default $ALIGN_LAB_OUT or ./out)");
    cmd->add_option("--seed", opts->seed, "run a single seed");
    cmd->add_option("--seeds", opts->seed_count, "run seeds 1..N");
    cmd->add_option("--methods", opts->methods,
                    "comma-separated methods to run");
  }
}

std::string resolve_out_dir(const CommonOpts& opts) {
  if (!opts.out_dir.empty()) return opts.out_dir;
  if (const char* env = std::getenv("ALIGN_LAB_OUT"); env && *env) return env;
  return "out";
}

std::vector<std::string> split_csv_arg(const std::string& arg) {
  std::vector<std::string> out;
  std::string item;
  std::istringstream in(arg);
  while (std::getline(in, item, ',')) {
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

void apply_run_flags(const CommonOpts& opts, std::vector<std::uint64_t>* seeds,
                     std::vector<std::string>* methods) {
  if (opts.seed && opts.seed_count) {
    throw std::invalid_argument("--seed and --seeds are mutually exclusive");
  }
  if (opts.seed) *seeds = {*opts.seed};
  if (opts.seed_count) {
    if (*opts.seed_count < 1) {
      throw std::invalid_argument("--seeds needs a positive count");
    }
    seeds->clear();
    for (int s = 1; s <= *opts.seed_count; ++s) {
      seeds->push_back(static_cast<std::uint64_t>(s));
    }
  }
  if (!opts.methods.empty()) *methods = split_csv_arg(opts.methods);
}

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open: " + path);
  std::ostringstream buffer;
  buffer << in.rdbuf();
  return buffer.str();
}

std::string table_to_string(const TransitionTable& table) {
  std::ostringstream out;
  table.save(out);
  return out.str();
}

int run_frozenlake(const CommonOpts& opts) {
  LabConfig cfg = load_config(opts.config_path, opts.overrides);
  std::vector<std::uint64_t> seeds = cfg.frozen_lake.seeds;
  std::vector<std::string> methods = cfg.frozen_lake.methods;
  apply_run_flags(opts, &seeds, &methods);

  const GridSpec grid = cfg.frozen_lake.map.empty()
                            ? parse_grid(kDefaultMapText)
                            : parse_grid(read_file(cfg.frozen_lake.map));
  const std::string detour = cfg.frozen_lake.detour.empty()
                                 ? std::string(kDefaultDetourActions)
                                 : cfg.frozen_lake.detour;

  const std::string out_dir = resolve_out_dir(opts);
  std::filesystem::create_directories(out_dir);
  const std::string hash = config_hash(cfg);
  atomic_write(out_dir + "/config.resolved", canonical_config(cfg));

  const ValueIterationResult vi =
      value_iteration(grid, cfg.frozen_lake.discount);
  atomic_write(out_dir + "/oracle_policy.tsv",
               table_to_string(vi.oracle_policy));

  std::vector<CsvRow> rows;
  std::vector<CurveSeries> curves;
  std::ostringstream jsonl;
  for (const std::string& method : methods) {
    for (std::uint64_t seed : seeds) {
      FrozenLakeConfig run;
      run.grid = grid;
      run.detour_letters = detour;
      run.loss = method == "orpo" ? cfg.loss_for_orpo()
                 : method.rfind("dpo", 0) == 0 ? cfg.loss_for_dpo()
                                               : cfg.loss;
      run.epochs = cfg.frozen_lake.epochs;
      run.lr = cfg.frozen_lake.lr;
      run.hidden_dim = cfg.frozen_lake.hidden_dim;
      run.discount = cfg.frozen_lake.discount;
      run.rollouts = cfg.frozen_lake.rollouts;
      run.rollout_cap = cfg.frozen_lake.rollout_cap;
      run.seed = seed;

      const GridTrainResult result = train_grid_policy(method, run);
      rows.push_back({result.method, result.seed, result.mse, result.coverage,
                      result.steps});
      std::printf("frozenlake %-12s seed=%llu mse=%.6f coverage=%g steps=%d "
                  "final_loss=%.6f\n",
                  method.c_str(), static_cast<unsigned long long>(seed),
                  result.mse, result.coverage, result.steps,
                  result.final_loss);

      curves.push_back(
          {method + " seed " + std::to_string(seed), result.loss_curve});
      atomic_write(out_dir + "/policy_" + method + "_seed" +
                       std::to_string(seed) + ".tsv",
                   table_to_string(result.learned_policy));

      Scalar bellman_max = 0.0;
      if (result.final_token_losses.size() > 0) {
        bellman_max = bellman_residual(result.final_token_losses).maxCoeff();
      }
      jsonl << "{\"method\":\"" << method << "\",\"seed\":" << seed
            << ",\"mse\":" << result.mse << ",\"coverage\":"
            << result.coverage << ",\"steps\":" << result.steps
            << ",\"final_loss\":" << result.final_loss
            << ",\"corollary_all_hold\":"
            << (result.corollary_all_hold ? "true" : "false")
            << ",\"bellman_max_residual\":" << bellman_max
            << ",\"config_hash\":\"" << hash << "\"}\n";
    }
  }

  const std::string csv_path =
      atomic_write(out_dir + "/results.csv", format_csv(rows));
  atomic_write(out_dir + "/runs.jsonl", jsonl.str());
  atomic_write(out_dir + "/mse_by_method.svg",
               render_mse_svg(summarize(rows), hash));
  atomic_write(out_dir + "/loss_curves.svg",
               render_curves_svg("training loss per epoch", curves, hash));
  std::printf("wrote %s\n", csv_path.c_str());

  const OrderingVerdict verdict = ordering_verdict(rows);
  std::printf("%s\n", verdict.summary().c_str());
  if (verdict.applicable && !verdict.overall()) return kExitOrdering;
  return kExitOk;
}

int run_toylm(const CommonOpts& opts) {
  LabConfig cfg = load_config(opts.config_path, opts.overrides);
  std::vector<std::uint64_t> seeds = cfg.toy_lm.seeds;
  std::vector<std::string> methods = cfg.toy_lm.methods;
  apply_run_flags(opts, &seeds, &methods);

  const std::string out_dir = resolve_out_dir(opts);
  std::filesystem::create_directories(out_dir);
  const std::string hash = config_hash(cfg);
  atomic_write(out_dir + "/config.resolved", canonical_config(cfg));

  const Corpus corpus = generate_corpus(cfg.toy_lm.corpus);
  atomic_write(out_dir + "/train.tsv", dataset_to_tsv(corpus.train));
  atomic_write(out_dir + "/eval.tsv", dataset_to_tsv(corpus.eval));

  std::vector<ToyLmCsvRow> rows;
  std::vector<CurveSeries> loss_curves;
  std::vector<CurveSeries> match_curves;
  std::ostringstream jsonl;
  for (const std::string& method : methods) {
    for (std::uint64_t seed : seeds) {
      ToyLmConfig run;
      run.loss = cfg.loss;
      run.epochs = cfg.toy_lm.epochs;
      run.batch = cfg.toy_lm.batch;
      run.lr = cfg.toy_lm.lr;
      run.embed_dim = cfg.toy_lm.embed_dim;
      run.hidden_dim = cfg.toy_lm.hidden_dim;
      run.max_positions = cfg.toy_lm.max_positions;
      run.eval_every = cfg.toy_lm.eval_every;
      run.seed = seed;

      int step = 0;
      ReportSink sink = [&](int, const LossReport& report) {
        jsonl << report_to_json(report, step++, hash) << '\n';
      };
      const ToyLmResult result = train_toy_lm(corpus, method, run, sink);
      rows.push_back({result.method, result.seed, result.final_eval.eval_loss,
                      result.final_eval.exact_match, run.epochs});
      std::printf("toylm %-4s seed=%llu eval_loss=%.6f exact_match=%.3f\n",
                  method.c_str(), static_cast<unsigned long long>(seed),
                  result.final_eval.eval_loss, result.final_eval.exact_match);

      loss_curves.push_back(
          {method + " seed " + std::to_string(seed), result.loss_curve});
      CurveSeries match;
      match.label = method + " seed " + std::to_string(seed);
      for (const EvalResult& snap : result.snapshots) {
        match.points.push_back(snap.exact_match);
      }
      match_curves.push_back(std::move(match));
    }
  }

  const std::string csv_path =
      atomic_write(out_dir + "/toylm_results.csv", format_toylm_csv(rows));
  atomic_write(out_dir + "/reports.jsonl", jsonl.str());
  atomic_write(out_dir + "/toylm_loss_curves.svg",
               render_curves_svg("training loss per epoch", loss_curves,
                                 hash));
  atomic_write(out_dir + "/toylm_exact_match.svg",
               render_curves_svg("eval exact match per snapshot",
                                 match_curves, hash));
  std::printf("wrote %s\n", csv_path.c_str());
  return kExitOk;
}

int run_gradcheck(const CommonOpts& opts) {
  const std::uint64_t seed = opts.seed.value_or(2024);
  bool all_passed = true;
  Scalar worst = 0.0;
  for (const GradFixtureResult& fx : run_gradient_fixtures(seed)) {
    std::printf("gradcheck %-32s max_rel=%.3e %s\n", fx.name.c_str(),
                fx.max_relative_error, fx.passed ? "PASS" : "FAIL");
    all_passed = all_passed && fx.passed;
    worst = std::max(worst, fx.max_relative_error);
  }
  if (all_passed) {
    std::printf("all pass <= 1e-4 (worst %.3e)\n", worst);
    return kExitOk;
  }
  std::printf("gradient check FAILED\n");
  return kExitRuntime;
}

int run_losscheck(const CommonOpts& opts) {
  const std::uint64_t seed = opts.seed.value_or(2024);
  bool all_passed = true;
  for (const PropertyResult& pr : run_property_checks(seed)) {
    std::printf("losscheck %-28s %s (%s)\n", pr.name.c_str(),
                pr.passed ? "PASS" : "FAIL", pr.detail.c_str());
    all_passed = all_passed && pr.passed;
  }
  if (!all_passed) {
    std::printf("property suite FAILED\n");
    return kExitRuntime;
  }
  return kExitOk;
}

int run_report(const std::vector<std::string>& inputs) {
  std::vector<CsvRow> rows;
  for (const std::string& path : inputs) {
    const std::vector<CsvRow> parsed = parse_csv(read_file(path));
    rows.insert(rows.end(), parsed.begin(), parsed.end());
  }
  std::printf("%-12s %5s %12s %10s %6s\n", "method", "runs", "median_mse",
              "coverage", "steps");
  for (const MethodSummary& s : summarize(rows)) {
    std::printf("%-12s %5d %12.6f %10.2f %6.1f\n", s.method.c_str(), s.runs,
                s.median_mse, s.median_coverage, s.median_steps);
  }
  const OrderingVerdict verdict = ordering_verdict(rows);
  std::printf("%s\n", verdict.summary().c_str());
  if (verdict.applicable && !verdict.overall()) return kExitOrdering;
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"token-level alignment objectives lab"};
  app.require_subcommand(1);

  CommonOpts fl_opts, tl_opts, gc_opts, lc_opts;
  CLI::App* frozenlake = app.add_subcommand(
      "frozenlake", "train grid policies and score them against the oracle");
  add_common(frozenlake, &fl_opts, true);

  CLI::App* toylm = app.add_subcommand(
      "toylm", "train sequence models on the synthetic corpus");
  add_common(toylm, &tl_opts, true);

  CLI::App* gradcheck = app.add_subcommand(
      "gradcheck", "finite-difference validation of every objective");
  gradcheck->add_option("--seed", gc_opts.seed, "fixture seed");

  CLI::App* losscheck = app.add_subcommand(
      "losscheck", "identity and monotonicity property suites");
  losscheck->add_option("--seed", lc_opts.seed, "fixture seed");

  std::vector<std::string> report_inputs;
  CLI::App* report = app.add_subcommand(
      "report", "merge result CSVs into a summary table with a verdict");
  report->add_option("csv", report_inputs, "results.csv files to merge")
      ->required()
      ->expected(-1);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (frozenlake->parsed()) return run_frozenlake(fl_opts);
    if (toylm->parsed()) return run_toylm(tl_opts);
    if (gradcheck->parsed()) return run_gradcheck(gc_opts);
    if (losscheck->parsed()) return run_losscheck(lc_opts);
    if (report->parsed()) return run_report(report_inputs);
  } catch (const std::invalid_argument& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitUsage;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitRuntime;
  }
  return kExitUsage;
}
