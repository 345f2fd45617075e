#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "alignlab/losses.hpp"
#include "alignlab/types.hpp"

// Result persistence: CSV tables, summary statistics, the method-ordering
// verdict, static SVG charts, and JSONL loss logs. Files are written via
// atomic_write, which never overwrites an existing file.

namespace alignlab {

struct CsvRow {
  std::string method;
  std::uint64_t seed = 0;
  Scalar mse = 0.0;
  Scalar coverage = 0.0;
  int steps = 0;
};

/// Header is exactly `method,seed,mse,coverage,steps`; reals print with 17
/// significant digits so equal runs produce byte-equal files.
std::string format_csv(const std::vector<CsvRow>& rows);
std::vector<CsvRow> parse_csv(const std::string& text);

struct ToyLmCsvRow {
  std::string method;
  std::uint64_t seed = 0;
  Scalar eval_loss = 0.0;
  Scalar exact_match = 0.0;
  int epochs = 0;
};

/// Header: `method,seed,eval_loss,exact_match,epochs`.
std::string format_toylm_csv(const std::vector<ToyLmCsvRow>& rows);

/// Writes `content` to `path` via a temp file + rename. If `path` already
/// exists the data goes to the first free `name-N.ext` variant instead.
/// Returns the path actually written.
std::string atomic_write(const std::string& path, const std::string& content);

Scalar median(std::vector<Scalar> values);  // by value: sorts its copy

struct MethodSummary {
  std::string method;
  int runs = 0;
  Scalar median_mse = 0.0;
  Scalar median_coverage = 0.0;
  Scalar median_steps = 0.0;
};

/// One summary per method, in first-appearance order.
std::vector<MethodSummary> summarize(const std::vector<CsvRow>& rows);

/// The cross-method claim under test: over seeds, median mse must order as
/// ift < sft, ift < orpo, and dpo <= 1.25 * ift. Applicable only when all
/// four methods are present (dpo_offline preferred over dpo_online).
struct OrderingVerdict {
  bool applicable = false;
  bool ift_below_sft = false;
  bool ift_below_orpo = false;
  bool dpo_within_margin = false;
  std::string dpo_method;
  Scalar median_sft = 0.0;
  Scalar median_ift = 0.0;
  Scalar median_orpo = 0.0;
  Scalar median_dpo = 0.0;

  bool overall() const {
    return applicable && ift_below_sft && ift_below_orpo && dpo_within_margin;
  }
  std::string summary() const;  // one human-readable verdict line
};

OrderingVerdict ordering_verdict(const std::vector<CsvRow>& rows);

/// Bar chart of median mse per method. `config_hash` is embedded as an XML
/// comment so every artifact names the configuration that produced it.
std::string render_mse_svg(const std::vector<MethodSummary>& summaries,
                           const std::string& config_hash);

struct CurveSeries {
  std::string label;
  std::vector<Scalar> points;
};

/// Line chart, one polyline per series, x = index.
std::string render_curves_svg(const std::string& title,
                              const std::vector<CurveSeries>& series,
                              const std::string& config_hash);

/// One JSONL line for a loss evaluation (detached values only).
std::string report_to_json(const LossReport& report, int step,
                           const std::string& config_hash);

}  // namespace alignlab
