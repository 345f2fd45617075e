#include "alignlab/report.hpp"

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

namespace alignlab {

namespace {

std::string real17(Scalar x) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", x);
  return buf;
}

constexpr const char* kGridHeader = "method,seed,mse,coverage,steps";

std::vector<std::string> split_fields(const std::string& line) {
  std::vector<std::string> fields;
  std::string field;
  std::istringstream in(line);
  while (std::getline(in, field, ',')) fields.push_back(field);
  return fields;
}

}  // namespace

std::string format_csv(const std::vector<CsvRow>& rows) {
  std::string out = kGridHeader;
  out += '\n';
  for (const CsvRow& row : rows) {
    out += row.method + ',' + std::to_string(row.seed) + ',' +
           real17(row.mse) + ',' + real17(row.coverage) + ',' +
           std::to_string(row.steps) + '\n';
  }
  return out;
}

std::vector<CsvRow> parse_csv(const std::string& text) {
  std::istringstream lines(text);
  std::string line;
  if (!std::getline(lines, line) || line != kGridHeader) {
    throw std::invalid_argument("unexpected csv header: " + line);
  }
  std::vector<CsvRow> rows;
  while (std::getline(lines, line)) {
    if (line.empty()) continue;
    const std::vector<std::string> f = split_fields(line);
    if (f.size() != 5) {
      throw std::invalid_argument("malformed csv row: " + line);
    }
    CsvRow row;
    row.method = f[0];
    row.seed = std::stoull(f[1]);
    row.mse = std::stod(f[2]);
    row.coverage = std::stod(f[3]);
    row.steps = std::stoi(f[4]);
    rows.push_back(std::move(row));
  }
  return rows;
}

std::string format_toylm_csv(const std::vector<ToyLmCsvRow>& rows) {
  std::string out = "method,seed,eval_loss,exact_match,epochs\n";
  for (const ToyLmCsvRow& row : rows) {
    out += row.method + ',' + std::to_string(row.seed) + ',' +
           real17(row.eval_loss) + ',' + real17(row.exact_match) + ',' +
           std::to_string(row.epochs) + '\n';
  }
  return out;
}

std::string atomic_write(const std::string& path, const std::string& content) {
  namespace fs = std::filesystem;
  fs::path target(path);
  if (fs::exists(target)) {
    const fs::path dir = target.parent_path();
    const std::string stem = target.stem().string();
    const std::string ext = target.extension().string();
    for (int n = 1;; ++n) {
      fs::path candidate = dir / (stem + "-" + std::to_string(n) + ext);
      if (!fs::exists(candidate)) {
        target = candidate;
        break;
      }
    }
  }
  fs::path tmp = target;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) {
      throw std::runtime_error("cannot write: " + tmp.string());
    }
    out << content;
    if (!out.flush()) {
      throw std::runtime_error("write failed: " + tmp.string());
    }
  }
  fs::rename(tmp, target);
  return target.string();
}

Scalar median(std::vector<Scalar> values) {
  if (values.empty()) throw std::invalid_argument("median of nothing");
  std::sort(values.begin(), values.end());
  const std::size_t n = values.size();
  if (n % 2 == 1) return values[n / 2];
  return 0.5 * (values[n / 2 - 1] + values[n / 2]);
}

std::vector<MethodSummary> summarize(const std::vector<CsvRow>& rows) {
  std::vector<std::string> order;
  for (const CsvRow& row : rows) {
    if (std::find(order.begin(), order.end(), row.method) == order.end()) {
      order.push_back(row.method);
    }
  }
  std::vector<MethodSummary> out;
  for (const std::string& method : order) {
    MethodSummary s;
    s.method = method;
    std::vector<Scalar> mse, coverage, steps;
    for (const CsvRow& row : rows) {
      if (row.method != method) continue;
      mse.push_back(row.mse);
      coverage.push_back(row.coverage);
      steps.push_back(static_cast<Scalar>(row.steps));
    }
    s.runs = static_cast<int>(mse.size());
    s.median_mse = median(mse);
    s.median_coverage = median(coverage);
    s.median_steps = median(steps);
    out.push_back(std::move(s));
  }
  return out;
}

OrderingVerdict ordering_verdict(const std::vector<CsvRow>& rows) {
  OrderingVerdict v;
  const std::vector<MethodSummary> summaries = summarize(rows);
  auto find = [&](const std::string& method) -> const MethodSummary* {
    for (const MethodSummary& s : summaries) {
      if (s.method == method) return &s;
    }
    return nullptr;
  };
  const MethodSummary* sft = find("sft");
  const MethodSummary* ift = find("ift");
  const MethodSummary* orpo = find("orpo");
  const MethodSummary* dpo = find("dpo_offline");
  v.dpo_method = "dpo_offline";
  if (!dpo) {
    dpo = find("dpo_online");
    v.dpo_method = "dpo_online";
  }
  if (!sft || !ift || !orpo || !dpo) return v;
  v.applicable = true;
  v.median_sft = sft->median_mse;
  v.median_ift = ift->median_mse;
  v.median_orpo = orpo->median_mse;
  v.median_dpo = dpo->median_mse;
  v.ift_below_sft = v.median_ift < v.median_sft;
  v.ift_below_orpo = v.median_ift < v.median_orpo;
  v.dpo_within_margin = v.median_dpo <= 1.25 * v.median_ift;
  return v;
}

std::string OrderingVerdict::summary() const {
  if (!applicable) {
    return "verdict: not applicable (needs sft, ift, orpo and a dpo method)";
  }
  std::ostringstream out;
  out << "verdict: ift<sft " << (ift_below_sft ? "PASS" : "FAIL") << " ("
      << real17(median_ift) << " vs " << real17(median_sft) << "), ift<orpo "
      << (ift_below_orpo ? "PASS" : "FAIL") << " (" << real17(median_ift)
      << " vs " << real17(median_orpo) << "), " << dpo_method
      << "<=1.25*ift " << (dpo_within_margin ? "PASS" : "FAIL") << " ("
      << real17(median_dpo) << " vs " << real17(1.25 * median_ift)
      << ") => " << (overall() ? "PASS" : "FAIL");
  return out.str();
}

namespace {

const char* kPalette[] = {"#4878d0", "#ee854a", "#6acc64", "#d65f5f",
                          "#956cb4", "#8c613c", "#dc7ec0", "#797979"};
constexpr int kPaletteSize = 8;

std::string svg_open(int width, int height, const std::string& config_hash) {
  std::ostringstream out;
  out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width
      << "\" height=\"" << height << "\" viewBox=\"0 0 " << width << " "
      << height << "\">\n<!-- config_hash: " << config_hash << " -->\n"
      << "<rect width=\"" << width << "\" height=\"" << height
      << "\" fill=\"white\"/>\n";
  return out.str();
}

std::string fmt3(Scalar x) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.3g", x);
  return buf;
}

}  // namespace

std::string render_mse_svg(const std::vector<MethodSummary>& summaries,
                           const std::string& config_hash) {
  const int width = 560, height = 360;
  const int left = 60, bottom = 50, top = 40;
  std::ostringstream out;
  out << svg_open(width, height, config_hash);
  out << "<text x=\"" << width / 2 << "\" y=\"24\" text-anchor=\"middle\" "
         "font-family=\"monospace\" font-size=\"15\">median policy mse by "
         "method</text>\n";
  Scalar max_mse = 0.0;
  for (const MethodSummary& s : summaries) {
    max_mse = std::max(max_mse, s.median_mse);
  }
  if (max_mse <= 0.0) max_mse = 1.0;
  const int plot_w = width - left - 20;
  const int plot_h = height - top - bottom;
  const int n = static_cast<int>(summaries.size());
  const Scalar slot = n > 0 ? static_cast<Scalar>(plot_w) / n : plot_w;
  for (int i = 0; i < n; ++i) {
    const MethodSummary& s = summaries[static_cast<std::size_t>(i)];
    const Scalar h = plot_h * (s.median_mse / (1.1 * max_mse));
    const Scalar x = left + slot * i + slot * 0.15;
    const Scalar y = top + plot_h - h;
    out << "<rect x=\"" << x << "\" y=\"" << y << "\" width=\"" << slot * 0.7
        << "\" height=\"" << h << "\" fill=\"" << kPalette[i % kPaletteSize]
        << "\"/>\n";
    out << "<text x=\"" << x + slot * 0.35 << "\" y=\"" << y - 6
        << "\" text-anchor=\"middle\" font-family=\"monospace\" "
           "font-size=\"12\">" << fmt3(s.median_mse) << "</text>\n";
    out << "<text x=\"" << x + slot * 0.35 << "\" y=\"" << top + plot_h + 18
        << "\" text-anchor=\"middle\" font-family=\"monospace\" "
           "font-size=\"12\">" << s.method << "</text>\n";
  }
  out << "<line x1=\"" << left << "\" y1=\"" << top + plot_h << "\" x2=\""
      << left + plot_w << "\" y2=\"" << top + plot_h
      << "\" stroke=\"black\"/>\n";
  out << "<line x1=\"" << left << "\" y1=\"" << top << "\" x2=\"" << left
      << "\" y2=\"" << top + plot_h << "\" stroke=\"black\"/>\n";
  out << "<text x=\"" << left - 8 << "\" y=\"" << top + 4
      << "\" text-anchor=\"end\" font-family=\"monospace\" "
         "font-size=\"11\">" << fmt3(1.1 * max_mse) << "</text>\n";
  out << "<text x=\"" << left - 8 << "\" y=\"" << top + plot_h + 4
      << "\" text-anchor=\"end\" font-family=\"monospace\" "
         "font-size=\"11\">0</text>\n";
  out << "</svg>\n";
  return out.str();
}

std::string render_curves_svg(const std::string& title,
                              const std::vector<CurveSeries>& series,
                              const std::string& config_hash) {
  const int width = 640, height = 400;
  const int left = 60, bottom = 40, top = 40, right = 150;
  std::ostringstream out;
  out << svg_open(width, height, config_hash);
  out << "<text x=\"" << (width - right) / 2 + left / 2
      << "\" y=\"24\" text-anchor=\"middle\" font-family=\"monospace\" "
         "font-size=\"15\">" << title << "</text>\n";
  Scalar lo = 0.0, hi = 1e-12;
  std::size_t longest = 2;
  for (const CurveSeries& s : series) {
    longest = std::max(longest, s.points.size());
    for (Scalar v : s.points) {
      hi = std::max(hi, v);
      lo = std::min(lo, v);
    }
  }
  const int plot_w = width - left - right;
  const int plot_h = height - top - bottom;
  const Scalar span = hi - lo > 0 ? hi - lo : 1.0;
  for (std::size_t i = 0; i < series.size(); ++i) {
    const CurveSeries& s = series[i];
    if (s.points.size() < 2) continue;
    out << "<polyline fill=\"none\" stroke=\""
        << kPalette[i % kPaletteSize] << "\" stroke-width=\"1.5\" points=\"";
    for (std::size_t j = 0; j < s.points.size(); ++j) {
      const Scalar x =
          left + plot_w * static_cast<Scalar>(j) /
                     static_cast<Scalar>(longest - 1);
      const Scalar y = top + plot_h * (1.0 - (s.points[j] - lo) / span);
      out << x << "," << y << " ";
    }
    out << "\"/>\n";
    out << "<text x=\"" << width - right + 10 << "\" y=\""
        << top + 16 * (i + 1) << "\" font-family=\"monospace\" "
           "font-size=\"11\" fill=\"" << kPalette[i % kPaletteSize] << "\">"
        << s.label << "</text>\n";
  }
  out << "<line x1=\"" << left << "\" y1=\"" << top + plot_h << "\" x2=\""
      << left + plot_w << "\" y2=\"" << top + plot_h
      << "\" stroke=\"black\"/>\n";
  out << "<line x1=\"" << left << "\" y1=\"" << top << "\" x2=\"" << left
      << "\" y2=\"" << top + plot_h << "\" stroke=\"black\"/>\n";
  out << "<text x=\"" << left - 8 << "\" y=\"" << top + 4
      << "\" text-anchor=\"end\" font-family=\"monospace\" "
         "font-size=\"11\">" << fmt3(hi) << "</text>\n";
  out << "<text x=\"" << left - 8 << "\" y=\"" << top + plot_h + 4
      << "\" text-anchor=\"end\" font-family=\"monospace\" "
         "font-size=\"11\">" << fmt3(lo) << "</text>\n";
  out << "</svg>\n";
  return out.str();
}

std::string report_to_json(const LossReport& report, int step,
                           const std::string& config_hash) {
  nlohmann::json j;
  j["step"] = step;
  j["method"] = report.method;
  j["total"] = report.total_value();
  std::vector<Scalar> losses(report.token_losses.data(),
                             report.token_losses.data() +
                                 report.token_losses.size());
  j["token_losses"] = losses;
  std::vector<Scalar> weights(report.weights.data(),
                              report.weights.data() + report.weights.size());
  j["weights"] = weights;
  j["config_hash"] = config_hash;
  return j.dump();
}

}  // namespace alignlab
