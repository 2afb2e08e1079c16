#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <sstream>

#include "dosediff/metrics.hpp"

namespace dosediff::metrics {

namespace {

constexpr const char* kReportHeader =
    "case_id,d98_pred,d98_gt,d98_delta,d2_pred,d2_gt,d2_delta,"
    "dmax_pred,dmax_gt,dmax_delta,dmean_pred,dmean_gt,dmean_delta,"
    "hi_pred,hi_gt,hi_delta,hf_pred,hf_gt";

std::string fmt9(float v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.9g", static_cast<double>(v));
  return buf;
}

Aggregate aggregate_of(const std::vector<CaseRow>& rows, float CaseRow::* field) {
  double acc = 0.0;
  std::size_t n = 0;
  for (const CaseRow& r : rows) {
    const float v = r.*field;
    if (std::isfinite(v)) {
      acc += v;
      ++n;
    }
  }
  Aggregate a;
  if (n == 0) return a;
  const double mean = acc / static_cast<double>(n);
  a.mean = static_cast<float>(mean);
  if (n >= 2) {
    double ss = 0.0;
    for (const CaseRow& r : rows) {
      const float v = r.*field;
      if (std::isfinite(v)) {
        const double d = v - mean;
        ss += d * d;
      }
    }
    a.sd = static_cast<float>(std::sqrt(ss / static_cast<double>(n - 1)));
  }
  return a;
}

float opt_to_float(const std::optional<double>& v) {
  return v ? static_cast<float>(*v) : std::numeric_limits<float>::quiet_NaN();
}

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> fields;
  std::string cur;
  for (char c : line) {
    if (c == ',') {
      fields.push_back(cur);
      cur.clear();
    } else if (c != '\r') {
      cur.push_back(c);
    }
  }
  fields.push_back(cur);
  return fields;
}

float parse_field(const std::string& s) {
  if (s.empty()) return std::numeric_limits<float>::quiet_NaN();
  return std::strtof(s.c_str(), nullptr);
}

}  // namespace

DoseReport evaluate(std::span<const EvalCase> cases, int dvh_bins) {
  DD_CHECK(!cases.empty(), "evaluate: no cases");
  DoseReport report;
  for (const EvalCase& c : cases) {
    DD_CHECK(c.pred.defined() && c.gt.defined() && c.ptv.defined(),
             "evaluate: case " + c.id + " has undefined tensors");
    DD_CHECK(c.pred.shape() == c.gt.shape(),
             "evaluate: prediction/ground-truth shape mismatch for case " + c.id);
    DD_CHECK(c.oars.size() == c.oar_names.size(),
             "evaluate: OAR mask and name lists misaligned for case " + c.id);

    const SummaryMetrics mp = summary_metrics(c.pred, c.ptv);
    const SummaryMetrics mg = summary_metrics(c.gt, c.ptv);

    CaseRow row;
    row.id = c.id;
    row.d98_pred = static_cast<float>(mp.d98);
    row.d98_gt = static_cast<float>(mg.d98);
    row.d98_delta = std::abs(row.d98_pred - row.d98_gt);
    row.d2_pred = static_cast<float>(mp.d2);
    row.d2_gt = static_cast<float>(mg.d2);
    row.d2_delta = std::abs(row.d2_pred - row.d2_gt);
    row.dmax_pred = static_cast<float>(mp.dmax);
    row.dmax_gt = static_cast<float>(mg.dmax);
    row.dmax_delta = std::abs(row.dmax_pred - row.dmax_gt);
    row.dmean_pred = static_cast<float>(mp.dmean);
    row.dmean_gt = static_cast<float>(mg.dmean);
    row.dmean_delta = std::abs(row.dmean_pred - row.dmean_gt);
    row.hi_pred = opt_to_float(mp.hi);
    row.hi_gt = opt_to_float(mg.hi);
    row.hi_delta = std::abs(row.hi_pred - row.hi_gt);
    row.hf_pred = static_cast<float>(hf_energy_ratio(c.pred));
    row.hf_gt = static_cast<float>(hf_energy_ratio(c.gt));
    report.rows.push_back(std::move(row));

    report.dvh_pred.push_back(dvh(c.pred, c.ptv, dvh_bins, c.id + "/ptv"));
    report.dvh_gt.push_back(dvh(c.gt, c.ptv, dvh_bins, c.id + "/ptv"));
    for (std::size_t i = 0; i < c.oars.size(); ++i) {
      report.dvh_pred.push_back(dvh(c.pred, c.oars[i], dvh_bins, c.id + "/" + c.oar_names[i]));
      report.dvh_gt.push_back(dvh(c.gt, c.oars[i], dvh_bins, c.id + "/" + c.oar_names[i]));
    }
  }

  report.d98 = aggregate_of(report.rows, &CaseRow::d98_delta);
  report.d2 = aggregate_of(report.rows, &CaseRow::d2_delta);
  report.dmax = aggregate_of(report.rows, &CaseRow::dmax_delta);
  report.dmean = aggregate_of(report.rows, &CaseRow::dmean_delta);
  report.hi = aggregate_of(report.rows, &CaseRow::hi_delta);
  report.hf_pred = aggregate_of(report.rows, &CaseRow::hf_pred);
  report.hf_gt = aggregate_of(report.rows, &CaseRow::hf_gt);
  return report;
}

void write_report_csv(const std::string& path, const DoseReport& report) {
  std::ofstream out(path, std::ios::binary);
  DD_CHECK(out.good(), "write_report_csv: cannot open " + path);
  out << kReportHeader << "\n";
  for (const CaseRow& r : report.rows) {
    out << r.id << ',' << fmt9(r.d98_pred) << ',' << fmt9(r.d98_gt) << ',' << fmt9(r.d98_delta)
        << ',' << fmt9(r.d2_pred) << ',' << fmt9(r.d2_gt) << ',' << fmt9(r.d2_delta) << ','
        << fmt9(r.dmax_pred) << ',' << fmt9(r.dmax_gt) << ',' << fmt9(r.dmax_delta) << ','
        << fmt9(r.dmean_pred) << ',' << fmt9(r.dmean_gt) << ',' << fmt9(r.dmean_delta) << ','
        << fmt9(r.hi_pred) << ',' << fmt9(r.hi_gt) << ',' << fmt9(r.hi_delta) << ','
        << fmt9(r.hf_pred) << ',' << fmt9(r.hf_gt) << "\n";
  }
  auto agg_row = [&](const char* name, float Aggregate::* field) {
    out << name << ",,," << fmt9(report.d98.*field) << ",,," << fmt9(report.d2.*field) << ",,,"
        << fmt9(report.dmax.*field) << ",,," << fmt9(report.dmean.*field) << ",,,"
        << fmt9(report.hi.*field) << ',' << fmt9(report.hf_pred.*field) << ','
        << fmt9(report.hf_gt.*field) << "\n";
  };
  agg_row("mean", &Aggregate::mean);
  agg_row("sd", &Aggregate::sd);
}

DoseReport read_report_csv(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  DD_CHECK(in.good(), "read_report_csv: cannot open " + path);
  std::string line;
  DD_CHECK(static_cast<bool>(std::getline(in, line)), "read_report_csv: empty file");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  DD_CHECK(line == kReportHeader, "read_report_csv: unexpected header in " + path);

  DoseReport report;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const std::vector<std::string> f = split_csv_line(line);
    DD_CHECK(f.size() == 18, "read_report_csv: malformed row in " + path);
    if (f[0] == "mean" || f[0] == "sd") {
      const bool is_mean = f[0] == "mean";
      auto set = [&](Aggregate& a, float v) { (is_mean ? a.mean : a.sd) = v; };
      set(report.d98, parse_field(f[3]));
      set(report.d2, parse_field(f[6]));
      set(report.dmax, parse_field(f[9]));
      set(report.dmean, parse_field(f[12]));
      set(report.hi, parse_field(f[15]));
      set(report.hf_pred, parse_field(f[16]));
      set(report.hf_gt, parse_field(f[17]));
      continue;
    }
    CaseRow r;
    r.id = f[0];
    r.d98_pred = parse_field(f[1]);
    r.d98_gt = parse_field(f[2]);
    r.d98_delta = parse_field(f[3]);
    r.d2_pred = parse_field(f[4]);
    r.d2_gt = parse_field(f[5]);
    r.d2_delta = parse_field(f[6]);
    r.dmax_pred = parse_field(f[7]);
    r.dmax_gt = parse_field(f[8]);
    r.dmax_delta = parse_field(f[9]);
    r.dmean_pred = parse_field(f[10]);
    r.dmean_gt = parse_field(f[11]);
    r.dmean_delta = parse_field(f[12]);
    r.hi_pred = parse_field(f[13]);
    r.hi_gt = parse_field(f[14]);
    r.hi_delta = parse_field(f[15]);
    r.hf_pred = parse_field(f[16]);
    r.hf_gt = parse_field(f[17]);
    report.rows.push_back(std::move(r));
  }
  return report;
}

std::vector<MetricComparison> compare_reports(const DoseReport& a, const DoseReport& b) {
  DD_CHECK(a.rows.size() == b.rows.size(), "compare_reports: case counts differ");
  DD_CHECK(a.rows.size() >= 2, "compare_reports: need at least 2 cases");
  for (std::size_t i = 0; i < a.rows.size(); ++i) {
    DD_CHECK(a.rows[i].id == b.rows[i].id, "compare_reports: case ids misaligned");
  }
  const std::vector<std::pair<std::string, float CaseRow::*>> metrics = {
      {"d98_delta", &CaseRow::d98_delta},   {"d2_delta", &CaseRow::d2_delta},
      {"dmax_delta", &CaseRow::dmax_delta}, {"dmean_delta", &CaseRow::dmean_delta},
      {"hi_delta", &CaseRow::hi_delta},
  };
  std::vector<MetricComparison> out;
  for (const auto& [name, field] : metrics) {
    std::vector<double> va, vb;
    for (std::size_t i = 0; i < a.rows.size(); ++i) {
      const float x = a.rows[i].*field;
      const float y = b.rows[i].*field;
      if (std::isfinite(x) && std::isfinite(y)) {
        va.push_back(x);
        vb.push_back(y);
      }
    }
    if (va.size() >= 2) {
      out.push_back({name, paired_t_test(va, vb)});
    }
  }
  return out;
}

void write_comparison_csv(const std::string& path,
                          std::span<const MetricComparison> comparisons) {
  std::ofstream out(path, std::ios::binary);
  DD_CHECK(out.good(), "write_comparison_csv: cannot open " + path);
  out << "metric,t,p,degenerate\n";
  for (const MetricComparison& c : comparisons) {
    out << c.metric << ',' << fmt9(static_cast<float>(c.test.t)) << ','
        << fmt9(static_cast<float>(c.test.p)) << ',' << (c.test.degenerate ? 1 : 0) << "\n";
  }
}

void write_dvh_csv(const std::string& path, std::span<const DvhCurve> curves) {
  DD_CHECK(!curves.empty(), "write_dvh_csv: no curves");
  std::ofstream out(path, std::ios::binary);
  DD_CHECK(out.good(), "write_dvh_csv: cannot open " + path);
  out << "dose_level";
  for (const DvhCurve& c : curves) out << ',' << c.structure;
  out << "\n";
  const std::size_t n = curves[0].dose_grid.size();
  for (const DvhCurve& c : curves) {
    DD_CHECK(c.dose_grid.size() == n, "write_dvh_csv: curves have mismatched grids");
  }
  for (std::size_t i = 0; i < n; ++i) {
    out << fmt9(static_cast<float>(curves[0].dose_grid[i]));
    for (const DvhCurve& c : curves) {
      out << ',' << fmt9(static_cast<float>(c.volume_fraction[i]));
    }
    out << "\n";
  }
}

void write_dvh_svg(const std::string& path, std::span<const DvhCurve> curves,
                   const std::string& title) {
  DD_CHECK(!curves.empty(), "write_dvh_svg: no curves");
  const int width = 720, height = 480;
  const int ml = 60, mr = 170, mt = 40, mb = 50;
  const double pw = width - ml - mr, ph = height - mt - mb;

  double max_dose = 0.0;
  for (const DvhCurve& c : curves) {
    for (double d : c.dose_grid) max_dose = std::max(max_dose, d);
  }
  if (max_dose <= 0.0) max_dose = 1.0;

  static const char* kColors[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd",
                                  "#ff7f0e", "#8c564b", "#17becf", "#7f7f7f"};
  const std::size_t n_colors = sizeof(kColors) / sizeof(kColors[0]);

  std::ofstream out(path, std::ios::binary);
  DD_CHECK(out.good(), "write_dvh_svg: cannot open " + path);
  out << "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n"
      << "<svg xmlns=\"http://www.w3.org/2000/svg\" version=\"1.1\" width=\"" << width
      << "\" height=\"" << height << "\">\n"
      << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
      << "<text x=\"" << ml << "\" y=\"24\" font-family=\"sans-serif\" font-size=\"16\">"
      << title << "</text>\n";

  // Axes with simple ticks.
  out << "<line x1=\"" << ml << "\" y1=\"" << mt + ph << "\" x2=\"" << ml + pw << "\" y2=\""
      << mt + ph << "\" stroke=\"black\"/>\n"
      << "<line x1=\"" << ml << "\" y1=\"" << mt << "\" x2=\"" << ml << "\" y2=\"" << mt + ph
      << "\" stroke=\"black\"/>\n";
  for (int i = 0; i <= 5; ++i) {
    const double fx = ml + pw * i / 5.0;
    const double fy = mt + ph - ph * i / 5.0;
    char label[32];
    std::snprintf(label, sizeof(label), "%.2f", max_dose * i / 5.0);
    out << "<text x=\"" << fx - 10 << "\" y=\"" << mt + ph + 18
        << "\" font-family=\"sans-serif\" font-size=\"11\">" << label << "</text>\n";
    std::snprintf(label, sizeof(label), "%.1f", i / 5.0);
    out << "<text x=\"" << ml - 30 << "\" y=\"" << fy + 4
        << "\" font-family=\"sans-serif\" font-size=\"11\">" << label << "</text>\n";
  }
  out << "<text x=\"" << ml + pw / 2 - 30 << "\" y=\"" << height - 12
      << "\" font-family=\"sans-serif\" font-size=\"12\">dose level</text>\n"
      << "<text x=\"14\" y=\"" << mt + ph / 2
      << "\" font-family=\"sans-serif\" font-size=\"12\" transform=\"rotate(-90 14,"
      << mt + ph / 2 << ")\">volume fraction</text>\n";

  for (std::size_t ci = 0; ci < curves.size(); ++ci) {
    const DvhCurve& c = curves[ci];
    out << "<polyline fill=\"none\" stroke=\"" << kColors[ci % n_colors]
        << "\" stroke-width=\"1.5\" points=\"";
    for (std::size_t i = 0; i < c.dose_grid.size(); ++i) {
      const double x = ml + pw * (c.dose_grid[i] / max_dose);
      const double y = mt + ph - ph * c.volume_fraction[i];
      char pt[48];
      std::snprintf(pt, sizeof(pt), "%.2f,%.2f ", x, y);
      out << pt;
    }
    out << "\"/>\n";
    const double ly = mt + 16.0 * static_cast<double>(ci);
    out << "<line x1=\"" << ml + pw + 10 << "\" y1=\"" << ly << "\" x2=\"" << ml + pw + 30
        << "\" y2=\"" << ly << "\" stroke=\"" << kColors[ci % n_colors]
        << "\" stroke-width=\"2\"/>\n"
        << "<text x=\"" << ml + pw + 36 << "\" y=\"" << ly + 4
        << "\" font-family=\"sans-serif\" font-size=\"11\">" << c.structure << "</text>\n";
  }
  out << "</svg>\n";
}

}  // namespace dosediff::metrics
