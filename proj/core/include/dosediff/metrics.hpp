#pragma once

#include <optional>
#include <span>
#include <string>
#include <vector>

#include "dosediff/tensor.hpp"

namespace dosediff::metrics {

// D_m: the largest dose level d such that at least m% of masked voxels
// receive >= d. Computed by sorting masked doses descending and indexing at
// ceil(m/100 * n) - 1.
double dose_at_volume(const Tensor& dose, const Tensor& mask, double m_percent);

enum class HiDivisor { D50, Prescription };

struct SummaryMetrics {
  double d98 = 0.0;
  double d2 = 0.0;
  double dmax = 0.0;
  double dmean = 0.0;
  std::optional<double> hi;  // (D2 - D98)/divisor; missing when divisor is 0
};

// D98/D2 via dose_at_volume, Dmax/Dmean over the PTV mask, HI = (D2-D98)/D50
// (divisor configurable to the prescription dose).
SummaryMetrics summary_metrics(const Tensor& dose, const Tensor& ptv_mask,
                               HiDivisor divisor = HiDivisor::D50,
                               double prescription_dose = 1.0);

struct DvhCurve {
  std::string structure;
  std::vector<double> dose_grid;        // ascending, from 0 to the global max
  std::vector<double> volume_fraction;  // non-increasing, starts at 1
};

DvhCurve dvh(const Tensor& dose, const Tensor& mask, int n_bins,
             std::string structure_name = "");

struct TTestResult {
  double t = 0.0;
  double p = 1.0;
  bool degenerate = false;  // all differences identical
};

// Two-tailed paired t-test; p from the t distribution with n-1 degrees of
// freedom via the regularized incomplete beta function.
TTestResult paired_t_test(std::span<const double> a, std::span<const double> b);

// Continued-fraction (modified Lentz) evaluation of I_x(a, b).
double regularized_incomplete_beta(double x, double a, double b);

// Fraction of non-DC spectral energy outside the central quarter-band of
// frequencies (|f| <= H/8 per axis counts as central). Constant images map
// to 0.
double hf_energy_ratio(const Tensor& dose);

// Separable Gaussian blur with replicated borders (radius = ceil(3*sigma)).
Tensor gaussian_blur(const Tensor& img, double sigma);

struct EvalCase {
  std::string id;
  Tensor pred;
  Tensor gt;
  Tensor ptv;
  std::vector<Tensor> oars;
  std::vector<std::string> oar_names;
};

// Per-case rows keep float precision so the 9-significant-digit CSV format
// round-trips them losslessly.
struct CaseRow {
  std::string id;
  float d98_pred, d98_gt, d98_delta;
  float d2_pred, d2_gt, d2_delta;
  float dmax_pred, dmax_gt, dmax_delta;
  float dmean_pred, dmean_gt, dmean_delta;
  float hi_pred, hi_gt, hi_delta;  // NaN when HI is undefined
  float hf_pred, hf_gt;
};

struct Aggregate {
  float mean = 0.0f;
  float sd = 0.0f;  // sample standard deviation of the per-case deltas
};

struct DoseReport {
  std::vector<CaseRow> rows;
  Aggregate d98, d2, dmax, dmean, hi;
  Aggregate hf_pred, hf_gt;  // aggregated over the raw values, not deltas
  std::vector<DvhCurve> dvh_pred, dvh_gt;  // per case x structure
};

DoseReport evaluate(std::span<const EvalCase> cases, int dvh_bins = 100);

void write_report_csv(const std::string& path, const DoseReport& report);
DoseReport read_report_csv(const std::string& path);  // metric table only

struct MetricComparison {
  std::string metric;
  TTestResult test;
};

// Paired t-tests between the per-case deltas of two reports (case-aligned).
std::vector<MetricComparison> compare_reports(const DoseReport& a, const DoseReport& b);
void write_comparison_csv(const std::string& path,
                          std::span<const MetricComparison> comparisons);

void write_dvh_csv(const std::string& path, std::span<const DvhCurve> curves);
void write_dvh_svg(const std::string& path, std::span<const DvhCurve> curves,
                   const std::string& title);

}  // namespace dosediff::metrics
