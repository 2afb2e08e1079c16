#include "dosediff/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <complex>
#include <numbers>
#include <vector>

namespace dosediff::metrics {

namespace {

std::vector<double> masked_values(const Tensor& dose, const Tensor& mask) {
  DD_CHECK(dose.shape() == mask.shape(), "dose and mask shapes must match");
  std::vector<double> values;
  const float* pd = dose.data().data();
  const float* pm = mask.data().data();
  const std::size_t n = dose.data().size();
  for (std::size_t i = 0; i < n; ++i) {
    if (pm[i] > 0.5f) values.push_back(pd[i]);
  }
  return values;
}

// Interprets a tensor as a stack of [H,W] planes (all leading dims folded).
struct PlaneView {
  int h = 0, w = 0;
  std::size_t planes = 0;
};

PlaneView plane_view(const Tensor& t) {
  DD_CHECK(t.rank() >= 2, "image tensor must have rank >= 2");
  PlaneView v;
  v.h = t.dim(t.rank() - 2);
  v.w = t.dim(t.rank() - 1);
  v.planes = static_cast<std::size_t>(t.numel()) / (static_cast<std::size_t>(v.h) * v.w);
  return v;
}

}  // namespace

double dose_at_volume(const Tensor& dose, const Tensor& mask, double m_percent) {
  DD_CHECK(m_percent > 0.0 && m_percent <= 100.0, "dose_at_volume: m must be in (0, 100]");
  std::vector<double> values = masked_values(dose, mask);
  DD_CHECK(!values.empty(), "dose_at_volume: empty mask");
  std::sort(values.begin(), values.end(), std::greater<>());
  const auto n = static_cast<double>(values.size());
  auto k = static_cast<std::size_t>(std::ceil(m_percent * n / 100.0 - 1e-12));
  k = std::clamp<std::size_t>(k, 1, values.size());
  return values[k - 1];
}

SummaryMetrics summary_metrics(const Tensor& dose, const Tensor& ptv_mask, HiDivisor divisor,
                               double prescription_dose) {
  std::vector<double> values = masked_values(dose, ptv_mask);
  DD_CHECK(!values.empty(), "summary_metrics: empty PTV mask");

  SummaryMetrics s;
  s.d98 = dose_at_volume(dose, ptv_mask, 98.0);
  s.d2 = dose_at_volume(dose, ptv_mask, 2.0);
  s.dmax = *std::max_element(values.begin(), values.end());
  double acc = 0.0;
  for (double v : values) acc += v;
  s.dmean = acc / static_cast<double>(values.size());

  const double div = divisor == HiDivisor::D50 ? dose_at_volume(dose, ptv_mask, 50.0)
                                               : prescription_dose;
  if (div != 0.0) {
    s.hi = (s.d2 - s.d98) / div;
  }
  return s;
}

DvhCurve dvh(const Tensor& dose, const Tensor& mask, int n_bins, std::string structure_name) {
  DD_CHECK(n_bins >= 2, "dvh: n_bins must be >= 2");
  std::vector<double> values = masked_values(dose, mask);
  DD_CHECK(!values.empty(), "dvh: empty mask");

  double global_max = 0.0;
  for (float v : dose.data()) global_max = std::max(global_max, static_cast<double>(v));

  DvhCurve curve;
  curve.structure = std::move(structure_name);
  curve.dose_grid.resize(static_cast<std::size_t>(n_bins));
  curve.volume_fraction.resize(static_cast<std::size_t>(n_bins));
  for (int i = 0; i < n_bins; ++i) {
    const double level = global_max * static_cast<double>(i) / static_cast<double>(n_bins - 1);
    std::size_t count = 0;
    for (double v : values) count += v >= level;
    curve.dose_grid[static_cast<std::size_t>(i)] = level;
    curve.volume_fraction[static_cast<std::size_t>(i)] =
        static_cast<double>(count) / static_cast<double>(values.size());
  }
  return curve;
}

double regularized_incomplete_beta(double x, double a, double b) {
  DD_CHECK(a > 0.0 && b > 0.0, "regularized_incomplete_beta: a, b must be positive");
  DD_CHECK(x >= 0.0 && x <= 1.0, "regularized_incomplete_beta: x must be in [0,1]");
  if (x <= 0.0) return 0.0;
  if (x >= 1.0) return 1.0;

  // Continued fraction for I_x(a,b), modified Lentz algorithm.
  auto continued_fraction = [](double x, double a, double b) {
    const double tiny = 1e-300;
    auto numer = [x, a, b](int n) {
      if (n % 2 == 0) {
        const double m = n / 2;
        return m * (b - m) * x / ((a + 2.0 * m - 1.0) * (a + 2.0 * m));
      }
      const double m = (n - 1) / 2;
      return -(a + m) * (a + b + m) * x / ((a + 2.0 * m) * (a + 2.0 * m + 1.0));
    };
    double c = 1.0;
    double d = 0.0;
    double ret = 1.0;
    for (int n = 1; n < 100000; ++n) {
      const double an = numer(n);
      d = 1.0 + an * d;
      if (d == 0.0) d = tiny;
      c = 1.0 + an / c;
      if (c == 0.0) c = tiny;
      d = 1.0 / d;
      const double mult = c * d;
      ret *= mult;
      if (std::abs(mult - 1.0) <= 1e-15) break;
    }
    return ret;
  };

  const double log_beta = std::lgamma(a) + std::lgamma(b) - std::lgamma(a + b);
  const double front = std::exp(a * std::log(x) + b * std::log(1.0 - x) - log_beta);
  if (x <= (a + 1.0) / (a + b + 2.0)) {
    return front / (a * continued_fraction(x, a, b));
  }
  return 1.0 - std::exp(b * std::log(1.0 - x) + a * std::log(x) - log_beta) /
                   (b * continued_fraction(1.0 - x, b, a));
}

TTestResult paired_t_test(std::span<const double> a, std::span<const double> b) {
  DD_CHECK(a.size() == b.size(), "paired_t_test: samples must have equal length");
  DD_CHECK(a.size() >= 2, "paired_t_test: need at least 2 pairs");
  const std::size_t n = a.size();

  double mean = 0.0;
  for (std::size_t i = 0; i < n; ++i) mean += a[i] - b[i];
  mean /= static_cast<double>(n);
  double ss = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double d = (a[i] - b[i]) - mean;
    ss += d * d;
  }
  const double sd = std::sqrt(ss / static_cast<double>(n - 1));

  TTestResult r;
  if (sd == 0.0) {
    r.degenerate = true;
    if (mean == 0.0) {
      r.t = 0.0;
      r.p = 1.0;
    } else {
      r.t = mean > 0.0 ? std::numeric_limits<double>::infinity()
                       : -std::numeric_limits<double>::infinity();
      r.p = 0.0;
    }
    return r;
  }
  const double stderr_ = sd / std::sqrt(static_cast<double>(n));
  r.t = mean / stderr_;
  const double v = static_cast<double>(n - 1);
  r.p = regularized_incomplete_beta(v / (r.t * r.t + v), v / 2.0, 0.5);
  return r;
}

double hf_energy_ratio(const Tensor& dose) {
  const PlaneView view = plane_view(dose);
  DD_CHECK(view.planes == 1, "hf_energy_ratio: expected a single [H,W] plane");
  const int h = view.h, w = view.w;
  DD_CHECK(h >= 4 && w >= 4, "hf_energy_ratio: image must be at least 4x4");

  // Row-column DFT; naive per-axis transforms are fine at these sizes.
  using cd = std::complex<double>;
  std::vector<cd> rows(static_cast<std::size_t>(h) * w);
  const float* p = dose.data().data();
  for (int y = 0; y < h; ++y) {
    for (int u = 0; u < w; ++u) {
      cd acc(0.0, 0.0);
      for (int x = 0; x < w; ++x) {
        const double ang = -2.0 * std::numbers::pi * u * x / w;
        acc += static_cast<double>(p[static_cast<std::size_t>(y) * w + x]) *
               cd(std::cos(ang), std::sin(ang));
      }
      rows[static_cast<std::size_t>(y) * w + u] = acc;
    }
  }
  double total = 0.0, outside = 0.0, dc = 0.0;
  for (int v = 0; v < h; ++v) {
    const int sv = v <= h / 2 ? v : v - h;
    for (int u = 0; u < w; ++u) {
      cd acc(0.0, 0.0);
      for (int y = 0; y < h; ++y) {
        const double ang = -2.0 * std::numbers::pi * v * y / h;
        acc += rows[static_cast<std::size_t>(y) * w + u] * cd(std::cos(ang), std::sin(ang));
      }
      if (u == 0 && v == 0) {
        dc = std::norm(acc);  // excluded
        continue;
      }
      const int su = u <= w / 2 ? u : u - w;
      const double energy = std::norm(acc);
      total += energy;
      const bool central = 8 * std::abs(sv) <= h && 8 * std::abs(su) <= w;
      if (!central) outside += energy;
    }
  }
  // Constant images have only rounding residue off the DC bin.
  if (total <= 1e-20 * std::max(dc, 1.0)) return 0.0;
  return outside / total;
}

Tensor gaussian_blur(const Tensor& img, double sigma) {
  DD_CHECK(sigma > 0.0, "gaussian_blur: sigma must be positive");
  const PlaneView view = plane_view(img);
  const int h = view.h, w = view.w;
  const int radius = static_cast<int>(std::ceil(3.0 * sigma));
  std::vector<double> kernel(static_cast<std::size_t>(2 * radius + 1));
  double norm = 0.0;
  for (int i = -radius; i <= radius; ++i) {
    kernel[static_cast<std::size_t>(i + radius)] = std::exp(-0.5 * i * i / (sigma * sigma));
    norm += kernel[static_cast<std::size_t>(i + radius)];
  }
  for (double& k : kernel) k /= norm;

  Tensor out = Tensor::zeros(img.shape());
  std::vector<double> tmp(static_cast<std::size_t>(h) * w);
  for (std::size_t plane = 0; plane < view.planes; ++plane) {
    const float* src = img.data().data() + plane * static_cast<std::size_t>(h) * w;
    float* dst = out.mutable_data().data() + plane * static_cast<std::size_t>(h) * w;
    for (int y = 0; y < h; ++y) {  // horizontal pass, replicated borders
      for (int x = 0; x < w; ++x) {
        double acc = 0.0;
        for (int i = -radius; i <= radius; ++i) {
          const int xx = std::clamp(x + i, 0, w - 1);
          acc += kernel[static_cast<std::size_t>(i + radius)] *
                 src[static_cast<std::size_t>(y) * w + xx];
        }
        tmp[static_cast<std::size_t>(y) * w + x] = acc;
      }
    }
    for (int y = 0; y < h; ++y) {  // vertical pass
      for (int x = 0; x < w; ++x) {
        double acc = 0.0;
        for (int i = -radius; i <= radius; ++i) {
          const int yy = std::clamp(y + i, 0, h - 1);
          acc += kernel[static_cast<std::size_t>(i + radius)] *
                 tmp[static_cast<std::size_t>(yy) * w + x];
        }
        dst[static_cast<std::size_t>(y) * w + x] = static_cast<float>(acc);
      }
    }
  }
  return out;
}

}  // namespace dosediff::metrics
