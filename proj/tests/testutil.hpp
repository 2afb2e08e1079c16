#pragma once

#include <cmath>
#include <complex>
#include <functional>
#include <numbers>
#include <vector>

#include "dosediff/ops.hpp"
#include "dosediff/rng.hpp"
#include "dosediff/tensor.hpp"

namespace testutil {

using dosediff::Rng;
using dosediff::Shape;
using dosediff::Tensor;

inline Tensor rand_tensor(Shape shape, Rng& rng, float lo = -1.0f, float hi = 1.0f) {
  Tensor t = Tensor::zeros(std::move(shape));
  for (float& v : t.mutable_data()) {
    v = static_cast<float>(rng.uniform(lo, hi));
  }
  return t;
}

inline Tensor randn_tensor(Shape shape, Rng& rng, float stddev = 1.0f) {
  Tensor t = Tensor::zeros(std::move(shape));
  rng.fill_normal(t.mutable_data(), stddev);
  return t;
}

struct GradCheckResult {
  int checked = 0;
  int failed = 0;
  double worst_rel = 0.0;
};

// Central finite-difference gradient check. `forward` must recompute its
// output from the current contents of the `wrt` tensors. The loss is a fixed
// random weighting of the output so every component influences a scalar.
//
// Two float32 error sources bound what the quotient can resolve: rounding
// noise ~ eps_f32 * ||out|| / (2h) (dominates at small h) and truncation
// ~ f''' h^2 / 6 (dominates at large h). Each component is therefore compared
// against the best of three consistent estimators: the central difference at
// h, at h/2, and their Richardson extrapolation; abs_tol absorbs the residual
// rounding floor. A wrong backward rule disagrees with all three by an error
// proportional to the gradient itself and still fails.
inline GradCheckResult grad_check(const std::function<Tensor()>& forward,
                                  std::vector<Tensor> wrt, double h = 1e-3,
                                  double rel_tol = 1e-2, double grad_floor = 1e-4,
                                  int max_components_per_tensor = 64,
                                  std::uint64_t seed = 42, double abs_tol = 3e-4) {
  Rng rng(seed);

  Tensor probe = forward();
  Tensor weights = rand_tensor(probe.shape(), rng, -1.0f, 1.0f);

  auto weighted_loss = [&]() {
    Tensor out = forward();
    double acc = 0.0;
    for (std::size_t i = 0; i < out.data().size(); ++i) {
      acc += static_cast<double>(out.data()[i]) * weights.data()[i];
    }
    return acc;
  };

  for (Tensor& t : wrt) t.set_requires_grad(true);
  {
    dosediff::GradientTape tape;
    Tensor out = forward();
    Tensor loss = dosediff::sum(dosediff::mul(out, weights));
    tape.backward(loss);
  }

  GradCheckResult result;
  for (Tensor& t : wrt) {
    std::vector<float> analytic(t.grad().begin(), t.grad().end());
    const std::int64_t n = t.numel();
    std::vector<std::int64_t> indices;
    if (max_components_per_tensor <= 0 || n <= max_components_per_tensor) {
      for (std::int64_t i = 0; i < n; ++i) indices.push_back(i);
    } else {
      for (int i = 0; i < max_components_per_tensor; ++i) {
        indices.push_back(static_cast<std::int64_t>(rng.next_u64() % static_cast<std::uint64_t>(n)));
      }
    }
    for (std::int64_t idx : indices) {
      float* slot = &t.mutable_data()[static_cast<std::size_t>(idx)];
      const float saved = *slot;
      auto central = [&](double step) {
        *slot = saved + static_cast<float>(step);
        const double plus = weighted_loss();
        *slot = saved - static_cast<float>(step);
        const double minus = weighted_loss();
        *slot = saved;
        return (plus - minus) / (2.0 * step);
      };
      const double an = analytic[static_cast<std::size_t>(idx)];
      if (std::abs(an) <= grad_floor) continue;
      const double fd_h = central(h);
      const double fd_h2 = central(h / 2.0);
      const double fd_rich = (4.0 * fd_h2 - fd_h) / 3.0;
      double fd = fd_h;
      for (double candidate : {fd_h2, fd_rich}) {
        if (std::abs(an - candidate) < std::abs(an - fd)) fd = candidate;
      }
      ++result.checked;
      const double err = std::abs(an - fd);
      const double rel = err / std::max(std::abs(an), std::abs(fd));
      if (err > abs_tol) result.worst_rel = std::max(result.worst_rel, rel);
      if (rel > rel_tol && err > abs_tol) ++result.failed;
    }
  }
  for (Tensor& t : wrt) {
    t.set_requires_grad(false);
    t.zero_grad();
  }
  return result;
}

// Direct six-loop convolution oracle (cross-correlation semantics).
inline Tensor conv2d_oracle(const Tensor& input, const Tensor& weight, const Tensor& bias,
                            int stride, int padding) {
  const int n = input.dim(0), c_in = input.dim(1), h = input.dim(2), w = input.dim(3);
  const int c_out = weight.dim(0), k = weight.dim(2);
  const int h_out = (h + 2 * padding - k) / stride + 1;
  const int w_out = (w + 2 * padding - k) / stride + 1;
  Tensor out = Tensor::zeros({n, c_out, h_out, w_out});
  float* po = out.mutable_data().data();
  for (int ni = 0; ni < n; ++ni) {
    for (int co = 0; co < c_out; ++co) {
      for (int oy = 0; oy < h_out; ++oy) {
        for (int ox = 0; ox < w_out; ++ox) {
          double acc = bias.data()[static_cast<std::size_t>(co)];
          for (int ci = 0; ci < c_in; ++ci) {
            for (int ky = 0; ky < k; ++ky) {
              for (int kx = 0; kx < k; ++kx) {
                const int iy = oy * stride + ky - padding;
                const int ix = ox * stride + kx - padding;
                if (iy < 0 || iy >= h || ix < 0 || ix >= w) continue;
                acc += static_cast<double>(
                           input.at({ni, ci, iy, ix})) *
                       weight.at({co, ci, ky, kx});
              }
            }
          }
          po[((static_cast<std::size_t>(ni) * c_out + co) * h_out + oy) * w_out + ox] =
              static_cast<float>(acc);
        }
      }
    }
  }
  return out;
}

// Student t density, used by the numerical-integration oracle.
inline double t_pdf(double x, double v) {
  return std::exp(std::lgamma((v + 1.0) / 2.0) - std::lgamma(v / 2.0)) /
         std::sqrt(v * std::numbers::pi) * std::pow(1.0 + x * x / v, -(v + 1.0) / 2.0);
}

// Two-tailed p by composite Simpson integration of the density over [0, |t|]:
// p = 1 - 2 * integral. Independent of the incomplete-beta route.
inline double t_two_tailed_p_oracle(double t, int df) {
  const double v = static_cast<double>(df);
  const double b = std::abs(t);
  const int n = 20000;  // even
  const double step = b / n;
  double acc = t_pdf(0.0, v) + t_pdf(b, v);
  for (int i = 1; i < n; ++i) {
    acc += t_pdf(i * step, v) * (i % 2 == 1 ? 4.0 : 2.0);
  }
  const double integral = acc * step / 3.0;
  return 1.0 - 2.0 * integral;
}

// Fraction of spectral energy strictly above the median radial frequency of
// the non-DC bins. Used by the phantom sharpness property.
inline double energy_above_median_frequency(const Tensor& img) {
  const int h = img.dim(img.rank() - 2);
  const int w = img.dim(img.rank() - 1);
  const float* p = img.data().data();
  using cd = std::complex<double>;
  std::vector<cd> rows(static_cast<std::size_t>(h) * w);
  for (int y = 0; y < h; ++y) {
    for (int u = 0; u < w; ++u) {
      cd acc(0, 0);
      for (int x = 0; x < w; ++x) {
        const double ang = -2.0 * std::numbers::pi * u * x / w;
        acc += static_cast<double>(p[static_cast<std::size_t>(y) * w + x]) *
               cd(std::cos(ang), std::sin(ang));
      }
      rows[static_cast<std::size_t>(y) * w + u] = acc;
    }
  }
  std::vector<std::pair<double, double>> bins;  // (radial frequency, energy)
  for (int v = 0; v < h; ++v) {
    for (int u = 0; u < w; ++u) {
      cd acc(0, 0);
      for (int y = 0; y < h; ++y) {
        const double ang = -2.0 * std::numbers::pi * v * y / h;
        acc += rows[static_cast<std::size_t>(y) * w + u] * cd(std::cos(ang), std::sin(ang));
      }
      if (u == 0 && v == 0) continue;
      const double fu = static_cast<double>(u <= w / 2 ? u : u - w) / w;
      const double fv = static_cast<double>(v <= h / 2 ? v : v - h) / h;
      bins.emplace_back(std::sqrt(fu * fu + fv * fv), std::norm(acc));
    }
  }
  std::vector<double> freqs;
  freqs.reserve(bins.size());
  for (const auto& [f, e] : bins) freqs.push_back(f);
  std::nth_element(freqs.begin(), freqs.begin() + static_cast<std::ptrdiff_t>(freqs.size() / 2),
                   freqs.end());
  const double median = freqs[freqs.size() / 2];
  double total = 0.0, above = 0.0;
  for (const auto& [f, e] : bins) {
    total += e;
    if (f > median) above += e;
  }
  return total > 0.0 ? above / total : 0.0;
}

// Central-difference gradient magnitude (forward differences at the border).
inline Tensor gradient_magnitude(const Tensor& img) {
  const int h = img.dim(img.rank() - 2);
  const int w = img.dim(img.rank() - 1);
  const float* p = img.data().data();
  Tensor out = Tensor::zeros({1, h, w});
  float* po = out.mutable_data().data();
  auto at = [&](int y, int x) {
    y = std::clamp(y, 0, h - 1);
    x = std::clamp(x, 0, w - 1);
    return static_cast<double>(p[static_cast<std::size_t>(y) * w + x]);
  };
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const double gx = (at(y, x + 1) - at(y, x - 1)) * 0.5;
      const double gy = (at(y + 1, x) - at(y - 1, x)) * 0.5;
      po[static_cast<std::size_t>(y) * w + x] = static_cast<float>(std::sqrt(gx * gx + gy * gy));
    }
  }
  return out;
}

}  // namespace testutil
