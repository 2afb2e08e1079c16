#include "dosediff/phantom.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>

#include "dosediff/rng.hpp"

namespace dosediff::phantom {

namespace {

struct Ellipse {
  double cx, cy;     // center
  double rx, ry;     // semi-axes
  double rot = 0.0;  // rotation in radians

  bool contains(double x, double y) const {
    const double dx = x - cx;
    const double dy = y - cy;
    const double c = std::cos(rot), s = std::sin(rot);
    const double u = (c * dx + s * dy) / rx;
    const double v = (-s * dx + c * dy) / ry;
    return u * u + v * v <= 1.0;
  }
};

Tensor rasterize(const Ellipse& e, int size) {
  Tensor mask = Tensor::zeros({1, size, size});
  float* p = mask.mutable_data().data();
  for (int y = 0; y < size; ++y) {
    for (int x = 0; x < size; ++x) {
      if (e.contains(x + 0.5, y + 0.5)) p[static_cast<std::size_t>(y) * size + x] = 1.0f;
    }
  }
  return mask;
}

bool masks_overlap(const Tensor& a, const Tensor& b) {
  const float* pa = a.data().data();
  const float* pb = b.data().data();
  const std::size_t n = a.data().size();
  for (std::size_t i = 0; i < n; ++i) {
    if (pa[i] > 0.5f && pb[i] > 0.5f) return true;
  }
  return false;
}

bool mask_inside(const Tensor& mask, const Tensor& ct) {
  const float* pm = mask.data().data();
  const float* pc = ct.data().data();
  const std::size_t n = mask.data().size();
  for (std::size_t i = 0; i < n; ++i) {
    if (pm[i] > 0.5f && pc[i] <= 0.0f) return false;
  }
  return true;
}

std::size_t mask_area(const Tensor& mask) {
  std::size_t n = 0;
  for (float v : mask.data()) n += v > 0.5f;
  return n;
}

// Smooth pseudo-random field from a handful of low-frequency sinusoids.
struct SmoothField {
  struct Wave {
    double kx, ky, phase, amp;
  };
  std::vector<Wave> waves;

  static SmoothField make(Rng& rng, int size) {
    SmoothField f;
    for (int i = 0; i < 4; ++i) {
      const double freq = rng.uniform(1.0, 3.0) * 2.0 * std::numbers::pi / size;
      const double dir = rng.uniform(0.0, 2.0 * std::numbers::pi);
      f.waves.push_back({freq * std::cos(dir), freq * std::sin(dir),
                         rng.uniform(0.0, 2.0 * std::numbers::pi), rng.uniform(0.4, 1.0)});
    }
    return f;
  }

  double at(double x, double y) const {
    double acc = 0.0, norm = 0.0;
    for (const Wave& w : waves) {
      acc += w.amp * std::sin(w.kx * x + w.ky * y + w.phase);
      norm += w.amp;
    }
    return acc / norm;  // roughly in [-1, 1]
  }
};

}  // namespace

Tensor analytic_dose(const PhantomGeometry& geometry, std::span<const BeamSpec> beams,
                     int size) {
  DD_CHECK(!beams.empty(), "analytic_dose: at least one beam required");
  DD_CHECK(geometry.ptv.defined(), "analytic_dose: geometry has no PTV mask");
  const std::size_t ptv_area = mask_area(geometry.ptv);
  DD_CHECK(ptv_area > 0, "analytic_dose: empty PTV mask");

  // Beams aim at the PTV centroid.
  const float* ptv = geometry.ptv.data().data();
  double cx = 0.0, cy = 0.0;
  for (int y = 0; y < size; ++y) {
    for (int x = 0; x < size; ++x) {
      if (ptv[static_cast<std::size_t>(y) * size + x] > 0.5f) {
        cx += x + 0.5;
        cy += y + 0.5;
      }
    }
  }
  cx /= static_cast<double>(ptv_area);
  cy /= static_cast<double>(ptv_area);

  const float* ct = geometry.ct.data().data();
  auto in_body = [&](double x, double y) {
    const int ix = static_cast<int>(std::floor(x));
    const int iy = static_cast<int>(std::floor(y));
    if (ix < 0 || ix >= size || iy < 0 || iy >= size) return false;
    return ct[static_cast<std::size_t>(iy) * size + ix] > 0.0f;
  };

  Tensor dose = Tensor::zeros({1, size, size});
  float* pd = dose.mutable_data().data();
  const double diag = std::sqrt(2.0) * size;

  for (const BeamSpec& beam : beams) {
    DD_CHECK(beam.width > 0.0 && beam.weight > 0.0 && beam.attenuation_mu >= 0.0,
             "analytic_dose: invalid beam spec");
    const double ux = std::cos(beam.angle);
    const double uy = std::sin(beam.angle);
    const double nx = -uy, ny = ux;  // band normal
    for (int y = 0; y < size; ++y) {
      for (int x = 0; x < size; ++x) {
        const double px = x + 0.5, py = y + 0.5;
        const double perp = (px - cx) * nx + (py - cy) * ny;
        if (std::abs(perp) > beam.width * 0.5) continue;
        // Tissue path length from the body entry point, marched at 1px steps.
        double depth = 0.0;
        for (double s = 1.0; s <= diag; s += 1.0) {
          const double qx = px - s * ux;
          const double qy = py - s * uy;
          if (qx < -1.0 || qx > size + 1.0 || qy < -1.0 || qy > size + 1.0) break;
          if (in_body(qx, qy)) depth += 1.0;
        }
        pd[static_cast<std::size_t>(y) * size + x] +=
            static_cast<float>(beam.weight * std::exp(-beam.attenuation_mu * depth));
      }
    }
  }

  // Prescription normalization: mean dose over the PTV becomes exactly 1.
  double ptv_sum = 0.0;
  for (std::size_t i = 0; i < dose.data().size(); ++i) {
    if (ptv[i] > 0.5f) ptv_sum += pd[i];
  }
  DD_CHECK(ptv_sum > 0.0, "analytic_dose: beams deposit no dose in the PTV");
  const double scale = static_cast<double>(ptv_area) / ptv_sum;
  for (std::size_t i = 0; i < dose.data().size(); ++i) {
    pd[i] = static_cast<float>(pd[i] * scale);
  }
  return dose;
}

PhantomCase generate_case(std::uint64_t seed, int size, int n_beams) {
  DD_CHECK(size >= 16 && size % 16 == 0, "generate_case: size must be divisible by 16");
  DD_CHECK(n_beams >= 1, "generate_case: n_beams must be >= 1");

  Rng rng = Rng::stream(seed, "phantom-case");
  const double s = static_cast<double>(size);

  Ellipse body{s * 0.5 + rng.uniform(-0.02, 0.02) * s, s * 0.5 + rng.uniform(-0.02, 0.02) * s,
               rng.uniform(0.40, 0.45) * s, rng.uniform(0.33, 0.38) * s,
               rng.uniform(-0.2, 0.2)};

  // CT texture: smooth random field inside the body, zero outside.
  SmoothField field = SmoothField::make(rng, size);
  Tensor ct = Tensor::zeros({1, size, size});
  {
    float* p = ct.mutable_data().data();
    for (int y = 0; y < size; ++y) {
      for (int x = 0; x < size; ++x) {
        if (!body.contains(x + 0.5, y + 0.5)) continue;
        const double v = 0.55 + 0.20 * field.at(x + 0.5, y + 0.5);
        p[static_cast<std::size_t>(y) * size + x] =
            static_cast<float>(std::clamp(v, 0.2, 1.0));
      }
    }
  }

  auto place = [&](double r_lo, double r_hi, double dist_lo, double dist_hi, double base_angle,
                   double angle_jitter, const std::vector<const Tensor*>& avoid,
                   const char* what) -> Tensor {
    // Floor radii at ~1.6px so masks stay non-degenerate at small sizes.
    r_lo = std::max(r_lo, 1.6);
    r_hi = std::max(r_hi, r_lo + 0.4);
    double shrink = 1.0;
    for (int attempt = 0; attempt < 128; ++attempt) {
      if (attempt > 0 && attempt % 16 == 0) shrink *= 0.85;
      // Later attempts search an ever wider arc so a crowded quadrant cannot
      // wedge the placement; only the radii shrink, the ring distance stays.
      const double widen = std::min(std::numbers::pi,
                                    angle_jitter * (1.0 + attempt / 8.0));
      const double ang = base_angle + rng.uniform(-widen, widen);
      const double dist = rng.uniform(dist_lo, dist_hi);
      Ellipse e{body.cx + dist * std::cos(ang), body.cy + dist * std::sin(ang),
                std::max(1.2, rng.uniform(r_lo, r_hi) * shrink),
                std::max(1.2, rng.uniform(r_lo, r_hi) * shrink),
                rng.uniform(0.0, std::numbers::pi)};
      Tensor mask = rasterize(e, size);
      if (mask_area(mask) == 0) continue;
      if (!mask_inside(mask, ct)) continue;
      bool clash = false;
      for (const Tensor* other : avoid) {
        if (masks_overlap(mask, *other)) {
          clash = true;
          break;
        }
      }
      if (!clash) return mask;
    }
    throw GenerationError(std::string("generate_case: could not place ") + what +
                          " after 128 attempts (seed " + std::to_string(seed) + ")");
  };

  // PTV near the body center, OARs on a ring around it.
  Tensor ptv = place(0.055 * s, 0.085 * s, 0.0, 0.10 * s, rng.uniform(0.0, 2 * std::numbers::pi),
                     std::numbers::pi, {}, "PTV");
  std::array<Tensor, kOarCount> oars;
  std::vector<const Tensor*> avoid = {&ptv};
  for (int i = 0; i < kOarCount; ++i) {
    const double base = 2.0 * std::numbers::pi * i / kOarCount + rng.uniform(-0.3, 0.3);
    oars[static_cast<std::size_t>(i)] =
        place(0.045 * s, 0.070 * s, 0.16 * s, 0.22 * s, base, 0.45, avoid,
              std::string(kOarNames[static_cast<std::size_t>(i)]).c_str());
    avoid.push_back(&oars[static_cast<std::size_t>(i)]);
  }

  PhantomGeometry geometry{size, ct, ptv, oars};

  std::vector<BeamSpec> beams;
  beams.reserve(static_cast<std::size_t>(n_beams));
  for (int i = 0; i < n_beams; ++i) {
    BeamSpec b;
    b.angle = 2.0 * std::numbers::pi * i / n_beams + rng.uniform(-0.12, 0.12);
    b.width = rng.uniform(0.08, 0.14) * s;
    b.attenuation_mu = rng.uniform(0.010, 0.030);
    b.weight = rng.uniform(0.8, 1.2);
    beams.push_back(b);
  }

  Tensor dose = analytic_dose(geometry, beams, size);

  // Assemble channels: CT, PTV, then the OAR masks.
  std::vector<Tensor> channels = {ct, ptv};
  for (const Tensor& o : oars) channels.push_back(o);
  std::vector<float> x_data;
  x_data.reserve(channels.size() * static_cast<std::size_t>(size) * size);
  for (const Tensor& c : channels) {
    x_data.insert(x_data.end(), c.data().begin(), c.data().end());
  }

  PhantomCase out;
  out.seed = seed;
  out.size = size;
  out.case_id = "case_" + std::to_string(seed);
  out.beams = std::move(beams);
  out.x = Tensor::from_data({2 + kOarCount, size, size}, std::move(x_data));
  out.y = dose;
  return out;
}

std::array<std::vector<std::size_t>, 3> split_indices(std::size_t count,
                                                      const std::array<double, 3>& fractions,
                                                      std::uint64_t seed) {
  const double total = fractions[0] + fractions[1] + fractions[2];
  DD_CHECK(std::abs(total - 1.0) < 1e-9, "split: fractions must sum to 1");
  for (double f : fractions) DD_CHECK(f >= 0.0, "split: fractions must be non-negative");

  // Largest-remainder rounding preserves the total exactly.
  std::array<std::size_t, 3> sizes{};
  std::array<double, 3> remainder{};
  std::size_t assigned = 0;
  for (int i = 0; i < 3; ++i) {
    const double exact = fractions[static_cast<std::size_t>(i)] * static_cast<double>(count);
    sizes[static_cast<std::size_t>(i)] = static_cast<std::size_t>(std::floor(exact));
    remainder[static_cast<std::size_t>(i)] = exact - std::floor(exact);
    assigned += sizes[static_cast<std::size_t>(i)];
  }
  while (assigned < count) {
    int best = 0;
    for (int i = 1; i < 3; ++i) {
      if (remainder[static_cast<std::size_t>(i)] > remainder[static_cast<std::size_t>(best)]) {
        best = i;
      }
    }
    ++sizes[static_cast<std::size_t>(best)];
    remainder[static_cast<std::size_t>(best)] = -1.0;
    ++assigned;
  }
  for (int i = 0; i < 3; ++i) {
    DD_CHECK(fractions[static_cast<std::size_t>(i)] == 0.0 ||
                 sizes[static_cast<std::size_t>(i)] > 0,
             "split: nonzero fraction produced an empty split");
  }

  std::vector<std::size_t> order(count);
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng = Rng::stream(seed, "dataset-split");
  for (std::size_t i = count; i > 1; --i) {  // Fisher-Yates
    const std::size_t j = rng.next_u64() % i;
    std::swap(order[i - 1], order[j]);
  }

  std::array<std::vector<std::size_t>, 3> out;
  std::size_t pos = 0;
  for (int i = 0; i < 3; ++i) {
    out[static_cast<std::size_t>(i)].assign(order.begin() + static_cast<std::ptrdiff_t>(pos),
                                            order.begin() + static_cast<std::ptrdiff_t>(
                                                                pos + sizes[static_cast<std::size_t>(i)]));
    pos += sizes[static_cast<std::size_t>(i)];
  }
  return out;
}

std::array<std::vector<PhantomCase>, 3> split_dataset(std::vector<PhantomCase> cases,
                                                      const std::array<double, 3>& fractions,
                                                      std::uint64_t seed) {
  auto idx = split_indices(cases.size(), fractions, seed);
  std::array<std::vector<PhantomCase>, 3> out;
  for (int part = 0; part < 3; ++part) {
    for (std::size_t i : idx[static_cast<std::size_t>(part)]) {
      out[static_cast<std::size_t>(part)].push_back(cases[i]);
    }
  }
  return out;
}

}  // namespace dosediff::phantom
