#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "dosediff/tensor.hpp"

namespace dosediff::phantom {

inline constexpr int kOarCount = 4;
inline constexpr std::array<std::string_view, kOarCount> kOarNames = {
    "bladder", "femoral_head_l", "femoral_head_r", "small_intestine"};

// One treatment beam: a straight band of the given width (pixels) aimed
// through the PTV centroid, attenuated exponentially with tissue depth.
struct BeamSpec {
  double angle = 0.0;            // radians; direction of propagation
  double width = 6.0;            // band width in pixels
  double attenuation_mu = 0.02;  // per-pixel linear attenuation
  double weight = 1.0;           // relative intensity
};

// Rasterized anatomy: CT intensity in [0,1] (0 outside the body) and binary
// masks, each stored as a [1,H,W] tensor.
struct PhantomGeometry {
  int size = 0;
  Tensor ct;
  Tensor ptv;
  std::array<Tensor, kOarCount> oars;
};

// One training example. x stacks CT, PTV and the OAR masks as channels
// [2+o,H,W]; y is the dose map [1,H,W] normalized to PTV mean 1.
struct PhantomCase {
  std::string case_id;
  std::uint64_t seed = 0;
  int size = 0;
  std::vector<BeamSpec> beams;
  Tensor x;
  Tensor y;
};

// Superposition of attenuated beam bands, normalized so the mean dose over
// the PTV equals 1. Dose is exactly zero outside every band.
Tensor analytic_dose(const PhantomGeometry& geometry, std::span<const BeamSpec> beams,
                     int size);

// Deterministic synthetic case: body ellipse with smooth CT texture, one PTV,
// four disjoint OARs and an analytic multi-beam dose map. Bit-identical
// output for identical arguments.
PhantomCase generate_case(std::uint64_t seed, int size, int n_beams);

// Deterministic shuffled partition with sizes rounded to nearest while
// preserving the total (largest-remainder rounding).
std::array<std::vector<std::size_t>, 3> split_indices(std::size_t count,
                                                      const std::array<double, 3>& fractions,
                                                      std::uint64_t seed);
std::array<std::vector<PhantomCase>, 3> split_dataset(std::vector<PhantomCase> cases,
                                                      const std::array<double, 3>& fractions,
                                                      std::uint64_t seed);

}  // namespace dosediff::phantom
