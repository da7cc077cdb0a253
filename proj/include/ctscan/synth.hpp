#pragma once

// Synthetic CT volumes standing in for real chest scans.
//
// Background: smooth low-frequency noise (a coarse random lattice,
// trilinearly interpolated) in [0, background_max]. COVID volumes add 2-5
// Gaussian blobs (peak 0.3-0.6, in-plane sigma 3-6 px) whose support is
// restricted to the central 50% of the slices.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "ctscan/error.hpp"
#include "ctscan/rng.hpp"
#include "ctscan/sampling.hpp"
#include "ctscan/volume.hpp"

namespace ctscan {

struct SynthRecipe {
  double background_max = 0.3;
  std::size_t lattice_cell_px = 16;
  std::size_t lattice_cell_slices = 8;
  std::size_t blobs_min = 3;
  std::size_t blobs_max = 6;
  double amplitude_min = 0.3;
  double amplitude_max = 0.6;
  double sigma_min_px = 3.0;
  double sigma_max_px = 6.0;
  double sigma_min_slices = 2.0;
  double sigma_max_slices = 4.0;
};

struct SyntheticScan {
  CtVolume volume;
  std::vector<float> background;
};

/// Slices [start, end) forming the central half of a volume of depth D.
inline IndexRange synth_blob_band(std::size_t depth) { return {depth / 4, depth - depth / 4}; }

inline SyntheticScan synth_scan(Label label, std::size_t depth, std::size_t height, std::size_t width, Rng& rng,
                                const SynthRecipe& recipe = {}) {
  if (depth < 8) throw ParameterError("synth_volume: depth must be >= 8, got " + std::to_string(depth));
  if (height < 8 || width < 8) throw ParameterError("synth_volume: slices must be at least 8x8");

  const std::size_t gz = depth / recipe.lattice_cell_slices + 2;
  const std::size_t gy = height / recipe.lattice_cell_px + 2;
  const std::size_t gx = width / recipe.lattice_cell_px + 2;
  std::vector<double> lattice(gz * gy * gx);
  for (double& v : lattice) v = uniform(rng, 0.0, recipe.background_max);
  auto lat = [&](std::size_t z, std::size_t y, std::size_t x) { return lattice[(z * gy + y) * gx + x]; };

  SyntheticScan scan;
  scan.background.resize(depth * height * width);
  for (std::size_t z = 0; z < depth; ++z) {
    const double fz = static_cast<double>(z) / static_cast<double>(recipe.lattice_cell_slices);
    const auto z0 = static_cast<std::size_t>(fz);
    const double tz = fz - static_cast<double>(z0);
    for (std::size_t y = 0; y < height; ++y) {
      const double fy = static_cast<double>(y) / static_cast<double>(recipe.lattice_cell_px);
      const auto y0 = static_cast<std::size_t>(fy);
      const double ty = fy - static_cast<double>(y0);
      for (std::size_t x = 0; x < width; ++x) {
        const double fx = static_cast<double>(x) / static_cast<double>(recipe.lattice_cell_px);
        const auto x0 = static_cast<std::size_t>(fx);
        const double tx = fx - static_cast<double>(x0);
        double v = 0.0;
        for (int dz = 0; dz < 2; ++dz)
          for (int dy = 0; dy < 2; ++dy)
            for (int dx = 0; dx < 2; ++dx) {
              const double wgt = (dz ? tz : 1 - tz) * (dy ? ty : 1 - ty) * (dx ? tx : 1 - tx);
              v += wgt * lat(z0 + dz, y0 + dy, x0 + dx);
            }
        scan.background[(z * height + y) * width + x] = static_cast<float>(v);
      }
    }
  }

  scan.volume = CtVolume("", depth, height, width);
  scan.volume.voxels = scan.background;
  scan.volume.label = label;
  if (label == Label::non_covid) return scan;

  const IndexRange band = synth_blob_band(depth);
  const std::size_t blobs = uniform_index(rng, recipe.blobs_min, recipe.blobs_max);
  std::vector<double> acc(depth * height * width, 0.0);
  for (std::size_t b = 0; b < blobs; ++b) {
    const double amp = uniform(rng, recipe.amplitude_min, recipe.amplitude_max);
    const double sigma = uniform(rng, recipe.sigma_min_px, recipe.sigma_max_px);
    const double sigma_z = uniform(rng, recipe.sigma_min_slices, recipe.sigma_max_slices);
    // Integer centres so the peak voxel carries the full amplitude.
    const std::size_t cz = uniform_index(rng, band.start, band.end - 1);
    const std::size_t margin = std::min<std::size_t>(static_cast<std::size_t>(sigma), std::min(height, width) / 4);
    const std::size_t cy = uniform_index(rng, margin, height - 1 - margin);
    const std::size_t cx = uniform_index(rng, margin, width - 1 - margin);
    for (std::size_t z = band.start; z < band.end; ++z) {
      const double dz = static_cast<double>(z) - static_cast<double>(cz);
      if (std::abs(dz) > 3.0 * sigma_z) continue;
      const double wz = std::exp(-0.5 * dz * dz / (sigma_z * sigma_z));
      for (std::size_t y = 0; y < height; ++y) {
        const double dy = static_cast<double>(y) - static_cast<double>(cy);
        for (std::size_t x = 0; x < width; ++x) {
          const double dx = static_cast<double>(x) - static_cast<double>(cx);
          acc[(z * height + y) * width + x] += amp * wz * std::exp(-0.5 * (dy * dy + dx * dx) / (sigma * sigma));
        }
      }
    }
  }
  for (std::size_t i = 0; i < acc.size(); ++i) {
    scan.volume.voxels[i] = static_cast<float>(std::min(1.0, static_cast<double>(scan.background[i]) + acc[i]));
  }
  return scan;
}

inline CtVolume synth_volume(Label label, std::size_t depth, std::size_t height, std::size_t width, Rng& rng,
                             const SynthRecipe& recipe = {}) {
  return synth_scan(label, depth, height, width, rng, recipe).volume;
}

}  // namespace ctscan
