#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>
#include <span>
#include <vector>

#include "ctscan/error.hpp"
#include "ctscan/rng.hpp"
#include "ctscan/volume.hpp"

namespace ctscan {

/// Bilinear resampling with corner-aligned grids (source coordinate
/// j * (W - 1) / (W' - 1)); a unit target axis samples the source centre.
inline std::vector<float> resize_slice(std::span<const float> image, std::size_t height, std::size_t width,
                                       std::size_t out_height, std::size_t out_width) {
  if (out_height == 0 || out_width == 0) throw ParameterError("resize_slice: target size must be >= 1");
  if (image.size() != height * width) throw DimensionError("resize_slice: image size mismatch");
  if (out_height == height && out_width == width) return {image.begin(), image.end()};
  auto coord = [](std::size_t j, std::size_t src, std::size_t dst) {
    if (dst == 1) return 0.5 * static_cast<double>(src - 1);
    return static_cast<double>(j) * static_cast<double>(src - 1) / static_cast<double>(dst - 1);
  };
  std::vector<float> out(out_height * out_width);
  for (std::size_t y = 0; y < out_height; ++y) {
    const double sy = coord(y, height, out_height);
    const auto y0 = static_cast<std::size_t>(std::floor(sy));
    const std::size_t y1 = std::min(y0 + 1, height - 1);
    const double fy = sy - static_cast<double>(y0);
    for (std::size_t x = 0; x < out_width; ++x) {
      const double sx = coord(x, width, out_width);
      const auto x0 = static_cast<std::size_t>(std::floor(sx));
      const std::size_t x1 = std::min(x0 + 1, width - 1);
      const double fx = sx - static_cast<double>(x0);
      const double top = (1.0 - fx) * image[y0 * width + x0] + fx * image[y0 * width + x1];
      const double bottom = (1.0 - fx) * image[y1 * width + x0] + fx * image[y1 * width + x1];
      out[y * out_width + x] = std::clamp(static_cast<float>((1.0 - fy) * top + fy * bottom), 0.0f, 1.0f);
    }
  }
  return out;
}

inline CtVolume resize_volume(const CtVolume& vol, std::size_t out_height, std::size_t out_width) {
  if (vol.height == out_height && vol.width == out_width) return vol;
  CtVolume out(vol.id, vol.depth, out_height, out_width);
  out.label = vol.label;
  for (std::size_t z = 0; z < vol.depth; ++z) {
    auto r = resize_slice(vol.slice(z), vol.height, vol.width, out_height, out_width);
    std::copy(r.begin(), r.end(), out.slice(z).begin());
  }
  return out;
}

/// Volume-level augmentation. Every parameter is drawn once per volume, so
/// all slices of a scan see the same crop, rotation, distortion and
/// photometric transform.
struct AugmentationSpec {
  bool blur = false;
  double blur_sigma_max = 1.0;
  bool noise = false;
  double noise_std_max = 0.02;
  bool contrast = false;
  double contrast_range = 0.2;  // factor in [1 - r, 1 + r]
  bool brightness = false;
  double brightness_range = 0.1;  // offset in [-r, r]
  bool distortion = false;
  double distortion_k_max = 0.1;  // radial coefficient |k| <= max
  bool crop = false;
  double crop_min_fraction = 0.85;  // side length of the crop relative to the slice
  bool rotation = false;
  double rotation_max_degrees = 10.0;
  std::uint64_t seed = 0;

  bool any() const { return blur || noise || contrast || brightness || distortion || crop || rotation; }

  static AugmentationSpec all_enabled() {
    AugmentationSpec s;
    s.blur = s.noise = s.contrast = s.brightness = s.distortion = s.crop = s.rotation = true;
    return s;
  }
};

namespace detail {

inline float sample_nearest(std::span<const float> img, std::size_t h, std::size_t w, double y, double x) {
  const auto iy = static_cast<long long>(std::llround(y));
  const auto ix = static_cast<long long>(std::llround(x));
  if (iy < 0 || ix < 0 || iy >= static_cast<long long>(h) || ix >= static_cast<long long>(w)) return 0.0f;
  return img[static_cast<std::size_t>(iy) * w + static_cast<std::size_t>(ix)];
}

inline std::vector<float> gaussian_blur(std::span<const float> img, std::size_t h, std::size_t w, double sigma) {
  if (sigma <= 1e-6) return {img.begin(), img.end()};
  const int radius = std::max(1, static_cast<int>(std::ceil(3.0 * sigma)));
  std::vector<double> k(2 * radius + 1);
  double total = 0.0;
  for (int i = -radius; i <= radius; ++i) total += k[i + radius] = std::exp(-0.5 * i * i / (sigma * sigma));
  for (double& v : k) v /= total;
  auto clampi = [](long long v, std::size_t n) {
    return static_cast<std::size_t>(std::clamp<long long>(v, 0, static_cast<long long>(n) - 1));
  };
  std::vector<float> tmp(img.size()), out(img.size());
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      double acc = 0.0;
      for (int i = -radius; i <= radius; ++i) acc += k[i + radius] * img[y * w + clampi(static_cast<long long>(x) + i, w)];
      tmp[y * w + x] = static_cast<float>(acc);
    }
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      double acc = 0.0;
      for (int i = -radius; i <= radius; ++i) acc += k[i + radius] * tmp[clampi(static_cast<long long>(y) + i, h) * w + x];
      out[y * w + x] = static_cast<float>(acc);
    }
  return out;
}

}  // namespace detail

inline CtVolume augment(const CtVolume& vol, const AugmentationSpec& spec, Rng& rng) {
  vol.validate();
  if (!spec.any()) return vol;
  const std::size_t h = vol.height, w = vol.width;

  // Draw every per-volume parameter up front, in a fixed order.
  std::size_t crop_h = h, crop_w = w, crop_y = 0, crop_x = 0;
  if (spec.crop) {
    const double f = uniform(rng, std::clamp(spec.crop_min_fraction, 0.0, 1.0), 1.0);
    crop_h = static_cast<std::size_t>(std::llround(f * static_cast<double>(h)));
    crop_w = static_cast<std::size_t>(std::llround(f * static_cast<double>(w)));
    if (crop_h < 8 || crop_w < 8) {
      throw ParameterError("augment: crop region " + std::to_string(crop_h) + "x" + std::to_string(crop_w) +
                           " is smaller than 8x8");
    }
    crop_y = uniform_index(rng, 0, h - crop_h);
    crop_x = uniform_index(rng, 0, w - crop_w);
  }
  const double angle = spec.rotation ? uniform(rng, -spec.rotation_max_degrees, spec.rotation_max_degrees) : 0.0;
  const double k_dist = spec.distortion ? uniform(rng, -spec.distortion_k_max, spec.distortion_k_max) : 0.0;
  const double sigma = spec.blur ? uniform(rng, 0.0, spec.blur_sigma_max) : 0.0;
  const double noise_std = spec.noise ? uniform(rng, 0.0, spec.noise_std_max) : 0.0;
  const double contrast =
      spec.contrast ? uniform(rng, 1.0 - spec.contrast_range, 1.0 + spec.contrast_range) : 1.0;
  const double bright = spec.brightness ? uniform(rng, -spec.brightness_range, spec.brightness_range) : 0.0;

  const double cy = 0.5 * static_cast<double>(h - 1), cx = 0.5 * static_cast<double>(w - 1);
  const double rad = angle * std::numbers::pi / 180.0;
  const double cos_a = std::cos(rad), sin_a = std::sin(rad);
  const double norm = std::max(cy, cx) > 0.0 ? std::max(cy, cx) : 1.0;
  std::normal_distribution<double> gauss(0.0, 1.0);

  CtVolume out(vol.id, vol.depth, h, w);
  out.label = vol.label;
  std::vector<float> work(h * w);
  for (std::size_t z = 0; z < vol.depth; ++z) {
    std::span<const float> src = vol.slice(z);
    std::vector<float> cur(src.begin(), src.end());

    if (spec.crop && (crop_h != h || crop_w != w)) {
      std::vector<float> patch(crop_h * crop_w);
      for (std::size_t y = 0; y < crop_h; ++y)
        for (std::size_t x = 0; x < crop_w; ++x) patch[y * crop_w + x] = cur[(crop_y + y) * w + crop_x + x];
      cur = resize_slice(patch, crop_h, crop_w, h, w);
    }
    if (angle != 0.0 || k_dist != 0.0) {
      // Inverse mapping with nearest-neighbour lookup: undo rotation, then the
      // radial distortion r' = r (1 + k r^2) about the slice centre.
      for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w; ++x) {
          const double dy = static_cast<double>(y) - cy, dx = static_cast<double>(x) - cx;
          double ry = cos_a * dy - sin_a * dx;
          double rx = sin_a * dy + cos_a * dx;
          if (k_dist != 0.0) {
            const double r2 = (ry * ry + rx * rx) / (norm * norm);
            const double f = 1.0 + k_dist * r2;
            ry *= f;
            rx *= f;
          }
          work[y * w + x] = detail::sample_nearest(cur, h, w, cy + ry, cx + rx);
        }
      cur = work;
    }
    if (sigma > 0.0) cur = detail::gaussian_blur(cur, h, w, sigma);
    for (float& v : cur) {
      double t = (static_cast<double>(v) - 0.5) * contrast + 0.5 + bright;
      if (noise_std > 0.0) t += noise_std * gauss(rng);
      v = static_cast<float>(std::clamp(t, 0.0, 1.0));
    }
    std::copy(cur.begin(), cur.end(), out.slice(z).begin());
  }
  return out;
}

}  // namespace ctscan
