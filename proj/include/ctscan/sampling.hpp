#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "ctscan/error.hpp"
#include "ctscan/rng.hpp"

namespace ctscan {

enum class SamplingMode { center_fraction, strided };

/// Slice selection for both pipelines. center_fraction reads `fraction` only;
/// strided reads `slices` (L_s) and `stride` (L_freq) only.
struct SamplingSpec {
  SamplingMode mode = SamplingMode::center_fraction;
  double fraction = 0.4;
  std::size_t slices = 16;
  std::size_t stride = 2;
  std::uint64_t seed = 0;
};

struct IndexRange {
  std::size_t start = 0;
  std::size_t end = 0;
  std::size_t size() const { return end - start; }
  bool operator==(const IndexRange&) const = default;
};

/// Contiguous central window: n = max(1, round(D * fraction)) slices starting
/// at floor((D - n) / 2).
inline IndexRange center_fraction_indices(std::size_t depth, double fraction) {
  if (depth == 0) throw ParameterError("center_fraction_indices: depth must be >= 1");
  if (!(fraction > 0.0 && fraction <= 1.0)) {
    throw ParameterError("center_fraction_indices: fraction must lie in (0, 1], got " + std::to_string(fraction));
  }
  const auto rounded = static_cast<std::size_t>(std::llround(static_cast<double>(depth) * fraction));
  const std::size_t n = std::min(depth, std::max<std::size_t>(1, rounded));
  const std::size_t start = (depth - n) / 2;
  return {start, start + n};
}

namespace detail {

inline std::vector<std::size_t> strided_window(std::size_t slices, std::size_t stride, std::size_t start) {
  std::vector<std::size_t> idx(slices);
  for (std::size_t k = 0; k < slices; ++k) idx[k] = start + k * stride;
  return idx;
}

// Short volumes: every slice once, then the last index repeated up to L_s.
inline std::vector<std::size_t> padded_all(std::size_t depth, std::size_t slices) {
  std::vector<std::size_t> idx(slices);
  for (std::size_t k = 0; k < slices; ++k) idx[k] = std::min(k, depth - 1);
  return idx;
}

inline void check_strided_args(std::size_t depth, std::size_t slices, std::size_t stride) {
  if (depth == 0) throw ParameterError("strided_sample: depth must be >= 1");
  if (slices == 0) throw ParameterError("strided_sample: L_s must be >= 1");
  if (stride == 0) throw ParameterError("strided_sample: L_freq must be >= 1");
}

}  // namespace detail

/// L_s indices spaced L_freq apart with a uniformly random start. Falls back
/// to stride 1 when the strided span does not fit, and to repetition of the
/// last slice when even L_s consecutive slices do not fit.
inline std::vector<std::size_t> strided_sample(std::size_t depth, std::size_t slices, std::size_t stride, Rng& rng) {
  detail::check_strided_args(depth, slices, stride);
  const std::size_t span = (slices - 1) * stride + 1;
  if (depth >= span) return detail::strided_window(slices, stride, uniform_index(rng, 0, depth - span));
  if (depth >= slices) return detail::strided_window(slices, 1, uniform_index(rng, 0, depth - slices));
  return detail::padded_all(depth, slices);
}

/// Deterministic evaluation-time counterpart of strided_sample: the same
/// window rules with the start centred instead of drawn.
inline std::vector<std::size_t> centered_strided_sample(std::size_t depth, std::size_t slices, std::size_t stride) {
  detail::check_strided_args(depth, slices, stride);
  const std::size_t span = (slices - 1) * stride + 1;
  if (depth >= span) return detail::strided_window(slices, stride, (depth - span) / 2);
  if (depth >= slices) return detail::strided_window(slices, 1, (depth - slices) / 2);
  return detail::padded_all(depth, slices);
}

}  // namespace ctscan
