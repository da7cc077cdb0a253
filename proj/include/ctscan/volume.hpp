#pragma once

// CT volumes and their on-disk formats.
//
// Raw volume file: "CTV10000", then u32 little-endian D, H, W, then D*H*W
// little-endian float32 voxels in slice-major, row-major order.
// PNG directory: 8- or 16-bit grayscale images, slice order = byte-wise
// lexicographic filename order; optional "label.txt" holding "covid" or
// "non-covid".

#include <png.h>

#include <algorithm>
#include <array>
#include <bit>
#include <cctype>
#include <cmath>
#include <csetjmp>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "ctscan/error.hpp"

namespace ctscan {

enum class Label : int { non_covid = 0, covid = 1 };

inline std::string_view label_name(Label l) { return l == Label::covid ? "covid" : "non-covid"; }

inline std::optional<Label> parse_label(std::string_view text) {
  while (!text.empty() && std::isspace(static_cast<unsigned char>(text.back()))) text.remove_suffix(1);
  while (!text.empty() && std::isspace(static_cast<unsigned char>(text.front()))) text.remove_prefix(1);
  if (text == "covid") return Label::covid;
  if (text == "non-covid") return Label::non_covid;
  return std::nullopt;
}

struct CtVolume {
  std::string id;
  std::size_t depth = 0;
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<float> voxels;
  std::optional<Label> label;

  CtVolume() = default;
  CtVolume(std::string id_, std::size_t d, std::size_t h, std::size_t w, float fill = 0.0f)
      : id(std::move(id_)), depth(d), height(h), width(w), voxels(d * h * w, fill) {}

  std::size_t slice_size() const { return height * width; }
  std::span<const float> slice(std::size_t z) const {
    return std::span<const float>(voxels).subspan(z * slice_size(), slice_size());
  }
  std::span<float> slice(std::size_t z) { return std::span<float>(voxels).subspan(z * slice_size(), slice_size()); }
  float at(std::size_t z, std::size_t y, std::size_t x) const { return voxels[(z * height + y) * width + x]; }
  float& at(std::size_t z, std::size_t y, std::size_t x) { return voxels[(z * height + y) * width + x]; }

  void validate() const {
    if (depth == 0 || height == 0 || width == 0) throw DimensionError("volume " + id + " has an empty dimension");
    if (voxels.size() != depth * height * width) throw DimensionError("volume " + id + " voxel count mismatch");
    for (float v : voxels) {
      if (!(v >= 0.0f && v <= 1.0f)) throw FormatError("volume " + id + " has a voxel outside [0,1]");
    }
  }
};

/// New volume holding the given slices of `src`, in the given order.
inline CtVolume gather_slices(const CtVolume& src, std::span<const std::size_t> indices) {
  CtVolume out(src.id, indices.size(), src.height, src.width);
  out.label = src.label;
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] >= src.depth) throw DimensionError("slice index out of range for volume " + src.id);
    auto from = src.slice(indices[i]);
    std::copy(from.begin(), from.end(), out.slice(i).begin());
  }
  return out;
}

namespace detail {

inline void put_u32(std::ostream& os, std::uint32_t v) {
  const std::array<char, 4> b{static_cast<char>(v & 0xFF), static_cast<char>((v >> 8) & 0xFF),
                              static_cast<char>((v >> 16) & 0xFF), static_cast<char>((v >> 24) & 0xFF)};
  os.write(b.data(), 4);
}

inline std::uint32_t get_u32(const unsigned char* p) {
  return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
         (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}

inline void put_f32(std::ostream& os, float f) { put_u32(os, std::bit_cast<std::uint32_t>(f)); }
inline float get_f32(const unsigned char* p) { return std::bit_cast<float>(get_u32(p)); }

inline std::vector<unsigned char> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  return std::vector<unsigned char>((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

// Classic libpng reader; errors longjmp back to the setjmp below.
inline bool read_png_gray(const char* path, std::vector<std::uint16_t>& pixels, std::uint32_t& width,
                          std::uint32_t& height, int& bit_depth, std::string& why) {
  FILE* fp = std::fopen(path, "rb");
  if (!fp) {
    why = "cannot open file";
    return false;
  }
  // Declared before setjmp so a longjmp never skips their construction.
  std::vector<unsigned char> raw;
  std::vector<png_bytep> rows;
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_read_struct(&png, &info, nullptr);
    std::fclose(fp);
    why = "libpng initialisation failed";
    return false;
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    std::fclose(fp);
    why = "corrupt or truncated PNG";
    return false;
  }
  png_init_io(png, fp);
  png_read_info(png, info);
  const png_uint_32 w = png_get_image_width(png, info);
  const png_uint_32 h = png_get_image_height(png, info);
  const int color = png_get_color_type(png, info);
  int depth = png_get_bit_depth(png, info);
  if (color != PNG_COLOR_TYPE_GRAY) {
    png_destroy_read_struct(&png, &info, nullptr);
    std::fclose(fp);
    why = "not a grayscale PNG";
    return false;
  }
  if (depth < 8) {
    png_set_expand_gray_1_2_4_to_8(png);
    depth = 8;
  }
  if (depth == 16 && std::endian::native == std::endian::little) png_set_swap(png);
  png_read_update_info(png, info);
  const std::size_t bytes_per = depth == 16 ? 2 : 1;
  raw.resize(static_cast<std::size_t>(w) * h * bytes_per);
  rows.resize(h);
  for (png_uint_32 y = 0; y < h; ++y) rows[y] = raw.data() + static_cast<std::size_t>(y) * w * bytes_per;
  png_read_image(png, rows.data());
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);
  std::fclose(fp);
  pixels.resize(static_cast<std::size_t>(w) * h);
  for (std::size_t i = 0; i < pixels.size(); ++i) {
    if (bytes_per == 2) {
      std::uint16_t v;
      std::memcpy(&v, raw.data() + 2 * i, 2);
      pixels[i] = v;
    } else {
      pixels[i] = raw[i];
    }
  }
  width = w;
  height = h;
  bit_depth = depth;
  return true;
}

inline std::optional<Label> read_label_file(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) return std::nullopt;
  std::ifstream in(path);
  std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  auto label = parse_label(text);
  if (!label) throw FormatError(path.string() + ": label must be \"covid\" or \"non-covid\"");
  return label;
}

}  // namespace detail

/// Label file stored next to a raw volume: "<stem>.label".
inline std::filesystem::path raw_label_path(const std::filesystem::path& raw_path) {
  auto p = raw_path;
  p.replace_extension(".label");
  return p;
}

inline void write_raw_volume(const std::filesystem::path& path, const CtVolume& vol) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot write " + path.string());
  os.write("CTV10000", 8);
  detail::put_u32(os, static_cast<std::uint32_t>(vol.depth));
  detail::put_u32(os, static_cast<std::uint32_t>(vol.height));
  detail::put_u32(os, static_cast<std::uint32_t>(vol.width));
  for (float v : vol.voxels) detail::put_f32(os, v);
  if (!os) throw IoError("write failed for " + path.string());
}

/// Scales voxels into [0,1]. Data already inside the unit range is untouched,
/// anything else is min-max rescaled over the observed range.
inline void normalize_unit_range(CtVolume& vol, const std::string& source) {
  float lo = vol.voxels.front(), hi = vol.voxels.front();
  for (float v : vol.voxels) {
    if (!std::isfinite(v)) throw FormatError(source + ": non-finite voxel");
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  if (lo >= 0.0f && hi <= 1.0f) return;
  const float span = hi - lo;
  for (float& v : vol.voxels) v = span > 0.0f ? (v - lo) / span : 0.0f;
}

inline CtVolume read_raw_volume(const std::filesystem::path& path) {
  const auto bytes = detail::read_file(path);
  const std::string name = path.string();
  if (bytes.size() < 20 || std::memcmp(bytes.data(), "CTV10000", 8) != 0) {
    throw FormatError(name + ": missing CTV10000 header");
  }
  const std::uint32_t d = detail::get_u32(bytes.data() + 8);
  const std::uint32_t h = detail::get_u32(bytes.data() + 12);
  const std::uint32_t w = detail::get_u32(bytes.data() + 16);
  if (d == 0 || h == 0 || w == 0) throw FormatError(name + ": zero dimension in header");
  const std::size_t count = static_cast<std::size_t>(d) * h * w;
  if (bytes.size() != 20 + 4 * count) {
    throw FormatError(name + ": expected " + std::to_string(20 + 4 * count) + " bytes, found " +
                      std::to_string(bytes.size()));
  }
  CtVolume vol(path.stem().string(), d, h, w);
  for (std::size_t i = 0; i < count; ++i) vol.voxels[i] = detail::get_f32(bytes.data() + 20 + 4 * i);
  normalize_unit_range(vol, name);
  vol.label = detail::read_label_file(raw_label_path(path));
  return vol;
}

inline CtVolume read_png_directory(const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  if (!fs::is_directory(dir)) throw IoError(dir.string() + " is not a directory");
  std::vector<std::string> names;
  for (const auto& entry : fs::directory_iterator(dir)) {
    if (entry.is_regular_file() && entry.path().extension() == ".png") names.push_back(entry.path().filename().string());
  }
  if (names.empty()) throw FormatError(dir.string() + ": no PNG slices found");
  std::sort(names.begin(), names.end());  // std::string compares byte-wise

  CtVolume vol;
  vol.id = dir.filename().empty() ? dir.parent_path().filename().string() : dir.filename().string();
  vol.depth = names.size();
  std::vector<std::uint16_t> pixels;
  for (std::size_t z = 0; z < names.size(); ++z) {
    const fs::path file = dir / names[z];
    std::uint32_t w = 0, h = 0;
    int bit_depth = 0;
    std::string why;
    if (!detail::read_png_gray(file.string().c_str(), pixels, w, h, bit_depth, why)) {
      throw FormatError(file.string() + ": " + why);
    }
    if (z == 0) {
      vol.height = h;
      vol.width = w;
      vol.voxels.resize(vol.depth * h * w);
    } else if (h != vol.height || w != vol.width) {
      throw FormatError(file.string() + ": slice size " + std::to_string(h) + "x" + std::to_string(w) +
                        " differs from " + std::to_string(vol.height) + "x" + std::to_string(vol.width));
    }
    const float scale = bit_depth == 16 ? 1.0f / 65535.0f : 1.0f / 255.0f;
    auto dst = vol.slice(z);
    for (std::size_t i = 0; i < pixels.size(); ++i) dst[i] = static_cast<float>(pixels[i]) * scale;
  }
  vol.label = detail::read_label_file(dir / "label.txt");
  return vol;
}

enum class SourceKind { png_dir, raw };

inline CtVolume load_volume(const std::filesystem::path& path, SourceKind kind) {
  return kind == SourceKind::raw ? read_raw_volume(path) : read_png_directory(path);
}

/// Directories are PNG stacks, everything else is a raw volume file.
inline CtVolume load_volume(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw IoError("scan not found: " + path.string());
  return load_volume(path, std::filesystem::is_directory(path) ? SourceKind::png_dir : SourceKind::raw);
}

}  // namespace ctscan
