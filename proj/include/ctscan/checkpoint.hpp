#pragma once

// Binary checkpoints: "CCAT0001", then per tensor a u32 name length, the
// name, u32 rank, u32 dims and little-endian float32 values. The model
// config travels in a "key = value" companion file next to it.

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "ctscan/config.hpp"
#include "ctscan/error.hpp"
#include "ctscan/model.hpp"
#include "ctscan/tensor.hpp"
#include "ctscan/volume.hpp"

namespace ctscan {

inline constexpr std::array<char, 8> kCheckpointMagic{'C', 'C', 'A', 'T', '0', '0', '0', '1'};

struct CheckpointEntry {
  std::string name;
  Shape shape;
  std::vector<float> values;
};

namespace detail {

inline void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFFu));
}

inline void put_f32(std::string& out, float f) { put_u32(out, std::bit_cast<std::uint32_t>(f)); }

/// Write to a sibling temp file, then rename, so readers never see a torn file.
inline void write_file_atomic(const std::filesystem::path& path, const std::string& bytes) {
  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw IoError("cannot write " + tmp.string());
    os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!os) throw IoError("write failed for " + tmp.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw IoError("cannot rename " + tmp.string() + " to " + path.string() + ": " + ec.message());
}

}  // namespace detail

inline std::string encode_checkpoint(const std::vector<CheckpointEntry>& entries) {
  std::string out(kCheckpointMagic.begin(), kCheckpointMagic.end());
  for (const auto& e : entries) {
    if (shape_numel(e.shape) != e.values.size()) throw DimensionError("checkpoint entry " + e.name + ": shape/value mismatch");
    detail::put_u32(out, static_cast<std::uint32_t>(e.name.size()));
    out += e.name;
    detail::put_u32(out, static_cast<std::uint32_t>(e.shape.size()));
    for (std::size_t d : e.shape) detail::put_u32(out, static_cast<std::uint32_t>(d));
    for (float f : e.values) detail::put_f32(out, f);
  }
  return out;
}

inline std::vector<CheckpointEntry> decode_checkpoint(const std::string& bytes, const std::string& source) {
  const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
  const std::size_t n = bytes.size();
  if (n < kCheckpointMagic.size() || std::memcmp(p, kCheckpointMagic.data(), kCheckpointMagic.size()) != 0) {
    throw FormatError(source + ": bad checkpoint magic");
  }
  std::size_t pos = kCheckpointMagic.size();
  auto need = [&](std::size_t k) {
    if (n - pos < k) throw FormatError(source + ": truncated checkpoint at byte " + std::to_string(pos));
  };
  std::vector<CheckpointEntry> out;
  while (pos < n) {
    CheckpointEntry e;
    need(4);
    const std::uint32_t len = detail::get_u32(p + pos);
    pos += 4;
    need(len);
    e.name.assign(bytes, pos, len);
    pos += len;
    need(4);
    const std::uint32_t rank = detail::get_u32(p + pos);
    pos += 4;
    need(4ull * rank);
    std::size_t count = 1;
    for (std::uint32_t i = 0; i < rank; ++i, pos += 4) {
      e.shape.push_back(detail::get_u32(p + pos));
      count *= e.shape.back();
    }
    need(4 * count);
    e.values.resize(count);
    for (std::size_t i = 0; i < count; ++i, pos += 4) e.values[i] = detail::get_f32(p + pos);
    out.push_back(std::move(e));
  }
  return out;
}

inline void write_checkpoint(const std::filesystem::path& path, const std::vector<CheckpointEntry>& entries) {
  detail::write_file_atomic(path, encode_checkpoint(entries));
}

inline std::vector<CheckpointEntry> read_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint " + path.string());
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode_checkpoint(bytes, path.string());
}

template <class T>
CheckpointEntry to_entry(const std::string& name, const Tensor<T>& t) {
  CheckpointEntry e{name, t.shape(), {}};
  e.values.reserve(t.numel());
  for (const T& v : t.data()) e.values.push_back(static_cast<float>(v));
  return e;
}

template <class T, class Params>
std::vector<CheckpointEntry> parameter_entries(const Params& params) {
  std::vector<CheckpointEntry> out;
  for (const auto& [name, t] : named_parameters<T>(params)) out.push_back(to_entry(name, t));
  return out;
}

/// Copies checkpoint values into `params`. Every parameter must be present
/// with its exact shape; all discrepancies are listed in one error. Entries
/// whose name starts with `ignore_prefix` are skipped.
template <class T, class Params>
void load_parameter_entries(Params& params, const std::vector<CheckpointEntry>& entries,
                            const std::string& ignore_prefix = "optim.") {
  std::map<std::string, const CheckpointEntry*> by_name;
  for (const auto& e : entries) {
    if (!ignore_prefix.empty() && e.name.rfind(ignore_prefix, 0) == 0) continue;
    by_name[e.name] = &e;
  }
  std::string report;
  visit_parameters(params, [&](const std::string& name, Tensor<T>& t) {
    auto it = by_name.find(name);
    if (it == by_name.end()) {
      report += "\n  missing " + name + " " + shape_str(t.shape());
      return;
    }
    if (it->second->shape != t.shape()) {
      report += "\n  " + name + ": checkpoint " + shape_str(it->second->shape) + " vs model " + shape_str(t.shape());
    }
    by_name.erase(it);
  });
  for (const auto& [name, e] : by_name) report += "\n  unexpected " + name + " " + shape_str(e->shape);
  if (!report.empty()) throw FormatError("checkpoint does not match the model config:" + report);

  std::map<std::string, const CheckpointEntry*> all;
  for (const auto& e : entries) all[e.name] = &e;
  visit_parameters(params, [&](const std::string& name, Tensor<T>& t) {
    const auto& src = all.at(name)->values;
    auto dst = t.mutable_data();
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = static_cast<T>(src[i]);
  });
}

// Companion config files.

inline std::filesystem::path companion_path(const std::filesystem::path& checkpoint) {
  std::filesystem::path p = checkpoint;
  p += ".cfg";
  return p;
}

inline KeyValues to_key_values(const CcatConfig& c) {
  KeyValues kv;
  kv.set("model", "ccat");
  kv.set("ccat.input_height", std::to_string(c.input_height));
  kv.set("ccat.input_width", std::to_string(c.input_width));
  kv.set("ccat.backbone_widths", kv::from_size_list(c.backbone_widths));
  kv.set("ccat.d_model", std::to_string(c.d_model));
  kv.set("ccat.heads", std::to_string(c.heads));
  kv.set("ccat.depth", std::to_string(c.depth));
  kv.set("ccat.slices", std::to_string(c.slices));
  kv.set("ccat.slice_stride", std::to_string(c.slice_stride));
  kv.set("ccat.spatial_pe", kv::from_bool(c.spatial_pe));
  kv.set("ccat.sequence_pe", kv::from_bool(c.sequence_pe));
  kv.set("ccat.hidden1", std::to_string(c.hidden1));
  kv.set("ccat.hidden2", std::to_string(c.hidden2));
  kv.set("ccat.standardize_input", kv::from_bool(c.standardize_input));
  return kv;
}

inline void read_ccat_config(const KeyValues& src, CcatConfig& c) {
  kv::read(src, "ccat.input_height", c.input_height);
  kv::read(src, "ccat.input_width", c.input_width);
  kv::read(src, "ccat.backbone_widths", c.backbone_widths);
  kv::read(src, "ccat.d_model", c.d_model);
  kv::read(src, "ccat.heads", c.heads);
  kv::read(src, "ccat.depth", c.depth);
  kv::read(src, "ccat.slices", c.slices);
  kv::read(src, "ccat.slice_stride", c.slice_stride);
  kv::read(src, "ccat.spatial_pe", c.spatial_pe);
  kv::read(src, "ccat.sequence_pe", c.sequence_pe);
  kv::read(src, "ccat.hidden1", c.hidden1);
  kv::read(src, "ccat.hidden2", c.hidden2);
  kv::read(src, "ccat.standardize_input", c.standardize_input);
}

inline KeyValues to_key_values(const ScorerConfig& c) {
  KeyValues kv;
  kv.set("model", "dwcc-scorer");
  kv.set("scorer.input_height", std::to_string(c.input_height));
  kv.set("scorer.input_width", std::to_string(c.input_width));
  kv.set("scorer.backbone_widths", kv::from_size_list(c.backbone_widths));
  kv.set("scorer.hidden", std::to_string(c.hidden));
  kv.set("scorer.standardize_input", kv::from_bool(c.standardize_input));
  return kv;
}

inline void read_scorer_config(const KeyValues& src, ScorerConfig& c) {
  kv::read(src, "scorer.input_height", c.input_height);
  kv::read(src, "scorer.input_width", c.input_width);
  kv::read(src, "scorer.backbone_widths", c.backbone_widths);
  kv::read(src, "scorer.hidden", c.hidden);
  kv::read(src, "scorer.standardize_input", c.standardize_input);
}

inline void expect_model_kind(const KeyValues& companion, const std::string& kind, const std::string& source) {
  const auto m = companion.get("model");
  if (!m || *m != kind) {
    throw FormatError(source + ": expected a " + kind + " checkpoint, found " + (m ? *m : std::string("no model key")));
  }
}

/// Saves a model plus optional extra tensors (optimizer state) and its companion.
template <class T, class Model>
void save_model(const std::filesystem::path& path, const Model& model, const std::vector<CheckpointEntry>& extra = {}) {
  auto entries = parameter_entries<T>(model.params);
  entries.insert(entries.end(), extra.begin(), extra.end());
  to_key_values(model.config).write(companion_path(path));
  write_checkpoint(path, entries);
}

template <class T>
CcatModel<T> load_ccat_model(const std::filesystem::path& path) {
  const auto companion = KeyValues::read(companion_path(path));
  expect_model_kind(companion, "ccat", companion_path(path).string());
  CcatConfig cfg;
  read_ccat_config(companion, cfg);
  Rng rng = make_rng(0);
  auto model = CcatModel<T>::create(cfg, rng);
  load_parameter_entries<T>(model.params, read_checkpoint(path));
  return model;
}

template <class T>
ScorerModel<T> load_scorer_model(const std::filesystem::path& path) {
  const auto companion = KeyValues::read(companion_path(path));
  expect_model_kind(companion, "dwcc-scorer", companion_path(path).string());
  ScorerConfig cfg;
  read_scorer_config(companion, cfg);
  Rng rng = make_rng(0);
  auto model = ScorerModel<T>::create(cfg, rng);
  load_parameter_entries<T>(model.params, read_checkpoint(path));
  return model;
}

}  // namespace ctscan
