#pragma once

// Scan-level decisions from per-slice scores: centre-window scoring, signed
// evidence d = 2p - 1, Tukey outlier removal, and a one-sided Wilcoxon
// signed-rank test on the remaining evidence.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "ctscan/error.hpp"
#include "ctscan/sampling.hpp"
#include "ctscan/volume.hpp"
#include "ctscan/wilcoxon.hpp"

namespace ctscan {

struct SliceScore {
  std::size_t slice_index = 0;
  double p_covid = 0.0;
};

struct SliceScoreSet {
  std::string scan_id;
  std::vector<SliceScore> entries;

  void validate() const {
    if (entries.empty()) throw ContractError("score set " + scan_id + " is empty");
    for (std::size_t i = 0; i < entries.size(); ++i) {
      if (!(entries[i].p_covid >= 0.0 && entries[i].p_covid <= 1.0)) {
        throw ContractError("score set " + scan_id + ": probability outside [0,1]");
      }
      if (i > 0 && entries[i].slice_index <= entries[i - 1].slice_index) {
        throw ContractError("score set " + scan_id + ": slice indices must be unique and sorted");
      }
    }
  }
};

struct ScanDecision {
  std::string scan_id;
  Label label = Label::non_covid;
  double confidence = 0.5;  // q: oriented so that high means covid
  double p_value = 1.0;
  std::size_t n_slices_used = 0;
  PMethod method = PMethod::exact;
  Direction direction = Direction::tied;
  double alpha = 0.05;

  bool significant() const { return p_value < alpha; }
};

/// Maps one H x W slice to P(covid).
using SliceScorer = std::function<double(std::span<const float> slice, std::size_t height, std::size_t width)>;

inline SliceScoreSet score_slices(const SliceScorer& scorer, const CtVolume& volume, double fraction) {
  volume.validate();
  const IndexRange range = center_fraction_indices(volume.depth, fraction);
  SliceScoreSet set;
  set.scan_id = volume.id;
  set.entries.reserve(range.size());
  for (std::size_t z = range.start; z < range.end; ++z) {
    const double p = scorer(volume.slice(z), volume.height, volume.width);
    if (!(p >= 0.0 && p <= 1.0)) throw ContractError("scorer returned a value outside [0,1] for slice " + std::to_string(z));
    set.entries.push_back({z, p});
  }
  return set;
}

inline SliceScoreSet score_slices(const SliceScorer& scorer, const CtVolume& volume, const SamplingSpec& spec) {
  return score_slices(scorer, volume, spec.fraction);
}

/// d_i = p_i - (1 - p_i); zero means the slice carries no net evidence.
inline std::vector<double> paired_differences(const SliceScoreSet& scores) {
  if (scores.entries.empty()) throw ContractError("paired_differences: empty score set");
  std::vector<double> d;
  d.reserve(scores.entries.size());
  for (const auto& e : scores.entries) d.push_back(e.p_covid - (1.0 - e.p_covid));
  return d;
}

/// Linear-interpolation quantile of sorted data (position q * (n - 1)).
inline double quantile_sorted(std::span<const double> sorted, double q) {
  const double pos = q * static_cast<double>(sorted.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, sorted.size() - 1);
  const double frac = pos - static_cast<double>(lo);
  return sorted[lo] + frac * (sorted[hi] - sorted[lo]);
}

inline constexpr std::size_t kMinAfterOutlierRemoval = 5;

/// Tukey fences [Q1 - 1.5 IQR, Q3 + 1.5 IQR]. The input is returned unchanged
/// when fewer than five values would survive.
inline std::vector<double> remove_outliers(std::span<const double> d) {
  if (d.empty()) throw ContractError("remove_outliers: empty input");
  std::vector<double> sorted(d.begin(), d.end());
  std::sort(sorted.begin(), sorted.end());
  const double q1 = quantile_sorted(sorted, 0.25);
  const double q3 = quantile_sorted(sorted, 0.75);
  const double iqr = q3 - q1;
  const double lo = q1 - 1.5 * iqr, hi = q3 + 1.5 * iqr;
  std::vector<double> kept;
  kept.reserve(d.size());
  for (double v : d) {
    if (v >= lo && v <= hi) kept.push_back(v);
  }
  if (kept.size() < kMinAfterOutlierRemoval) return {d.begin(), d.end()};
  return kept;
}

/// Label by the sign of W+ - W- (ties are non-covid). The confidence is the
/// null probability of evidence weaker than observed: 1 - P(W+ >= w) on the
/// covid side, P(W+ <= w) on the non-covid side, 1/2 without evidence.
inline ScanDecision decide_scan(const WilcoxonResult& result, double alpha = 0.05) {
  if (!(alpha > 0.0 && alpha <= 0.5)) throw ParameterError("decide_scan: alpha must lie in (0, 0.5]");
  ScanDecision dec;
  dec.alpha = alpha;
  dec.p_value = result.p_value;
  dec.n_slices_used = result.n_eff;
  dec.method = result.method;
  dec.direction = result.direction;
  if (result.n_eff == 0) {
    dec.label = Label::non_covid;
    dec.confidence = 0.5;
    return dec;
  }
  if (result.w_plus > result.w_minus) {
    dec.label = Label::covid;
    dec.confidence = 1.0 - result.p_greater;
  } else if (result.w_plus == result.w_minus) {
    dec.label = Label::non_covid;
    dec.confidence = 1.0 - result.p_greater;
  } else {
    dec.label = Label::non_covid;
    dec.confidence = result.p_less;
  }
  return dec;
}

/// Statistical half of the pipeline, starting from an existing score set.
inline ScanDecision dwcc_decide(const SliceScoreSet& scores, double alpha = 0.05) {
  scores.validate();
  const std::vector<double> d = remove_outliers(paired_differences(scores));
  ScanDecision dec = decide_scan(wilcoxon_signed_rank(d, Alternative::greater), alpha);
  dec.scan_id = scores.scan_id;
  return dec;
}

inline ScanDecision dwcc_classify(const SliceScorer& scorer, const CtVolume& volume, double fraction,
                                  double alpha = 0.05) {
  return dwcc_decide(score_slices(scorer, volume, fraction), alpha);
}

// Score-set interchange: "slice_index<TAB>p_covid" lines, '#' comments.

inline void write_score_set(const std::filesystem::path& path, const SliceScoreSet& scores) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw IoError("cannot write " + path.string());
  char buf[64];
  for (const auto& e : scores.entries) {
    std::snprintf(buf, sizeof buf, "%zu\t%.17g\n", e.slice_index, e.p_covid);
    os << buf;
  }
}

inline SliceScoreSet read_score_set(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  SliceScoreSet set;
  set.scan_id = path.stem().string();
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty() || line[0] == '#') continue;
    const auto tab = line.find('\t');
    if (tab == std::string::npos) throw FormatError(path.string() + ":" + std::to_string(lineno) + ": expected TAB");
    try {
      std::size_t used = 0;
      const unsigned long long idx = std::stoull(line.substr(0, tab), &used);
      if (used != tab) throw std::invalid_argument("index");
      const std::string rest = line.substr(tab + 1);
      const double p = std::stod(rest, &used);
      if (used != rest.size() && rest.find_first_not_of(" \r", used) != std::string::npos) throw std::invalid_argument("p");
      set.entries.push_back({static_cast<std::size_t>(idx), p});
    } catch (const std::logic_error&) {
      throw FormatError(path.string() + ":" + std::to_string(lineno) + ": malformed score line");
    }
  }
  try {
    set.validate();
  } catch (const ContractError& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
  return set;
}

inline std::string format_decision_report(const ScanDecision& dec) {
  char buf[160];
  std::snprintf(buf, sizeof buf, "label=%s q=%.6g p=%.6g n=%zu method=%s", std::string(label_name(dec.label)).c_str(),
                dec.confidence, dec.p_value, dec.n_slices_used, std::string(method_name(dec.method)).c_str());
  return buf;
}

inline void append_decision_report(const std::filesystem::path& path, const ScanDecision& dec) {
  std::ofstream os(path, std::ios::app);
  if (!os) throw IoError("cannot append to " + path.string());
  os << "# " << format_decision_report(dec) << '\n';
}

}  // namespace ctscan
