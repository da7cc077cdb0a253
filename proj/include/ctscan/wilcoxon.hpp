#pragma once

// Wilcoxon signed-rank test with an exact null distribution for small
// samples and a tie-corrected normal approximation for large ones.
//
// Tied absolute values receive midranks. Doubling every midrank makes them
// integers, so the exact null distribution of the doubled W+ is the subset-sum
// generating function of the doubled ranks, each rank entering with
// probability 1/2.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <numeric>
#include <span>
#include <string_view>
#include <vector>

#include "ctscan/error.hpp"

namespace ctscan {

enum class Alternative { greater, less, two_sided };
enum class PMethod { exact, normal_approx };
enum class Direction { positive, negative, tied };

inline std::string_view method_name(PMethod m) { return m == PMethod::exact ? "exact" : "normal_approx"; }
inline std::string_view direction_name(Direction d) {
  switch (d) {
    case Direction::positive: return "positive";
    case Direction::negative: return "negative";
    default: return "tied";
  }
}

inline constexpr std::size_t kExactLimit = 30;

struct WilcoxonResult {
  double w_plus = 0.0;
  double w_minus = 0.0;
  std::size_t n_eff = 0;
  double p_value = 1.0;    // for the requested alternative
  double p_greater = 1.0;  // P(W+ >= observed) under H0
  double p_less = 1.0;     // P(W+ <= observed) under H0
  PMethod method = PMethod::exact;
  Direction direction = Direction::tied;
  Alternative alternative = Alternative::greater;
};

/// Non-zero differences ranked by |d| ascending with midranks for ties.
struct SignedRanks {
  std::vector<std::uint64_t> doubled_ranks;  // 2 * midrank, always integral
  std::vector<bool> positive;
  std::vector<std::size_t> tie_sizes;  // size of every tie group, singletons included

  std::size_t size() const { return doubled_ranks.size(); }
  std::uint64_t doubled_w_plus() const {
    std::uint64_t s = 0;
    for (std::size_t i = 0; i < size(); ++i) s += positive[i] ? doubled_ranks[i] : 0;
    return s;
  }
  std::uint64_t doubled_total() const { return std::accumulate(doubled_ranks.begin(), doubled_ranks.end(), std::uint64_t{0}); }
};

inline SignedRanks signed_ranks(std::span<const double> d) {
  std::vector<double> mags;
  std::vector<bool> pos;
  for (double v : d) {
    if (!std::isfinite(v)) throw NumericError("wilcoxon: non-finite difference");
    if (v == 0.0) continue;
    mags.push_back(std::abs(v));
    pos.push_back(v > 0.0);
  }
  const std::size_t n = mags.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return mags[a] < mags[b]; });
  SignedRanks out;
  out.doubled_ranks.resize(n);
  out.positive = pos;
  std::size_t i = 0;
  while (i < n) {
    std::size_t j = i;
    while (j + 1 < n && mags[order[j + 1]] == mags[order[i]]) ++j;
    // ranks i+1 .. j+1 share the midrank (i + j + 2) / 2; doubled: i + j + 2
    const std::uint64_t doubled = static_cast<std::uint64_t>(i + j + 2);
    for (std::size_t k = i; k <= j; ++k) out.doubled_ranks[order[k]] = doubled;
    out.tie_sizes.push_back(j - i + 1);
    i = j + 1;
  }
  return out;
}

/// counts[s] = number of sign assignments whose doubled W+ equals s.
inline std::vector<std::uint64_t> exact_null_counts(std::span<const std::uint64_t> doubled_ranks) {
  if (doubled_ranks.size() > 62) throw ParameterError("exact_null_counts: n too large for exact enumeration");
  const std::uint64_t total = std::accumulate(doubled_ranks.begin(), doubled_ranks.end(), std::uint64_t{0});
  std::vector<std::uint64_t> counts(total + 1, 0);
  counts[0] = 1;
  std::uint64_t reach = 0;
  for (std::uint64_t r : doubled_ranks) {
    for (std::uint64_t s = reach + 1; s-- > 0;) {
      if (counts[s]) counts[s + r] += counts[s];
    }
    reach += r;
  }
  return counts;
}

struct TailProbabilities {
  double greater = 1.0;
  double less = 1.0;
};

inline TailProbabilities exact_tails(const SignedRanks& ranks) {
  const std::size_t n = ranks.size();
  if (n == 0) return {};
  const auto counts = exact_null_counts(ranks.doubled_ranks);
  const std::uint64_t obs = ranks.doubled_w_plus();
  std::uint64_t ge = 0, le = 0;
  for (std::uint64_t s = 0; s < counts.size(); ++s) {
    if (s >= obs) ge += counts[s];
    if (s <= obs) le += counts[s];
  }
  const double denom = std::ldexp(1.0, static_cast<int>(n));
  return {static_cast<double>(ge) / denom, static_cast<double>(le) / denom};
}

inline double standard_normal_cdf(double z) { return 0.5 * std::erfc(-z / std::sqrt(2.0)); }

/// Normal approximation with tie-corrected variance and a 1/2 continuity
/// correction toward the mean.
inline TailProbabilities normal_tails(const SignedRanks& ranks) {
  const double n = static_cast<double>(ranks.size());
  if (ranks.size() == 0) return {};
  const double w_plus = static_cast<double>(ranks.doubled_w_plus()) / 2.0;
  const double mu = n * (n + 1.0) / 4.0;
  double var = n * (n + 1.0) * (2.0 * n + 1.0) / 24.0;
  for (std::size_t t : ranks.tie_sizes) {
    const double tt = static_cast<double>(t);
    var -= (tt * tt * tt - tt) / 48.0;
  }
  const double sigma = std::sqrt(var);
  const double tiny = std::numeric_limits<double>::min();
  TailProbabilities p;
  p.greater = std::clamp(1.0 - standard_normal_cdf((w_plus - mu - 0.5) / sigma), tiny, 1.0);
  p.less = std::clamp(standard_normal_cdf((w_plus - mu + 0.5) / sigma), tiny, 1.0);
  return p;
}

inline WilcoxonResult wilcoxon_signed_rank(std::span<const double> d, Alternative alt = Alternative::greater,
                                           std::size_t exact_limit = kExactLimit) {
  if (d.empty()) throw ContractError("wilcoxon_signed_rank: at least one difference required");
  const SignedRanks ranks = signed_ranks(d);
  WilcoxonResult r;
  r.alternative = alt;
  r.n_eff = ranks.size();
  const std::uint64_t dw = ranks.doubled_w_plus();
  r.w_plus = static_cast<double>(dw) / 2.0;
  r.w_minus = static_cast<double>(ranks.doubled_total() - dw) / 2.0;
  if (r.n_eff == 0) {
    r.direction = Direction::tied;
    r.p_value = r.p_greater = r.p_less = 1.0;
    return r;
  }
  r.direction = r.w_plus > r.w_minus ? Direction::positive
                : r.w_plus < r.w_minus ? Direction::negative
                                       : Direction::tied;
  r.method = r.n_eff <= exact_limit ? PMethod::exact : PMethod::normal_approx;
  const TailProbabilities tails = r.method == PMethod::exact ? exact_tails(ranks) : normal_tails(ranks);
  r.p_greater = tails.greater;
  r.p_less = tails.less;
  switch (alt) {
    case Alternative::greater: r.p_value = r.p_greater; break;
    case Alternative::less: r.p_value = r.p_less; break;
    case Alternative::two_sided: r.p_value = std::min(1.0, 2.0 * std::min(r.p_greater, r.p_less)); break;
  }
  return r;
}

}  // namespace ctscan
