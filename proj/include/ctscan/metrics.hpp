#pragma once

#include <algorithm>
#include <array>
#include <cstdio>
#include <numeric>
#include <string>
#include <utility>
#include <vector>

#include "ctscan/error.hpp"
#include "ctscan/volume.hpp"

namespace ctscan {

struct MetricsReport {
  std::array<std::array<std::size_t, 2>, 2> confusion{};  // [truth][prediction]
  double accuracy = 0.0;
  double macro_precision = 0.0;
  double macro_recall = 0.0;
  double macro_f1 = 0.0;

  std::size_t total() const { return confusion[0][0] + confusion[0][1] + confusion[1][0] + confusion[1][1]; }
};

/// Per-class precision, recall and F1 averaged over the classes that occur in
/// the truth or the predictions. A ratio whose denominator is zero counts as 0.
inline MetricsReport compute_metrics(const std::vector<std::pair<Label, Label>>& truth_pred) {
  if (truth_pred.empty()) throw ContractError("compute_metrics: no predictions");
  MetricsReport r;
  for (const auto& [t, p] : truth_pred) ++r.confusion[static_cast<int>(t)][static_cast<int>(p)];
  const double n = static_cast<double>(truth_pred.size());
  r.accuracy = static_cast<double>(r.confusion[0][0] + r.confusion[1][1]) / n;
  auto ratio = [](double a, double b) { return b > 0.0 ? a / b : 0.0; };
  double classes = 0.0;
  for (int c = 0; c < 2; ++c) {
    const double tp = static_cast<double>(r.confusion[c][c]);
    const double fp = static_cast<double>(r.confusion[1 - c][c]);
    const double fn = static_cast<double>(r.confusion[c][1 - c]);
    if (tp + fp + fn == 0.0) continue;  // class never seen: a single-scan set scores 1.0
    classes += 1.0;
    const double p = ratio(tp, tp + fp), rc = ratio(tp, tp + fn);
    r.macro_precision += p;
    r.macro_recall += rc;
    r.macro_f1 += ratio(2.0 * p * rc, p + rc);
  }
  r.macro_precision /= classes;
  r.macro_recall /= classes;
  r.macro_f1 /= classes;
  return r;
}

inline MetricsReport compute_metrics(const std::vector<Label>& truth, const std::vector<Label>& pred) {
  if (truth.size() != pred.size()) throw DimensionError("compute_metrics: truth and prediction lengths differ");
  std::vector<std::pair<Label, Label>> pairs;
  for (std::size_t i = 0; i < truth.size(); ++i) pairs.emplace_back(truth[i], pred[i]);
  return compute_metrics(pairs);
}

struct EnsembleOutput {
  Label label = Label::non_covid;
  double score = 0.0;
};

/// Mean of the DWCC confidence and the CCAT probability; 0.5 goes to covid.
inline EnsembleOutput ensemble_predict(double q_dwcc, double p_ccat) {
  if (!(q_dwcc >= 0.0 && q_dwcc <= 1.0) || !(p_ccat >= 0.0 && p_ccat <= 1.0)) {
    throw ContractError("ensemble_predict: scores must lie in [0,1]");
  }
  const double s = (q_dwcc + p_ccat) / 2.0;
  return {s >= 0.5 ? Label::covid : Label::non_covid, s};
}

/// Area under the ROC curve as the Mann-Whitney statistic: the fraction of
/// (covid, non-covid) pairs ranked correctly, ties counted half. Returns 0.5
/// when either class is absent.
inline double roc_auc(const std::vector<Label>& truth, const std::vector<double>& score) {
  if (truth.size() != score.size()) throw DimensionError("roc_auc: truth and score lengths differ");
  std::vector<std::size_t> idx(truth.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return score[a] < score[b]; });
  // Midranks over tie groups; AUC = (R_pos - n_pos (n_pos + 1) / 2) / (n_pos n_neg).
  double rank_sum_pos = 0.0;
  std::size_t n_pos = 0, i = 0;
  while (i < idx.size()) {
    std::size_t j = i;
    while (j + 1 < idx.size() && score[idx[j + 1]] == score[idx[i]]) ++j;
    const double midrank = (static_cast<double>(i) + static_cast<double>(j)) / 2.0 + 1.0;
    for (std::size_t k = i; k <= j; ++k) {
      if (truth[idx[k]] == Label::covid) {
        rank_sum_pos += midrank;
        ++n_pos;
      }
    }
    i = j + 1;
  }
  const std::size_t n_neg = truth.size() - n_pos;
  if (n_pos == 0 || n_neg == 0) return 0.5;
  const double np = static_cast<double>(n_pos);
  return (rank_sum_pos - np * (np + 1.0) / 2.0) / (np * static_cast<double>(n_neg));
}

struct MethodRow {
  std::string method;
  MetricsReport metrics;
};

inline std::string format_report_csv(const std::vector<MethodRow>& rows) {
  std::string out = "method,acc,macro_p,macro_r,macro_f1\n";
  char buf[160];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%s,%.4f,%.4f,%.4f,%.4f\n", r.method.c_str(), r.metrics.accuracy,
                  r.metrics.macro_precision, r.metrics.macro_recall, r.metrics.macro_f1);
    out += buf;
  }
  for (const auto& r : rows) {
    const auto& c = r.metrics.confusion;
    std::snprintf(buf, sizeof buf, "# %s confusion (rows=truth non-covid,covid; cols=prediction): %zu %zu / %zu %zu\n",
                  r.method.c_str(), c[0][0], c[0][1], c[1][0], c[1][1]);
    out += buf;
  }
  return out;
}

}  // namespace ctscan
