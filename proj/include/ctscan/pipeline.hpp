#pragma once

// Datasets on disk, training of both models, scan-level evaluation of
// DWCC / CCAT / ensemble, and the fraction and head-count sweeps.

#include <algorithm>
#include <atomic>
#include <cstdio>
#include <exception>
#include <filesystem>
#include <fstream>
#include <map>
#include <mutex>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "ctscan/augment.hpp"
#include "ctscan/checkpoint.hpp"
#include "ctscan/dwcc.hpp"
#include "ctscan/error.hpp"
#include "ctscan/metrics.hpp"
#include "ctscan/model.hpp"
#include "ctscan/rng.hpp"
#include "ctscan/synth.hpp"
#include "ctscan/train.hpp"
#include "ctscan/volume.hpp"

namespace ctscan {

/// Runs fn(i) for i in [0, n) on up to `threads` workers. Results must be
/// written by index; the first exception is rethrown after all workers join.
template <class F>
void parallel_for(std::size_t n, std::size_t threads, F&& fn) {
  threads = std::max<std::size_t>(1, std::min(threads, n));
  if (threads == 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr error;
  std::mutex error_mutex;
  std::vector<std::thread> pool;
  for (std::size_t t = 0; t < threads; ++t) {
    pool.emplace_back([&] {
      for (std::size_t i; (i = next.fetch_add(1)) < n;) {
        try {
          fn(i);
        } catch (...) {
          std::lock_guard lock(error_mutex);
          if (!error) error = std::current_exception();
        }
      }
    });
  }
  for (auto& th : pool) th.join();
  if (error) std::rethrow_exception(error);
}

// ---------------------------------------------------------------------------
// Synthetic datasets

struct SynthOptions {
  std::size_t n_scans = 200;
  std::size_t depth = 40;
  std::size_t height = 64;
  std::size_t width = 64;
  double covid_fraction = 0.5;
  std::uint64_t seed = 0;
  SynthRecipe recipe;
};

/// ceil(r * N) covid volumes followed by the non-covid ones, ids "scan_000"...
inline std::vector<CtVolume> synth_dataset(const SynthOptions& o) {
  if (o.n_scans < 2) throw ParameterError("synth: need at least 2 scans, got " + std::to_string(o.n_scans));
  if (!(o.covid_fraction > 0.0 && o.covid_fraction < 1.0)) throw ParameterError("synth: covid fraction must lie in (0, 1)");
  if (o.depth < 8) throw ParameterError("synth: depth must be >= 8, got " + std::to_string(o.depth));
  const auto n_covid = static_cast<std::size_t>(std::ceil(o.covid_fraction * static_cast<double>(o.n_scans) - 1e-9));
  std::vector<CtVolume> out;
  out.reserve(o.n_scans);
  for (std::size_t i = 0; i < o.n_scans; ++i) {
    Rng rng = make_rng(o.seed, i);
    CtVolume v = synth_volume(i < n_covid ? Label::covid : Label::non_covid, o.depth, o.height, o.width, rng, o.recipe);
    char id[32];
    std::snprintf(id, sizeof id, "scan_%03zu", i);
    v.id = id;
    out.push_back(std::move(v));
  }
  return out;
}

/// Writes <id>.ctv, <id>.label and manifest.csv (id,path,label).
inline void write_dataset(const std::filesystem::path& dir, const std::vector<CtVolume>& vols) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec || !std::filesystem::is_directory(dir)) throw IoError("cannot create directory " + dir.string());
  std::string manifest = "id,path,label\n";
  for (const auto& v : vols) {
    const std::string file = v.id + ".ctv";
    write_raw_volume(dir / file, v);
    if (v.label) {
      std::ofstream lf(raw_label_path(dir / file), std::ios::binary | std::ios::trunc);
      if (!lf) throw IoError("cannot write label for " + v.id);
      lf << label_name(*v.label) << '\n';
    }
    manifest += v.id + "," + file + "," + (v.label ? std::string(label_name(*v.label)) : std::string()) + "\n";
  }
  std::ofstream mf(dir / "manifest.csv", std::ios::binary | std::ios::trunc);
  if (!mf) throw IoError("cannot write " + (dir / "manifest.csv").string());
  mf << manifest;
}

/// Reads every volume listed in manifest.csv, or, without a manifest, every
/// *.ctv file and PNG subdirectory in byte-wise name order. All must be labeled.
inline std::vector<CtVolume> load_dataset(const std::filesystem::path& dir) {
  if (!std::filesystem::is_directory(dir)) throw IoError("data directory not found: " + dir.string());
  std::vector<CtVolume> out;
  const auto manifest = dir / "manifest.csv";
  if (std::filesystem::exists(manifest)) {
    std::ifstream in(manifest);
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      if (!line.empty() && line.back() == '\r') line.pop_back();
      if (line.empty() || (lineno == 1 && line.rfind("id,", 0) == 0)) continue;
      std::stringstream ss(line);
      std::string id, path, label;
      std::getline(ss, id, ',');
      std::getline(ss, path, ',');
      std::getline(ss, label, ',');
      CtVolume v = load_volume(dir / path);
      v.id = id;
      if (!label.empty()) {
        auto l = parse_label(label);
        if (!l) throw FormatError(manifest.string() + ":" + std::to_string(lineno) + ": bad label '" + label + "'");
        v.label = *l;
      }
      out.push_back(std::move(v));
    }
  } else {
    std::vector<std::filesystem::path> items;
    for (const auto& e : std::filesystem::directory_iterator(dir)) {
      if ((e.is_regular_file() && e.path().extension() == ".ctv") || e.is_directory()) items.push_back(e.path());
    }
    std::sort(items.begin(), items.end(), [](const auto& a, const auto& b) { return a.filename().string() < b.filename().string(); });
    for (const auto& p : items) out.push_back(load_volume(p));
  }
  if (out.empty()) throw FormatError("no volumes found in " + dir.string());
  for (const auto& v : out) {
    if (!v.label) throw FormatError("volume " + v.id + " in " + dir.string() + " has no label");
  }
  return out;
}

struct DatasetSplit {
  std::vector<CtVolume> train;
  std::vector<CtVolume> val;
};

/// Stratified split: round(n_c * val_fraction) scans of each class go to
/// validation, chosen by a seeded shuffle; both parts keep the input order.
inline DatasetSplit split_dataset(const std::vector<CtVolume>& vols, double val_fraction, std::uint64_t seed) {
  if (!(val_fraction >= 0.0 && val_fraction < 1.0)) throw ConfigError("data.val_fraction must lie in [0, 1)");
  std::vector<bool> is_val(vols.size(), false);
  for (Label cls : {Label::non_covid, Label::covid}) {
    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < vols.size(); ++i) {
      if (vols[i].label == cls) idx.push_back(i);
    }
    Rng rng = make_rng(seed, 0x5117 + static_cast<std::uint64_t>(cls));
    std::shuffle(idx.begin(), idx.end(), rng);
    const auto k = static_cast<std::size_t>(std::llround(val_fraction * static_cast<double>(idx.size())));
    for (std::size_t j = 0; j < k; ++j) is_val[idx[j]] = true;
  }
  DatasetSplit s;
  for (std::size_t i = 0; i < vols.size(); ++i) (is_val[i] ? s.val : s.train).push_back(vols[i]);
  if (s.train.empty()) throw ConfigError("split leaves no training volumes");
  return s;
}

inline std::vector<Label> labels_of(const std::vector<CtVolume>& vols) {
  std::vector<Label> out;
  for (const auto& v : vols) out.push_back(v.label.value_or(Label::non_covid));
  return out;
}

// ---------------------------------------------------------------------------
// Slice scorer

/// Training slices: the centre window of every volume, resized, each slice
/// labeled with its scan's label.
struct SliceSet {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<float> pixels;
  std::vector<int> labels;

  std::size_t size() const { return labels.size(); }
};

inline SliceSet build_slice_set(const std::vector<CtVolume>& vols, double fraction, std::size_t height, std::size_t width) {
  SliceSet s{height, width, {}, {}};
  for (const auto& v : vols) {
    const IndexRange r = center_fraction_indices(v.depth, fraction);
    for (std::size_t z = r.start; z < r.end; ++z) {
      auto img = resize_slice(v.slice(z), v.height, v.width, height, width);
      s.pixels.insert(s.pixels.end(), img.begin(), img.end());
      s.labels.push_back(static_cast<int>(v.label.value_or(Label::non_covid)));
    }
  }
  return s;
}

template <class T>
BatchLoss<T> scorer_batch_loss(const ScorerModel<T>& model, const SliceSet& slices) {
  return [&model, &slices](std::span<const std::size_t> items, Rng&) {
    const std::size_t px = slices.height * slices.width;
    std::vector<T> x;
    x.reserve(items.size() * px);
    std::vector<int> y;
    for (std::size_t i : items) {
      x.insert(x.end(), slices.pixels.begin() + static_cast<std::ptrdiff_t>(i * px),
               slices.pixels.begin() + static_cast<std::ptrdiff_t>((i + 1) * px));
      y.push_back(slices.labels[i]);
    }
    auto input = Tensor<T>::from({items.size(), slices.height, slices.width}, std::move(x));
    return cross_entropy(scorer_logits(model.params, model.config, input), y);
  };
}

template <class T>
SliceScorer as_slice_scorer(const ScorerModel<T>& model) {
  return [&model](std::span<const float> slice, std::size_t h, std::size_t w) { return model.score(slice, h, w); };
}

/// DWCC over a volume with the whole centre window scored in one batch.
template <class T>
ScanDecision dwcc_scan(const ScorerModel<T>& model, const CtVolume& vol, double fraction, double alpha) {
  vol.validate();
  const IndexRange r = center_fraction_indices(vol.depth, fraction);
  std::vector<std::size_t> idx(r.size());
  std::iota(idx.begin(), idx.end(), r.start);
  const auto p = model.score_all(gather_slices(vol, idx));
  SliceScoreSet set{vol.id, {}};
  for (std::size_t i = 0; i < idx.size(); ++i) set.entries.push_back({idx[i], p[i]});
  return dwcc_decide(set, alpha);
}

template <class T>
std::vector<ScanDecision> dwcc_decisions(const ScorerModel<T>& model, const std::vector<CtVolume>& vols, double fraction,
                                         double alpha, std::size_t threads = thread_budget()) {
  const ScorerModel<T> frozen = model.frozen();
  std::vector<ScanDecision> out(vols.size());
  parallel_for(vols.size(), threads, [&](std::size_t i) { out[i] = dwcc_scan(frozen, vols[i], fraction, alpha); });
  return out;
}

inline MetricsReport decision_metrics(const std::vector<CtVolume>& vols, const std::vector<ScanDecision>& dec) {
  std::vector<Label> pred;
  for (const auto& d : dec) pred.push_back(d.label);
  return compute_metrics(labels_of(vols), pred);
}

struct ScorerTrainOptions {
  double fraction = 0.4;  // centre window used for training slices
  double alpha = 0.05;
};

template <class T>
TrainResult train_scorer(ScorerModel<T>& model, const std::vector<CtVolume>& train, const std::vector<CtVolume>& val,
                         const TrainConfig& cfg, const ScorerTrainOptions& opt, TrainHooks hooks = {},
                         OptimizerState<T> state = {}, std::size_t start_epoch = 0) {
  const SliceSet slices = build_slice_set(train, opt.fraction, model.config.input_height, model.config.input_width);
  if (!hooks.validate && !val.empty()) {
    hooks.validate = [&]() -> std::optional<ValidationScore> {
      const auto m = decision_metrics(val, dwcc_decisions(model, val, opt.fraction, opt.alpha));
      return ValidationScore{m.accuracy, m.macro_f1};
    };
  }
  if (!hooks.save && !hooks.checkpoint_path.empty()) {
    hooks.save = [&](const std::filesystem::path& p, const std::vector<CheckpointEntry>& optim) {
      save_model<T>(p, model, optim);
    };
  }
  return train_loop<T>(model.params, slices.size(), cfg, scorer_batch_loss(model, slices), hooks, std::move(state),
                       start_epoch);
}

// ---------------------------------------------------------------------------
// CCAT

template <class T>
BatchLoss<T> ccat_batch_loss(const CcatModel<T>& model, const std::vector<CtVolume>& train,
                             const AugmentationSpec& augmentation) {
  return [&model, &train, augmentation](std::span<const std::size_t> items, Rng& rng) {
    Tensor<T> total;
    for (std::size_t i : items) {
      const CtVolume prepared = prepare_ccat_slices(train[i], model.config, &rng, &augmentation);
      const Tensor<T> logits = ccat_logits(model.params, model.config, volume_to_tensor<T>(prepared));
      const Tensor<T> loss = cross_entropy(logits, {static_cast<int>(train[i].label.value_or(Label::non_covid))});
      total = total.defined() ? add(total, loss) : loss;
    }
    return scale(total, static_cast<T>(1.0 / static_cast<double>(items.size())));
  };
}

template <class T>
std::vector<double> ccat_scores(const CcatModel<T>& model, const std::vector<CtVolume>& vols,
                                std::size_t threads = thread_budget()) {
  const CcatModel<T> frozen = model.frozen();
  std::vector<double> out(vols.size());
  parallel_for(vols.size(), threads, [&](std::size_t i) { out[i] = frozen.predict(vols[i]); });
  return out;
}

inline MetricsReport score_metrics(const std::vector<CtVolume>& vols, const std::vector<double>& p) {
  std::vector<Label> pred;
  for (double v : p) pred.push_back(v >= 0.5 ? Label::covid : Label::non_covid);
  return compute_metrics(labels_of(vols), pred);
}

template <class T>
TrainResult train_ccat(CcatModel<T>& model, const std::vector<CtVolume>& train, const std::vector<CtVolume>& val,
                       const TrainConfig& cfg, const AugmentationSpec& augmentation, TrainHooks hooks = {},
                       OptimizerState<T> state = {}, std::size_t start_epoch = 0) {
  // Resize once; sampling and augmentation then run at model resolution.
  std::vector<CtVolume> resized;
  resized.reserve(train.size());
  for (const auto& v : train) resized.push_back(resize_volume(v, model.config.input_height, model.config.input_width));
  if (!hooks.validate && !val.empty()) {
    hooks.validate = [&]() -> std::optional<ValidationScore> {
      const auto m = score_metrics(val, ccat_scores(model, val));
      return ValidationScore{m.accuracy, m.macro_f1};
    };
  }
  if (!hooks.save && !hooks.checkpoint_path.empty()) {
    hooks.save = [&](const std::filesystem::path& p, const std::vector<CheckpointEntry>& optim) {
      save_model<T>(p, model, optim);
    };
  }
  return train_loop<T>(model.params, resized.size(), cfg, ccat_batch_loss(model, resized, augmentation), hooks,
                       std::move(state), start_epoch);
}

// ---------------------------------------------------------------------------
// Evaluation suite

struct SuiteOutputs {
  std::vector<Label> truth;
  std::vector<ScanDecision> dwcc;
  std::vector<double> ccat;
  std::vector<EnsembleOutput> ensemble;
  std::vector<MethodRow> rows;  // dwcc, ccat, ensemble order, as requested
};

struct SuiteRequest {
  bool dwcc = true;
  bool ccat = true;
  bool ensemble = true;
  double fraction = 0.4;
  double alpha = 0.05;
};

template <class T>
SuiteOutputs evaluate_suite(const ScorerModel<T>* scorer, const CcatModel<T>* ccat, const std::vector<CtVolume>& vols,
                            const SuiteRequest& req) {
  if (vols.empty()) throw ContractError("evaluate_suite: empty dataset");
  SuiteOutputs out;
  out.truth = labels_of(vols);
  const bool need_dwcc = req.dwcc || req.ensemble, need_ccat = req.ccat || req.ensemble;
  if (need_dwcc && !scorer) throw ContractError("evaluate_suite: dwcc requires the scorer checkpoint");
  if (need_ccat && !ccat) throw ContractError("evaluate_suite: ccat requires the ccat checkpoint");
  if (need_dwcc) out.dwcc = dwcc_decisions(*scorer, vols, req.fraction, req.alpha);
  if (need_ccat) out.ccat = ccat_scores(*ccat, vols);
  if (req.dwcc) out.rows.push_back({"dwcc", decision_metrics(vols, out.dwcc)});
  if (req.ccat) out.rows.push_back({"ccat", score_metrics(vols, out.ccat)});
  if (req.ensemble) {
    std::vector<Label> pred;
    for (std::size_t i = 0; i < vols.size(); ++i) {
      out.ensemble.push_back(ensemble_predict(out.dwcc[i].confidence, out.ccat[i]));
      pred.push_back(out.ensemble.back().label);
    }
    out.rows.push_back({"ensemble", compute_metrics(out.truth, pred)});
  }
  return out;
}

// ---------------------------------------------------------------------------
// Sweeps

struct SweepRow {
  double value = 0.0;
  MetricsReport metrics;
  double auc = 0.5;
};

inline std::string format_sweep_csv(const std::vector<SweepRow>& rows) {
  std::string out = "value,acc,macro_p,macro_r,macro_f1,auc\n";
  char buf[160];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%g,%.4f,%.4f,%.4f,%.4f,%.4f\n", r.value, r.metrics.accuracy, r.metrics.macro_precision,
                  r.metrics.macro_recall, r.metrics.macro_f1, r.auc);
    out += buf;
  }
  return out;
}

/// Scores a trained scorer at each evaluation fraction; the scorer itself is
/// trained once, on its own training window.
template <class T>
std::vector<SweepRow> fraction_sweep(const ScorerModel<T>& scorer, const std::vector<CtVolume>& eval,
                                     const std::vector<double>& fractions, double alpha) {
  if (fractions.empty()) throw ConfigError("sweep: empty value list");
  for (double f : fractions) {
    if (!(f > 0.0 && f <= 1.0)) throw ConfigError("sweep: fraction values must lie in (0, 1]");
  }
  std::vector<SweepRow> rows;
  for (double f : fractions) {
    const auto dec = dwcc_decisions(scorer, eval, f, alpha);
    std::vector<double> q;
    for (const auto& d : dec) q.push_back(d.confidence);
    rows.push_back({f, decision_metrics(eval, dec), roc_auc(labels_of(eval), q)});
  }
  return rows;
}

/// Trains one CCAT per head count and evaluates it on `eval`. Points are
/// independent and may run concurrently; rows come back in value order.
template <class T>
std::vector<SweepRow> heads_sweep(const CcatConfig& base, const std::vector<std::size_t>& heads,
                                  const std::vector<CtVolume>& train, const std::vector<CtVolume>& eval,
                                  const TrainConfig& cfg, const AugmentationSpec& augmentation,
                                  std::size_t threads = thread_budget()) {
  if (heads.empty()) throw ConfigError("sweep: empty value list");
  for (std::size_t h : heads) {
    CcatConfig c = base;
    c.heads = h;
    c.validate();
  }
  std::vector<SweepRow> rows(heads.size());
  parallel_for(heads.size(), threads, [&](std::size_t i) {
    CcatConfig c = base;
    c.heads = heads[i];
    Rng rng = make_rng(cfg.seed, 0x1417);
    auto model = CcatModel<T>::create(c, rng);
    TrainHooks hooks;
    hooks.validate = [] { return std::optional<ValidationScore>{}; };
    train_ccat(model, train, {}, cfg, augmentation, hooks);
    const auto p = ccat_scores(model, eval, 1);
    rows[i] = {static_cast<double>(heads[i]), score_metrics(eval, p), roc_auc(labels_of(eval), p)};
  });
  return rows;
}

}  // namespace ctscan
