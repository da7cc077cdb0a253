// ctscan: synthetic data, training, evaluation, prediction and sweeps.
//
// Errors go to stderr as "error: <category>: <detail>" with exit code 1;
// usage errors use the category "usage" and exit code 2.

#include <CLI11.hpp>

#include <cstdio>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "ctscan/checkpoint.hpp"
#include "ctscan/dwcc.hpp"
#include "ctscan/metrics.hpp"
#include "ctscan/pipeline.hpp"
#include "ctscan/run_config.hpp"

namespace fs = std::filesystem;
using namespace ctscan;

namespace {

using Real = float;

constexpr std::uint64_t kInitStream = 0x1417;

void emit(const std::string& text, const fs::path& out) {
  if (out.empty()) {
    std::cout << text << std::flush;
    return;
  }
  if (out.has_parent_path()) fs::create_directories(out.parent_path());
  std::ofstream os(out, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot write " + out.string());
  os << text;
  if (!os) throw IoError("write failed for " + out.string());
}

std::string model_kind(const fs::path& checkpoint) {
  const fs::path cfg = companion_path(checkpoint);
  if (!fs::exists(checkpoint)) throw IoError("checkpoint not found: " + checkpoint.string());
  if (!fs::exists(cfg)) throw IoError("checkpoint companion not found: " + cfg.string());
  const auto m = KeyValues::read(cfg).get("model");
  if (!m) throw FormatError(cfg.string() + ": no model key");
  return *m;
}

// Models are built from the run config when there is one, so a checkpoint
// of another shape fails with the full mismatch list; otherwise from the
// checkpoint's own companion.
struct Loaded {
  std::optional<ScorerModel<Real>> scorer;
  std::optional<CcatModel<Real>> ccat;
};

Loaded load_models(const std::vector<fs::path>& checkpoints, const RunConfig* cfg) {
  Loaded out;
  for (const auto& path : checkpoints) {
    const std::string kind = model_kind(path);
    Rng rng = make_rng(0);
    if (kind == "ccat") {
      if (cfg) {
        out.ccat = CcatModel<Real>::create(cfg->ccat, rng);
        load_parameter_entries<Real>(out.ccat->params, read_checkpoint(path));
      } else {
        out.ccat = load_ccat_model<Real>(path);
      }
    } else if (kind == "dwcc-scorer") {
      if (cfg) {
        out.scorer = ScorerModel<Real>::create(cfg->scorer, rng);
        load_parameter_entries<Real>(out.scorer->params, read_checkpoint(path));
      } else {
        out.scorer = load_scorer_model<Real>(path);
      }
    } else {
      throw FormatError(path.string() + ": unknown model kind '" + kind + "'");
    }
  }
  return out;
}

std::vector<fs::path> default_checkpoints(const RunConfig& cfg, const std::string& method) {
  std::vector<fs::path> out;
  if (method != "ccat") out.push_back(cfg.scorer_checkpoint());
  if (method != "dwcc") out.push_back(cfg.ccat_checkpoint());
  return out;
}

DatasetSplit load_split(const RunConfig& cfg) {
  if (cfg.data_dir.empty()) throw ConfigError("data.dir is not set");
  return split_dataset(load_dataset(cfg.data_dir), cfg.val_fraction, cfg.split_seed);
}

// ---------------------------------------------------------------------------

struct SynthArgs {
  fs::path out;
  std::size_t n_scans = 200;
  std::size_t depth = 40;
  std::string size = "64x64";
  double covid_frac = 0.5;
  std::uint64_t seed = 0;
};

int cmd_synth(const SynthArgs& a) {
  SynthOptions o;
  o.n_scans = a.n_scans;
  o.depth = a.depth;
  o.covid_fraction = a.covid_frac;
  o.seed = a.seed;
  unsigned h = 0, w = 0;
  char tail = 0;
  if (std::sscanf(a.size.c_str(), "%ux%u%c", &h, &w, &tail) != 2 || h == 0 || w == 0) {
    throw ParameterError("synth: --size must look like HxW, got '" + a.size + "'");
  }
  o.height = h;
  o.width = w;
  const auto vols = synth_dataset(o);
  write_dataset(a.out, vols);
  std::size_t covid = 0;
  for (const auto& v : vols) covid += v.label == Label::covid;
  std::printf("wrote %zu volumes (%zu covid, %zu non-covid) to %s\n", vols.size(), covid, vols.size() - covid,
              a.out.string().c_str());
  return 0;
}

struct TrainArgs {
  fs::path config;
  std::string method;
  std::optional<std::size_t> epochs;
  std::optional<std::uint64_t> seed;
  bool resume = false;
};

template <class Model, class Fit>
void run_training(Model& model, const fs::path& ckpt, const fs::path& log, bool resume, Fit&& fit) {
  OptimizerState<Real> state;
  std::size_t start = 0;
  if (resume && fs::exists(ckpt)) {
    const auto entries = read_checkpoint(ckpt);
    load_parameter_entries<Real>(model.params, entries);
    start = restore_optimizer(named_parameters<Real>(model.params), entries, state);
    std::printf("resuming from %s at epoch %zu\n", ckpt.string().c_str(), start);
  }
  TrainHooks hooks;
  hooks.log_path = log;
  hooks.checkpoint_path = ckpt;
  hooks.on_epoch = [](const EpochLog& e) {
    std::printf("%s\n", format_epoch_log(e).c_str());
    std::fflush(stdout);
    return true;
  };
  fit(hooks, std::move(state), start);
}

int cmd_train(const TrainArgs& a) {
  RunConfig cfg = RunConfig::read(a.config);
  if (a.epochs) cfg.train.epochs = *a.epochs;
  if (a.seed) cfg.train.seed = *a.seed;
  cfg.train.validate();
  std::printf("%s\n", cfg.train.header().c_str());
  // Data first: a missing directory must fail before anything is written.
  const DatasetSplit split = load_split(cfg);
  std::printf("method=%s train=%zu val=%zu\n", a.method.c_str(), split.train.size(), split.val.size());
  std::printf("%s\n", epoch_log_header().c_str());
  std::error_code ec;
  fs::create_directories(cfg.checkpoint_dir, ec);
  if (ec) throw IoError("cannot create " + cfg.checkpoint_dir.string() + ": " + ec.message());

  Rng rng = make_rng(cfg.train.seed, kInitStream);
  if (a.method == "ccat") {
    auto model = CcatModel<Real>::create(cfg.ccat, rng);
    run_training(model, cfg.ccat_checkpoint(), cfg.checkpoint_dir / "ccat.log.csv", a.resume,
                 [&](TrainHooks hooks, OptimizerState<Real> st, std::size_t start) {
                   train_ccat(model, split.train, split.val, cfg.train, cfg.augment, hooks, std::move(st), start);
                 });
    std::printf("saved %s\n", cfg.ccat_checkpoint().string().c_str());
  } else {
    auto model = ScorerModel<Real>::create(cfg.scorer, rng);
    ScorerTrainOptions opt{cfg.scorer_train_fraction, cfg.alpha};
    run_training(model, cfg.scorer_checkpoint(), cfg.checkpoint_dir / "dwcc-scorer.log.csv", a.resume,
                 [&](TrainHooks hooks, OptimizerState<Real> st, std::size_t start) {
                   train_scorer(model, split.train, split.val, cfg.train, opt, hooks, std::move(st), start);
                 });
    std::printf("saved %s\n", cfg.scorer_checkpoint().string().c_str());
  }
  return 0;
}

struct EvalArgs {
  fs::path config;
  std::vector<fs::path> checkpoints;
  std::string method = "all";
  std::string split = "val";
  fs::path out;
};

int cmd_eval(const EvalArgs& a) {
  const RunConfig cfg = RunConfig::read(a.config);
  DatasetSplit split = load_split(cfg);
  std::vector<CtVolume> vols = std::move(split.val);
  if (a.split == "all") vols.insert(vols.begin(), split.train.begin(), split.train.end());
  if (vols.empty()) throw ConfigError("evaluation split is empty (data.val_fraction = 0?)");

  const auto checkpoints = a.checkpoints.empty() ? default_checkpoints(cfg, a.method) : a.checkpoints;
  const Loaded models = load_models(checkpoints, &cfg);
  SuiteRequest req;
  req.dwcc = a.method == "dwcc" || a.method == "all";
  req.ccat = a.method == "ccat" || a.method == "all";
  req.ensemble = a.method == "ensemble" || a.method == "all";
  req.fraction = cfg.dwcc_fraction;
  req.alpha = cfg.alpha;
  const auto suite = evaluate_suite<Real>(models.scorer ? &*models.scorer : nullptr,
                                          models.ccat ? &*models.ccat : nullptr, vols, req);
  emit(format_report_csv(suite.rows), a.out.empty() ? cfg.report_path : a.out);
  return 0;
}

struct PredictArgs {
  fs::path scan;
  std::string method;
  std::vector<fs::path> checkpoints;
  fs::path config;
};

int cmd_predict(const PredictArgs& a) {
  std::optional<RunConfig> cfg;
  if (!a.config.empty()) cfg = RunConfig::read(a.config);
  const CtVolume vol = load_volume(a.scan);
  const auto checkpoints =
      a.checkpoints.empty() && cfg ? default_checkpoints(*cfg, a.method) : a.checkpoints;
  const Loaded models = load_models(checkpoints, cfg ? &*cfg : nullptr);
  const double fraction = cfg ? cfg->dwcc_fraction : 0.4;
  const double alpha = cfg ? cfg->alpha : 0.05;

  const bool need_dwcc = a.method != "ccat", need_ccat = a.method != "dwcc";
  if (need_dwcc && !models.scorer) throw ContractError(a.method + " requires the dwcc-scorer checkpoint (--checkpoint)");
  if (need_ccat && !models.ccat) throw ContractError(a.method + " requires the ccat checkpoint (--checkpoint)");

  std::optional<ScanDecision> dec;
  std::optional<double> p;
  if (need_dwcc) dec = dwcc_scan(*models.scorer, vol, fraction, alpha);
  if (need_ccat) p = models.ccat->predict(vol);

  char buf[256];
  if (a.method == "dwcc") {
    std::snprintf(buf, sizeof buf, "label=%s score=%.6g p=%.6g n=%zu method=%s", std::string(label_name(dec->label)).c_str(),
                  dec->confidence, dec->p_value, dec->n_slices_used, std::string(method_name(dec->method)).c_str());
  } else if (a.method == "ccat") {
    std::snprintf(buf, sizeof buf, "label=%s score=%.6g", *p >= 0.5 ? "covid" : "non-covid", *p);
  } else {
    const auto e = ensemble_predict(dec->confidence, *p);
    std::snprintf(buf, sizeof buf, "label=%s score=%.6g dwcc=%.6g ccat=%.6g", std::string(label_name(e.label)).c_str(),
                  e.score, dec->confidence, *p);
  }
  std::printf("%s\n", buf);
  return 0;
}

struct SweepArgs {
  fs::path config;
  std::string axis;
  std::vector<std::string> values;
  fs::path out;
};

int cmd_sweep(const SweepArgs& a) {
  const RunConfig cfg = RunConfig::read(a.config);
  if (a.values.empty()) throw ConfigError("sweep: empty value list");
  std::vector<SweepRow> rows;
  if (a.axis == "fraction") {
    std::vector<double> fractions;
    for (const auto& v : a.values) fractions.push_back(kv::to_double("--values", v));
    for (double f : fractions) {
      if (!(f > 0.0 && f <= 1.0)) throw ConfigError("sweep: fraction values must lie in (0, 1]");
    }
    const DatasetSplit split = load_split(cfg);
    if (split.val.empty()) throw ConfigError("sweep: validation split is empty");
    // One scorer, trained on its own window; the sweep varies the inference window.
    Rng rng = make_rng(cfg.train.seed, kInitStream);
    auto scorer = ScorerModel<Real>::create(cfg.scorer, rng);
    TrainHooks quiet;
    quiet.validate = [] { return std::optional<ValidationScore>{}; };
    train_scorer(scorer, split.train, {}, cfg.train, ScorerTrainOptions{cfg.scorer_train_fraction, cfg.alpha}, quiet);
    rows = fraction_sweep(scorer, split.val, fractions, cfg.alpha);
  } else {
    std::vector<std::size_t> heads;
    for (const auto& v : a.values) heads.push_back(kv::to_size("--values", v));
    const DatasetSplit split = load_split(cfg);
    if (split.val.empty()) throw ConfigError("sweep: validation split is empty");
    rows = heads_sweep<Real>(cfg.ccat, heads, split.train, split.val, cfg.train, cfg.augment);
  }
  emit(format_sweep_csv(rows), a.out.empty() ? cfg.report_path : a.out);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"ctscan: chest CT classification toolkit"};
  app.require_subcommand(1);

  SynthArgs synth;
  auto* s = app.add_subcommand("synth", "write a synthetic labeled dataset");
  s->add_option("--out", synth.out, "output directory")->required();
  s->add_option("--n-scans", synth.n_scans, "number of volumes")->capture_default_str();
  s->add_option("--depth", synth.depth, "slices per volume (>= 8)")->capture_default_str();
  s->add_option("--size", synth.size, "slice size HxW")->capture_default_str();
  s->add_option("--covid-frac", synth.covid_frac, "fraction of covid volumes")->capture_default_str();
  s->add_option("--seed", synth.seed)->capture_default_str();

  TrainArgs train;
  std::size_t epochs = 0;
  std::uint64_t seed = 0;
  auto* t = app.add_subcommand("train", "train the DWCC slice scorer or the CCAT model");
  t->add_option("--config", train.config)->required();
  t->add_option("--method", train.method)->required()->check(CLI::IsMember({"dwcc-scorer", "ccat"}));
  auto* epochs_opt = t->add_option("--epochs", epochs, "override train.epochs");
  auto* seed_opt = t->add_option("--seed", seed, "override train.seed");
  t->add_flag("--resume", train.resume, "continue from the checkpoint in paths.checkpoint_dir");

  EvalArgs eval;
  auto* e = app.add_subcommand("eval", "metrics CSV on the validation split");
  e->add_option("--config", eval.config)->required();
  e->add_option("--checkpoint", eval.checkpoints, "checkpoint file (repeatable; default: paths.checkpoint_dir)");
  e->add_option("--method", eval.method)->check(CLI::IsMember({"dwcc", "ccat", "ensemble", "all"}))->capture_default_str();
  e->add_option("--split", eval.split)->check(CLI::IsMember({"val", "all"}))->capture_default_str();
  e->add_option("--out", eval.out, "report path (default: paths.report, else stdout)");

  PredictArgs predict;
  auto* p = app.add_subcommand("predict", "classify one scan");
  p->add_option("--scan", predict.scan, "raw volume file or PNG directory")->required();
  p->add_option("--method", predict.method)->required()->check(CLI::IsMember({"dwcc", "ccat", "ensemble"}));
  p->add_option("--checkpoint", predict.checkpoints, "checkpoint file (repeatable)");
  p->add_option("--config", predict.config, "run config for fraction, alpha and model shape");

  SweepArgs sweep;
  auto* w = app.add_subcommand("sweep", "accuracy over slice fraction or attention heads");
  w->add_option("--config", sweep.config)->required();
  w->add_option("--sweep", sweep.axis)->required()->check(CLI::IsMember({"fraction", "heads"}));
  w->add_option("--values", sweep.values, "comma-separated values")->required()->delimiter(',');
  w->add_option("--out", sweep.out, "CSV path (default: paths.report, else stdout)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& ex) {
    return app.exit(ex);
  } catch (const CLI::CallForAllHelp& ex) {
    return app.exit(ex);
  } catch (const CLI::ParseError& ex) {
    std::cerr << "error: usage: " << ex.what() << "\n";
    return 2;
  }

  try {
    if (*s) return cmd_synth(synth);
    if (*t) {
      if (*epochs_opt) train.epochs = epochs;
      if (*seed_opt) train.seed = seed;
      return cmd_train(train);
    }
    if (*e) return cmd_eval(eval);
    if (*p) return cmd_predict(predict);
    if (*w) return cmd_sweep(sweep);
  } catch (const Error& ex) {
    std::cerr << "error: " << ex.category() << ": " << ex.what() << "\n";
    return 1;
  } catch (const std::filesystem::filesystem_error& ex) {
    std::cerr << "error: io: " << ex.what() << "\n";
    return 1;
  } catch (const std::exception& ex) {
    std::cerr << "error: internal: " << ex.what() << "\n";
    return 1;
  }
  return 0;
}
