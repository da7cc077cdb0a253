#pragma once

// Adam with a step learning-rate schedule and a generic, seeded minibatch
// loop shared by the CCAT model and the slice scorer.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "ctscan/checkpoint.hpp"
#include "ctscan/error.hpp"
#include "ctscan/model.hpp"
#include "ctscan/rng.hpp"
#include "ctscan/tensor.hpp"

namespace ctscan {

struct TrainConfig {
  double lr0 = 1e-4;
  std::size_t step_size = 20;
  double gamma = 0.5;
  std::size_t epochs = 100;
  std::size_t batch_size = 8;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::uint64_t seed = 0;
  std::size_t checkpoint_every = 0;  // 0: only the final checkpoint

  void validate() const {
    if (!(lr0 >= 0.0) || !std::isfinite(lr0)) throw ConfigError("train: lr0 must be finite and >= 0");
    if (!(gamma > 0.0 && gamma <= 1.0)) throw ConfigError("train: gamma must lie in (0, 1]");
    if (step_size < 1) throw ConfigError("train: step_size must be >= 1");
    if (epochs < 1) throw ConfigError("train: epochs must be >= 1");
    if (batch_size < 1) throw ConfigError("train: batch_size must be >= 1");
    if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) throw ConfigError("train: betas must lie in [0, 1)");
    if (!(eps > 0.0)) throw ConfigError("train: eps must be > 0");
  }

  /// Run header line, e.g. "lr=0.0001 step=20 epochs=100".
  std::string header() const {
    char buf[96];
    std::snprintf(buf, sizeof buf, "lr=%g step=%zu epochs=%zu", lr0, step_size, epochs);
    return buf;
  }
};

inline double step_lr(const TrainConfig& cfg, std::size_t epoch) {
  return cfg.lr0 * std::pow(cfg.gamma, static_cast<double>(epoch / cfg.step_size));
}

template <class T>
struct OptimizerState {
  std::vector<std::vector<T>> m;
  std::vector<std::vector<T>> v;
  std::uint64_t t = 0;

  bool empty() const { return m.empty(); }
};

/// One Adam update of every parameter from its gradient buffer.
template <class T>
void adam_step(const NamedTensors<T>& params, OptimizerState<T>& state, const TrainConfig& cfg, double lr) {
  if (state.empty()) {
    for (const auto& [name, p] : params) {
      state.m.emplace_back(p.numel(), T{0});
      state.v.emplace_back(p.numel(), T{0});
    }
  }
  if (state.m.size() != params.size()) throw ContractError("adam_step: optimizer state does not match parameters");
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& [name, p] = params[i];
    if (state.m[i].size() != p.numel()) throw DimensionError("adam_step: state for " + name + " has wrong size");
    if (!p.has_grad()) throw ContractError("adam_step: " + name + " has no gradient buffer");
    for (const T& g : p.grad()) {
      if (!std::isfinite(g)) throw NumericError("non-finite gradient in parameter " + name);
    }
  }
  state.t += 1;
  const double b1 = cfg.beta1, b2 = cfg.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(state.t));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(state.t));
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor<T> p = params[i].second;
    auto value = p.mutable_data();
    const auto grad = p.grad();
    auto& m = state.m[i];
    auto& v = state.v[i];
    for (std::size_t j = 0; j < value.size(); ++j) {
      const double g = static_cast<double>(grad[j]);
      const double mj = b1 * static_cast<double>(m[j]) + (1.0 - b1) * g;
      const double vj = b2 * static_cast<double>(v[j]) + (1.0 - b2) * g * g;
      m[j] = static_cast<T>(mj);
      v[j] = static_cast<T>(vj);
      const double update = lr * (mj / c1) / (std::sqrt(vj / c2) + cfg.eps);
      value[j] = static_cast<T>(static_cast<double>(value[j]) - update);
    }
  }
}

// Optimizer state travels in the checkpoint as "optim.*" tensors.

template <class T>
std::vector<CheckpointEntry> optimizer_entries(const NamedTensors<T>& params, const OptimizerState<T>& state,
                                               std::size_t next_epoch) {
  std::vector<CheckpointEntry> out;
  out.push_back({"optim.t", {1}, {static_cast<float>(state.t)}});
  out.push_back({"optim.epoch", {1}, {static_cast<float>(next_epoch)}});
  if (state.empty()) return out;
  for (std::size_t i = 0; i < params.size(); ++i) {
    const Shape& s = params[i].second.shape();
    out.push_back({"optim.m." + params[i].first, s, {state.m[i].begin(), state.m[i].end()}});
    out.push_back({"optim.v." + params[i].first, s, {state.v[i].begin(), state.v[i].end()}});
  }
  return out;
}

/// Restores optimizer state; returns the epoch to resume from.
template <class T>
std::size_t restore_optimizer(const NamedTensors<T>& params, const std::vector<CheckpointEntry>& entries,
                              OptimizerState<T>& state) {
  std::map<std::string, const CheckpointEntry*> by_name;
  for (const auto& e : entries) by_name[e.name] = &e;
  auto scalar = [&](const std::string& key) {
    auto it = by_name.find(key);
    if (it == by_name.end() || it->second->values.size() != 1) throw FormatError("checkpoint lacks " + key + " for resume");
    return static_cast<std::uint64_t>(it->second->values[0]);
  };
  state = {};
  state.t = scalar("optim.t");
  const std::size_t epoch = scalar("optim.epoch");
  if (state.t == 0) return epoch;
  for (const auto& [name, p] : params) {
    auto m = by_name.find("optim.m." + name), v = by_name.find("optim.v." + name);
    if (m == by_name.end() || v == by_name.end()) throw FormatError("checkpoint lacks optimizer state for " + name);
    if (m->second->values.size() != p.numel() || v->second->values.size() != p.numel()) {
      throw FormatError("optimizer state for " + name + " has the wrong size");
    }
    state.m.emplace_back(m->second->values.begin(), m->second->values.end());
    state.v.emplace_back(v->second->values.begin(), v->second->values.end());
  }
  return epoch;
}

struct EpochLog {
  std::size_t epoch = 0;  // 1-based in the CSV
  double lr = 0.0;
  double train_loss = 0.0;
  double val_acc = std::numeric_limits<double>::quiet_NaN();
  double val_macro_f1 = std::numeric_limits<double>::quiet_NaN();
};

inline std::string epoch_log_header() { return "epoch,lr,train_loss,val_acc,val_macro_f1"; }

inline std::string format_epoch_log(const EpochLog& e) {
  char buf[160];
  std::snprintf(buf, sizeof buf, "%zu,%.6g,%.6f,%.4f,%.4f", e.epoch, e.lr, e.train_loss, e.val_acc, e.val_macro_f1);
  return buf;
}

struct ValidationScore {
  double accuracy = 0.0;
  double macro_f1 = 0.0;
};

/// Mean loss of one minibatch; the items are dataset indices.
template <class T>
using BatchLoss = std::function<Tensor<T>(std::span<const std::size_t> items, Rng& rng)>;

struct TrainHooks {
  std::function<std::optional<ValidationScore>()> validate;
  /// Called after every epoch; return false to end training.
  std::function<bool(const EpochLog&)> on_epoch;
  std::filesystem::path log_path;         // CSV, empty: no file
  std::filesystem::path checkpoint_path;  // empty: no checkpoints
  std::function<void(const std::filesystem::path&, const std::vector<CheckpointEntry>& optim)> save;
};

struct TrainResult {
  std::vector<EpochLog> log;
  std::size_t steps = 0;
};

/// Epoch loop: seeded shuffle, minibatches, backward, Adam with step_lr.
/// Per-epoch randomness derives from (seed, epoch) alone, so a run resumed
/// from an epoch-boundary checkpoint follows the uninterrupted trajectory.
template <class T, class Params>
TrainResult train_loop(Params& params, std::size_t n_items, const TrainConfig& cfg, const BatchLoss<T>& loss_fn,
                       const TrainHooks& hooks = {}, OptimizerState<T> state = {}, std::size_t start_epoch = 0) {
  cfg.validate();
  if (n_items == 0) throw ConfigError("train: empty dataset");
  const NamedTensors<T> named = named_parameters<T>(params);
  TrainResult result;

  std::ofstream log_file;
  if (!hooks.log_path.empty()) {
    const bool append = start_epoch > 0 && std::filesystem::exists(hooks.log_path);
    log_file.open(hooks.log_path, append ? std::ios::app : std::ios::trunc);
    if (!log_file) throw IoError("cannot write " + hooks.log_path.string());
    if (!append) log_file << epoch_log_header() << '\n';
  }

  std::vector<std::size_t> order(n_items);
  for (std::size_t epoch = start_epoch; epoch < cfg.epochs; ++epoch) {
    const double lr = step_lr(cfg, epoch);
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng shuffle_rng = make_rng(cfg.seed, 2 * epoch);
    std::shuffle(order.begin(), order.end(), shuffle_rng);
    Rng data_rng = make_rng(cfg.seed, 2 * epoch + 1);

    double loss_sum = 0.0;
    for (std::size_t b = 0; b < n_items; b += cfg.batch_size) {
      const std::size_t len = std::min(cfg.batch_size, n_items - b);
      zero_gradients<T>(params);
      const Tensor<T> loss = loss_fn(std::span<const std::size_t>(order.data() + b, len), data_rng);
      backward(loss);
      adam_step(named, state, cfg, lr);
      loss_sum += static_cast<double>(loss.item()) * static_cast<double>(len);
      ++result.steps;
    }

    EpochLog row;
    row.epoch = epoch + 1;
    row.lr = lr;
    row.train_loss = loss_sum / static_cast<double>(n_items);
    if (hooks.validate) {
      if (auto v = hooks.validate()) {
        row.val_acc = v->accuracy;
        row.val_macro_f1 = v->macro_f1;
      }
    }
    result.log.push_back(row);
    if (log_file.is_open()) log_file << format_epoch_log(row) << '\n' << std::flush;

    const bool last = epoch + 1 == cfg.epochs;
    const bool keep_going = !hooks.on_epoch || hooks.on_epoch(row);
    if (hooks.save && !hooks.checkpoint_path.empty() &&
        (last || !keep_going || (cfg.checkpoint_every > 0 && (epoch + 1) % cfg.checkpoint_every == 0))) {
      hooks.save(hooks.checkpoint_path, optimizer_entries(named, state, epoch + 1));
    }
    if (!keep_going) break;
  }
  return result;
}

/// Number of worker threads allowed by CT_THREADS (default 1).
inline std::size_t thread_budget() {
  if (const char* env = std::getenv("CT_THREADS")) {
    char* end = nullptr;
    const unsigned long long v = std::strtoull(env, &end, 10);
    if (end && *end == '\0' && v >= 1) return static_cast<std::size_t>(v);
  }
  return 1;
}

}  // namespace ctscan
