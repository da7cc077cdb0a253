#pragma once

// Run configuration shared by the CLI subcommands. One flat "key = value"
// file; every key must be known. Relative paths resolve against the working
// directory.

#include <filesystem>
#include <set>
#include <string>

#include "ctscan/augment.hpp"
#include "ctscan/checkpoint.hpp"
#include "ctscan/config.hpp"
#include "ctscan/model.hpp"
#include "ctscan/train.hpp"

namespace ctscan {

struct RunConfig {
  std::filesystem::path data_dir;
  std::filesystem::path checkpoint_dir = "checkpoints";
  std::filesystem::path report_path;  // empty: stdout
  double val_fraction = 0.2;
  std::uint64_t split_seed = 0;

  double dwcc_fraction = 0.4;          // centre window scored at inference
  double scorer_train_fraction = 0.4;  // centre window used for scorer training
  double alpha = 0.05;

  CcatConfig ccat;
  ScorerConfig scorer;
  TrainConfig train;
  AugmentationSpec augment;

  std::filesystem::path ccat_checkpoint() const { return checkpoint_dir / "ccat.ckpt"; }
  std::filesystem::path scorer_checkpoint() const { return checkpoint_dir / "dwcc-scorer.ckpt"; }

  KeyValues to_key_values() const {
    KeyValues out;
    out.set("data.dir", data_dir.string());
    out.set("data.val_fraction", kv::from_double(val_fraction));
    out.set("data.split_seed", std::to_string(split_seed));
    out.set("paths.checkpoint_dir", checkpoint_dir.string());
    out.set("paths.report", report_path.string());
    out.set("dwcc.fraction", kv::from_double(dwcc_fraction));
    out.set("dwcc.train_fraction", kv::from_double(scorer_train_fraction));
    out.set("dwcc.alpha", kv::from_double(alpha));
    for (const KeyValues& part : {ctscan::to_key_values(ccat), ctscan::to_key_values(scorer)}) {
      for (const auto& [k, v] : part.entries()) {
        if (k != "model") out.set(k, v);
      }
    }
    out.set("train.lr0", kv::from_double(train.lr0));
    out.set("train.step_size", std::to_string(train.step_size));
    out.set("train.gamma", kv::from_double(train.gamma));
    out.set("train.epochs", std::to_string(train.epochs));
    out.set("train.batch_size", std::to_string(train.batch_size));
    out.set("train.beta1", kv::from_double(train.beta1));
    out.set("train.beta2", kv::from_double(train.beta2));
    out.set("train.eps", kv::from_double(train.eps));
    out.set("train.seed", std::to_string(train.seed));
    out.set("train.checkpoint_every", std::to_string(train.checkpoint_every));
    const AugmentationSpec& a = augment;
    out.set("augment.blur", kv::from_bool(a.blur));
    out.set("augment.blur_sigma_max", kv::from_double(a.blur_sigma_max));
    out.set("augment.noise", kv::from_bool(a.noise));
    out.set("augment.noise_std_max", kv::from_double(a.noise_std_max));
    out.set("augment.contrast", kv::from_bool(a.contrast));
    out.set("augment.contrast_range", kv::from_double(a.contrast_range));
    out.set("augment.brightness", kv::from_bool(a.brightness));
    out.set("augment.brightness_range", kv::from_double(a.brightness_range));
    out.set("augment.distortion", kv::from_bool(a.distortion));
    out.set("augment.distortion_k_max", kv::from_double(a.distortion_k_max));
    out.set("augment.crop", kv::from_bool(a.crop));
    out.set("augment.crop_min_fraction", kv::from_double(a.crop_min_fraction));
    out.set("augment.rotation", kv::from_bool(a.rotation));
    out.set("augment.rotation_max_degrees", kv::from_double(a.rotation_max_degrees));
    return out;
  }

  static std::set<std::string> known_keys() {
    std::set<std::string> keys;
    const KeyValues defaults = RunConfig{}.to_key_values();
    for (const auto& [k, v] : defaults.entries()) keys.insert(k);
    return keys;
  }

  static RunConfig from(const KeyValues& src, const std::string& source) {
    src.require_known(known_keys(), source);
    RunConfig c;
    if (auto v = src.get("data.dir")) c.data_dir = *v;
    if (auto v = src.get("paths.checkpoint_dir")) c.checkpoint_dir = *v;
    if (auto v = src.get("paths.report")) c.report_path = *v;
    kv::read(src, "data.val_fraction", c.val_fraction);
    if (auto v = src.get("data.split_seed")) c.split_seed = kv::to_u64("data.split_seed", *v);
    kv::read(src, "dwcc.fraction", c.dwcc_fraction);
    kv::read(src, "dwcc.train_fraction", c.scorer_train_fraction);
    kv::read(src, "dwcc.alpha", c.alpha);
    read_ccat_config(src, c.ccat);
    read_scorer_config(src, c.scorer);
    kv::read(src, "train.lr0", c.train.lr0);
    kv::read(src, "train.step_size", c.train.step_size);
    kv::read(src, "train.gamma", c.train.gamma);
    kv::read(src, "train.epochs", c.train.epochs);
    kv::read(src, "train.batch_size", c.train.batch_size);
    kv::read(src, "train.beta1", c.train.beta1);
    kv::read(src, "train.beta2", c.train.beta2);
    kv::read(src, "train.eps", c.train.eps);
    if (auto v = src.get("train.seed")) c.train.seed = kv::to_u64("train.seed", *v);
    kv::read(src, "train.checkpoint_every", c.train.checkpoint_every);
    AugmentationSpec& a = c.augment;
    kv::read(src, "augment.blur", a.blur);
    kv::read(src, "augment.blur_sigma_max", a.blur_sigma_max);
    kv::read(src, "augment.noise", a.noise);
    kv::read(src, "augment.noise_std_max", a.noise_std_max);
    kv::read(src, "augment.contrast", a.contrast);
    kv::read(src, "augment.contrast_range", a.contrast_range);
    kv::read(src, "augment.brightness", a.brightness);
    kv::read(src, "augment.brightness_range", a.brightness_range);
    kv::read(src, "augment.distortion", a.distortion);
    kv::read(src, "augment.distortion_k_max", a.distortion_k_max);
    kv::read(src, "augment.crop", a.crop);
    kv::read(src, "augment.crop_min_fraction", a.crop_min_fraction);
    kv::read(src, "augment.rotation", a.rotation);
    kv::read(src, "augment.rotation_max_degrees", a.rotation_max_degrees);
    c.validate(source);
    return c;
  }

  static RunConfig read(const std::filesystem::path& path) { return from(KeyValues::read(path), path.string()); }

  void validate(const std::string& source) const {
    auto in_unit = [&](double v, const char* key) {
      if (!(v > 0.0 && v <= 1.0)) throw ConfigError(source + ": " + key + " must lie in (0, 1]");
    };
    in_unit(dwcc_fraction, "dwcc.fraction");
    in_unit(scorer_train_fraction, "dwcc.train_fraction");
    if (!(alpha > 0.0 && alpha <= 0.5)) throw ConfigError(source + ": dwcc.alpha must lie in (0, 0.5]");
    if (!(val_fraction >= 0.0 && val_fraction < 1.0)) throw ConfigError(source + ": data.val_fraction must lie in [0, 1)");
    ccat.validate();
    scorer.validate();
    train.validate();
  }
};

}  // namespace ctscan
