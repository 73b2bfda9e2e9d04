// Copyright 2026 The cfdiff Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "cfdiff/denoiser/denoiser.hpp"
#include "cfdiff/editor/editor.hpp"
#include "cfdiff/eval/eval.hpp"
#include "cfdiff/synthdata/synthdata.hpp"
#include "json.hpp"

namespace cfdiff {

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct ScheduleConfig {
  BetaKind kind = BetaKind::scaled_linear;
  int steps = 1000;
  double beta_start = 85e-5;
  double beta_end = 12e-3;

  DiffusionSchedule build() const { return DiffusionSchedule::make(kind, steps, beta_start, beta_end); }
};

struct AutoencoderSection {
  bool identity = false;
  int latent_channels = 4;
  int steps = 1000;
  int batch = 16;
  double lr = 2e-3;
};

struct EvalSection {
  /// Device-removal edits scored on the test split.
  int num_edits = 50;
  int counterfactuals_per_subgroup = 100;
  int generated_per_subgroup = 100;
  int anti_test_size = 200;
  std::size_t min_counterfactuals = 1;
  std::vector<std::uint64_t> seeds{1, 2, 3};
  /// "independent" uses a separate device-only classifier for CPG; "head"
  /// uses the device head of the multi-head classifier.
  std::string cpg_mode = "independent";
};

struct RunConfig {
  std::uint64_t seed = 17;
  std::string out_dir = "run";
  CorpusSpec corpus;
  ScheduleConfig schedule;
  AutoencoderSection autoencoder;
  ContrastiveConfig clip{.steps = 600, .batch = 32};
  FinetuneConfig unet{.epochs = 40};
  EditConfig edit;
  ClassifierTrainConfig classifier{.steps = 300};
  EvalSection eval;
};

namespace detail {

/// Walks a JSON object, consuming known keys and rejecting the rest.
class Section {
 public:
  Section(const nlohmann::json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j.is_object()) throw ConfigError(path_ + ": expected an object");
  }

  template <class T>
  void read(const std::string& key, T& out) {
    seen_.insert(key);
    if (!j_.contains(key)) return;
    try {
      out = j_.at(key).get<T>();
    } catch (const nlohmann::json::exception&) {
      throw ConfigError(path_ + "/" + key + ": wrong type (" + std::string(j_.at(key).type_name()) + ")");
    }
  }

  void nested(const std::string& key, const std::function<void(Section&)>& fn) {
    seen_.insert(key);
    if (!j_.contains(key)) return;
    Section s(j_.at(key), path_ + "/" + key);
    fn(s);
    s.finish();
  }

  void require(bool ok, const std::string& key, const std::string& what) const {
    if (!ok) throw ConfigError(path_ + "/" + key + ": " + what);
  }

  void finish() const {
    for (const auto& [k, _] : j_.items()) {
      if (!seen_.count(k)) throw ConfigError(path_ + "/" + k + ": unknown key");
    }
  }

 private:
  const nlohmann::json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

inline int line_of_offset(const std::string& text, std::size_t offset) {
  int line = 1;
  for (std::size_t i = 0; i < std::min(offset, text.size()); ++i) line += text[i] == '\n';
  return line;
}

}  // namespace detail

inline nlohmann::json to_json(const RunConfig& c) {
  nlohmann::json j;
  j["seed"] = c.seed;
  j["out_dir"] = c.out_dir;
  j["corpus"] = {{"n_samples", c.corpus.n_samples},
                 {"height", c.corpus.height},
                 {"width", c.corpus.width},
                 {"p_disease_a", c.corpus.p_disease_a},
                 {"p_disease_b", c.corpus.p_disease_b},
                 {"p_device", c.corpus.p_device},
                 {"rho", c.corpus.rho},
                 {"split_fractions", c.corpus.split_fractions}};
  j["schedule"] = {{"kind", to_string(c.schedule.kind)},
                   {"steps", c.schedule.steps},
                   {"beta_start", c.schedule.beta_start},
                   {"beta_end", c.schedule.beta_end}};
  j["autoencoder"] = {{"identity", c.autoencoder.identity},
                      {"latent_channels", c.autoencoder.latent_channels},
                      {"steps", c.autoencoder.steps},
                      {"batch", c.autoencoder.batch},
                      {"lr", c.autoencoder.lr}};
  j["clip"] = {{"steps", c.clip.steps},
               {"batch", c.clip.batch},
               {"lr", c.clip.lr},
               {"temperature", c.clip.temperature},
               {"negation_prob", c.clip.negation_prob}};
  j["unet"] = {{"epochs", c.unet.epochs},       {"batch", c.unet.batch},
               {"lr", c.unet.lr},               {"null_prob", c.unet.null_prob},
               {"negation_prob", c.unet.negation_prob}, {"max_steps", c.unet.max_steps}};
  j["edit"] = {{"guidance", c.edit.guidance},
               {"inversion_guidance", c.edit.inversion_guidance},
               {"null_inner_steps", c.edit.null_inner_steps},
               {"null_lr", c.edit.null_lr},
               {"null_early_stop", c.edit.null_early_stop},
               {"tau", c.edit.tau},
               {"clip_threshold", c.edit.clip_threshold},
               {"steps", c.edit.steps}};
  j["classifier"] = {{"steps", c.classifier.steps}, {"batch", c.classifier.batch}, {"lr", c.classifier.lr}};
  j["eval"] = {{"num_edits", c.eval.num_edits},
               {"counterfactuals_per_subgroup", c.eval.counterfactuals_per_subgroup},
               {"generated_per_subgroup", c.eval.generated_per_subgroup},
               {"anti_test_size", c.eval.anti_test_size},
               {"min_counterfactuals", c.eval.min_counterfactuals},
               {"seeds", c.eval.seeds},
               {"cpg_mode", c.eval.cpg_mode}};
  return j;
}

/// Strict parse: unknown keys and wrong types are errors naming the field.
inline RunConfig config_from_json(const nlohmann::json& j) {
  RunConfig c;
  detail::Section root(j, "");
  root.read("seed", c.seed);
  root.read("out_dir", c.out_dir);
  root.nested("corpus", [&](detail::Section& s) {
    s.read("n_samples", c.corpus.n_samples);
    s.read("height", c.corpus.height);
    s.read("width", c.corpus.width);
    s.read("p_disease_a", c.corpus.p_disease_a);
    s.read("p_disease_b", c.corpus.p_disease_b);
    s.read("p_device", c.corpus.p_device);
    s.read("rho", c.corpus.rho);
    s.read("split_fractions", c.corpus.split_fractions);
  });
  root.nested("schedule", [&](detail::Section& s) {
    std::string kind = to_string(c.schedule.kind);
    s.read("kind", kind);
    try {
      c.schedule.kind = beta_kind_from_string(kind);
    } catch (const ScheduleError& e) {
      throw ConfigError("/schedule/kind: " + std::string(e.what()));
    }
    s.read("steps", c.schedule.steps);
    s.read("beta_start", c.schedule.beta_start);
    s.read("beta_end", c.schedule.beta_end);
  });
  root.nested("autoencoder", [&](detail::Section& s) {
    s.read("identity", c.autoencoder.identity);
    s.read("latent_channels", c.autoencoder.latent_channels);
    s.read("steps", c.autoencoder.steps);
    s.read("batch", c.autoencoder.batch);
    s.read("lr", c.autoencoder.lr);
    s.require(c.autoencoder.steps >= 0 && c.autoencoder.batch > 0 && c.autoencoder.lr > 0, "steps",
              "steps must be >= 0, batch and lr positive");
  });
  root.nested("clip", [&](detail::Section& s) {
    s.read("steps", c.clip.steps);
    s.read("batch", c.clip.batch);
    s.read("lr", c.clip.lr);
    s.read("temperature", c.clip.temperature);
    s.read("negation_prob", c.clip.negation_prob);
    s.require(c.clip.temperature > 0, "temperature", "must be positive");
  });
  root.nested("unet", [&](detail::Section& s) {
    s.read("epochs", c.unet.epochs);
    s.read("batch", c.unet.batch);
    s.read("lr", c.unet.lr);
    s.read("null_prob", c.unet.null_prob);
    s.read("negation_prob", c.unet.negation_prob);
    s.read("max_steps", c.unet.max_steps);
    s.require(c.unet.epochs > 0, "epochs", "must be positive");
    s.require(c.unet.batch > 0, "batch", "must be positive");
    s.require(c.unet.lr > 0, "lr", "must be positive");
    s.require(c.unet.null_prob >= 0 && c.unet.null_prob <= 1, "null_prob", "must lie in [0, 1]");
  });
  root.nested("edit", [&](detail::Section& s) {
    s.read("guidance", c.edit.guidance);
    s.read("inversion_guidance", c.edit.inversion_guidance);
    s.read("null_inner_steps", c.edit.null_inner_steps);
    s.read("null_lr", c.edit.null_lr);
    s.read("null_early_stop", c.edit.null_early_stop);
    s.read("tau", c.edit.tau);
    s.read("clip_threshold", c.edit.clip_threshold);
    s.read("steps", c.edit.steps);
    try {
      c.edit.validate();
    } catch (const EditError& e) {
      throw ConfigError(std::string("/edit: ") + e.what());
    }
  });
  root.nested("classifier", [&](detail::Section& s) {
    s.read("steps", c.classifier.steps);
    s.read("batch", c.classifier.batch);
    s.read("lr", c.classifier.lr);
    s.require(c.classifier.steps > 0 && c.classifier.batch > 0 && c.classifier.lr > 0, "steps",
              "steps, batch and lr must be positive");
  });
  root.nested("eval", [&](detail::Section& s) {
    s.read("num_edits", c.eval.num_edits);
    s.read("counterfactuals_per_subgroup", c.eval.counterfactuals_per_subgroup);
    s.read("generated_per_subgroup", c.eval.generated_per_subgroup);
    s.read("anti_test_size", c.eval.anti_test_size);
    s.read("min_counterfactuals", c.eval.min_counterfactuals);
    s.read("seeds", c.eval.seeds);
    s.read("cpg_mode", c.eval.cpg_mode);
    s.require(c.eval.cpg_mode == "independent" || c.eval.cpg_mode == "head", "cpg_mode",
              "must be \"independent\" or \"head\"");
    s.require(!c.eval.seeds.empty(), "seeds", "must not be empty");
  });
  root.finish();
  try {
    c.corpus.validate();
    device_conditionals(c.corpus);
  } catch (const SynthDataError& e) {
    throw ConfigError(std::string("/corpus: ") + e.what());
  }
  c.corpus.base_seed = c.seed;
  return c;
}

inline RunConfig parse_config(const std::string& text, const std::string& source = "<config>") {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(source + ":" + std::to_string(detail::line_of_offset(text, e.byte)) + ": " + e.what());
  }
  try {
    return config_from_json(j);
  } catch (const ConfigError& e) {
    throw ConfigError(source + ": " + e.what());
  }
}

inline RunConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str(), path.string());
}

/// FNV-1a over the canonical JSON form, as 16 hex digits.
inline std::string config_hash(const RunConfig& c) {
  const auto s = to_json(c).dump();
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char ch : s) {
    h ^= ch;
    h *= 1099511628211ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

}  // namespace cfdiff
