// Copyright 2026 The cfdiff Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <cstdio>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "cfdiff/encoders/encoders.hpp"
#include "json.hpp"

namespace cfdiff {

class EvalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Mean absolute pixel difference.
inline double l1_identity(const Image& a, const Image& b) {
  if (a.height != b.height || a.width != b.width) {
    throw EvalError("l1_identity: " + std::to_string(a.height) + "x" + std::to_string(a.width) + " vs " +
                    std::to_string(b.height) + "x" + std::to_string(b.width));
  }
  if (a.pixels.empty()) return 0.0;
  double s = 0.0;
  for (std::size_t i = 0; i < a.pixels.size(); ++i) s += std::abs(double(a.pixels[i]) - b.pixels[i]);
  return s / static_cast<double>(a.pixels.size());
}

inline const std::vector<Attribute>& all_heads() {
  static const std::vector<Attribute> h{Attribute::disease_a, Attribute::disease_b, Attribute::no_finding, Attribute::device};
  return h;
}

struct ClassifierConfig {
  std::vector<Attribute> heads = all_heads();
  int height = 32;
  int width = 32;
  std::vector<int> channels{16, 32, 64};
};

/// Small CNN trunk with one sigmoid output per head.
class MultiHeadClassifier {
 public:
  explicit MultiHeadClassifier(const ClassifierConfig& cfg = {}, std::uint64_t seed = 0) : cfg_(cfg) {
    if (cfg.heads.empty()) throw EvalError("classifier needs at least one head");
    Rng rng(seed);
    int in = 1;
    for (std::size_t i = 0; i < cfg.channels.size(); ++i) {
      const std::string p = "clf.conv" + std::to_string(i);
      convs_.push_back(nn::Conv2d(params_, p, rng, in, cfg.channels[i], 3, i == 0 ? 1 : 2));
      norms_.push_back(nn::GroupNorm(params_, p + ".norm", cfg.channels[i], std::min(8, cfg.channels[i])));
      in = cfg.channels[i];
    }
    head_ = nn::Linear(params_, "clf.head", rng, in, static_cast<int>(cfg.heads.size()));
  }

  const ClassifierConfig& config() const { return cfg_; }
  ParameterSet& params() { return params_; }
  const ParameterSet& params() const { return params_; }
  bool trained() const { return trained_; }
  void set_trained(bool on) { trained_ = on; }

  int head_index(Attribute a) const {
    for (std::size_t i = 0; i < cfg_.heads.size(); ++i) {
      if (cfg_.heads[i] == a) return static_cast<int>(i);
    }
    throw EvalError(std::string("classifier has no head for ") + attribute_name(a));
  }

  Tensor logits(const Tensor& images) const {
    check_image_batch(images, cfg_.height, cfg_.width, "classifier");
    auto x = images;
    for (std::size_t i = 0; i < convs_.size(); ++i) x = ops::silu(norms_[i](convs_[i](x)));
    return head_(ops::spatial_mean(x));
  }

  /// Probabilities [N, heads].
  Tensor predict(const Tensor& images) const {
    NoGradGuard ng;
    return ops::sigmoid(logits(images));
  }

  double probability(const Image& img, Attribute head) const {
    if (!trained_) throw EvalError("classifier is untrained");
    const auto p = predict(image_to_tensor(img));
    return p.data()[static_cast<std::size_t>(head_index(head))];
  }

 private:
  ClassifierConfig cfg_;
  ParameterSet params_;
  std::vector<nn::Conv2d> convs_;
  std::vector<nn::GroupNorm> norms_;
  nn::Linear head_;
  bool trained_ = false;
};

/// |p(orig) - p(cf)| for one head.
inline double cpg(const MultiHeadClassifier& clf, Attribute head, const Image& orig, const Image& cf) {
  if (!clf.trained()) throw EvalError("cpg: classifier is untrained");
  return std::abs(clf.probability(orig, head) - clf.probability(cf, head));
}

struct ClassifierTrainConfig {
  int steps = 600;
  int batch = 32;
  double lr = 2e-3;
  std::uint64_t seed = 0;
  /// Heads trained on inverted targets.
  std::vector<Attribute> flipped{};
};

struct ClassifierTrainResult {
  std::vector<double> losses;
  /// Per-head accuracy on the validation set, in head order.
  std::vector<double> val_accuracy;
};

inline bool is_flipped(const std::vector<Attribute>& flipped, Attribute a) {
  return std::find(flipped.begin(), flipped.end(), a) != flipped.end();
}

inline double head_target(const AttributeRecord& r, Attribute a, const std::vector<Attribute>& flipped) {
  return r.get(a) != is_flipped(flipped, a) ? 1.0 : 0.0;
}

/// Fraction of samples whose thresholded prediction matches the (possibly
/// flipped) label.
inline std::vector<double> head_accuracies(const MultiHeadClassifier& clf, const SampleView& samples,
                                           const std::vector<Attribute>& flipped = {}, int chunk = 64) {
  const auto& heads = clf.config().heads;
  std::vector<double> hits(heads.size(), 0.0);
  if (samples.empty()) return hits;
  for (std::size_t s = 0; s < samples.size(); s += static_cast<std::size_t>(chunk)) {
    std::vector<std::size_t> idx;
    for (std::size_t i = s; i < std::min(samples.size(), s + static_cast<std::size_t>(chunk)); ++i) idx.push_back(i);
    const auto p = clf.predict(batch_images(samples, idx));
    for (std::size_t n = 0; n < idx.size(); ++n) {
      for (std::size_t h = 0; h < heads.size(); ++h) {
        const bool pred = p.data()[n * heads.size() + h] >= 0.5f;
        hits[h] += pred == (head_target(samples[idx[n]]->record, heads[h], flipped) > 0.5);
      }
    }
  }
  for (auto& h : hits) h /= static_cast<double>(samples.size());
  return hits;
}

/// Per-head binary cross-entropy with Adam for a fixed number of steps.
inline ClassifierTrainResult train_classifier(MultiHeadClassifier& clf, const SampleView& train, const SampleView& val,
                                              const ClassifierTrainConfig& cfg) {
  if (train.empty()) throw EvalError("train_classifier: empty training set");
  const auto& heads = clf.config().heads;
  for (Attribute a : heads) {
    bool pos = false, neg = false;
    for (const auto* s : train) (s->record.get(a) ? pos : neg) = true;
    if (!pos || !neg) throw EvalError(std::string("train_classifier: head ") + attribute_name(a) + " has a single class");
  }
  Adam opt(clf.params().tensors(), {.lr = cfg.lr});
  BatchSampler sampler(train.size(), Rng::mix(cfg.seed, 0xc1f));
  ClassifierTrainResult res;
  const int H = static_cast<int>(heads.size());
  for (int step = 0; step < cfg.steps; ++step) {
    const auto idx = sampler.next(static_cast<std::size_t>(cfg.batch));
    std::vector<float> y;
    y.reserve(idx.size() * heads.size());
    for (auto i : idx) {
      for (Attribute a : heads) y.push_back(static_cast<float>(head_target(train[i]->record, a, cfg.flipped)));
    }
    opt.set_lr(cosine_lr(cfg.lr, step, cfg.steps));
    opt.zero_grad();
    auto loss = ops::bce_with_logits(clf.logits(batch_images(train, idx)),
                                     Tensor::from_data({static_cast<int>(idx.size()), H}, std::move(y)));
    backward(loss);
    opt.step();
    res.losses.push_back(loss.item());
  }
  clf.set_trained(true);
  res.val_accuracy = head_accuracies(clf, val, cfg.flipped);
  return res;
}

// ---------------------------------------------------------------------------
// Augmentation experiment

using HeadScores = std::map<std::string, double>;

struct ArmReport {
  std::string arm;
  std::size_t extra_samples = 0;
  /// Per seed, per head.
  std::vector<HeadScores> standard;
  std::vector<HeadScores> anticorrelated;

  static double mean_of(const std::vector<HeadScores>& v, const std::string& head) {
    if (v.empty()) return std::nan("");
    double s = 0;
    for (const auto& m : v) s += m.at(head);
    return s / static_cast<double>(v.size());
  }
  double mean_standard(const std::string& head) const { return mean_of(standard, head); }
  double mean_anticorrelated(const std::string& head) const { return mean_of(anticorrelated, head); }
};

struct AugmentationConfig {
  ClassifierTrainConfig classifier;
  std::vector<std::uint64_t> seeds{1, 2, 3};
  std::size_t min_counterfactuals = 1;
};

inline HeadScores named_scores(const MultiHeadClassifier& clf, const SampleView& samples) {
  const auto acc = head_accuracies(clf, samples);
  HeadScores out;
  for (std::size_t h = 0; h < acc.size(); ++h) out[attribute_name(clf.config().heads[h])] = acc[h];
  return out;
}

/// Trains the original-only, generated-sample and counterfactual arms with
/// identical schedules and seeds; only the extra training samples differ.
inline std::vector<ArmReport> augmentation_experiment(const SampleView& base, const SampleView& counterfactuals,
                                                      const SampleView& generated, const SampleView& standard_test,
                                                      const SampleView& anti_test, const AugmentationConfig& cfg) {
  if (counterfactuals.size() < cfg.min_counterfactuals) {
    throw EvalError("augmentation_experiment: " + std::to_string(counterfactuals.size()) +
                    " counterfactuals, configured minimum is " + std::to_string(cfg.min_counterfactuals));
  }
  const std::vector<std::pair<std::string, const SampleView*>> arms = {
      {"original", nullptr}, {"original+generated", &generated}, {"original+counterfactual", &counterfactuals}};
  std::vector<ArmReport> out;
  for (const auto& [name, extra] : arms) {
    ArmReport r;
    r.arm = name;
    SampleView train = base;
    if (extra) {
      train.insert(train.end(), extra->begin(), extra->end());
      r.extra_samples = extra->size();
    }
    for (auto seed : cfg.seeds) {
      MultiHeadClassifier clf({}, Rng::mix(seed, 0xa57));
      auto tc = cfg.classifier;
      tc.seed = seed;
      train_classifier(clf, train, {}, tc);
      r.standard.push_back(named_scores(clf, standard_test));
      r.anticorrelated.push_back(named_scores(clf, anti_test));
    }
    out.push_back(std::move(r));
  }
  return out;
}

struct EvalReport {
  std::vector<ArmReport> arms;
  std::size_t edits_total = 0;
  std::size_t edits_accepted = 0;
  double mean_l1 = 0.0;
  double mean_cpg = 0.0;
  nlohmann::json metadata = nlohmann::json::object();

  double acceptance_rate() const {
    return edits_total ? static_cast<double>(edits_accepted) / static_cast<double>(edits_total) : 0.0;
  }

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["metadata"] = metadata;
    j["edits"] = {{"total", edits_total},
                  {"accepted", edits_accepted},
                  {"acceptance_rate", acceptance_rate()},
                  {"mean_l1", mean_l1},
                  {"mean_cpg", mean_cpg}};
    j["arms"] = nlohmann::json::array();
    for (const auto& a : arms) {
      j["arms"].push_back({{"arm", a.arm},
                           {"extra_samples", a.extra_samples},
                           {"standard", a.standard},
                           {"anticorrelated", a.anticorrelated}});
    }
    return j;
  }

  /// Plain-text tables: edit quality, then per-arm head accuracies.
  std::string table() const {
    std::string s;
    char buf[256];
    std::snprintf(buf, sizeof buf, "%-28s %8s %8s %10s\n", "edits", "L1", "CPG", "accepted");
    s += buf;
    std::snprintf(buf, sizeof buf, "%-28s %8.4f %8.4f %4zu/%-5zu\n\n", "counterfactual", mean_l1, mean_cpg, edits_accepted,
                  edits_total);
    s += buf;
    std::snprintf(buf, sizeof buf, "%-28s", "training data");
    s += buf;
    for (Attribute a : all_heads()) {
      std::snprintf(buf, sizeof buf, " %12s", attribute_name(a));
      s += buf;
    }
    s += "  (standard / anti-correlated)\n";
    for (const auto& a : arms) {
      std::snprintf(buf, sizeof buf, "%-28s", a.arm.c_str());
      s += buf;
      for (Attribute h : all_heads()) {
        std::snprintf(buf, sizeof buf, "  %.3f/%.3f", a.mean_standard(attribute_name(h)),
                      a.mean_anticorrelated(attribute_name(h)));
        s += buf;
      }
      s += '\n';
    }
    return s;
  }
};

}  // namespace cfdiff
