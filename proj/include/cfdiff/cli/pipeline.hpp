// Copyright 2026 The cfdiff Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <chrono>
#include <filesystem>
#include <fstream>
#include <memory>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "cfdiff/cli/config.hpp"
#include "cfdiff/denoiser/denoiser.hpp"
#include "cfdiff/editor/editor.hpp"
#include "cfdiff/eval/eval.hpp"
#include "cfdiff/io/checkpoint.hpp"
#include "cfdiff/numerics/primitive_checks.hpp"
#include "cfdiff/synthdata/synthdata.hpp"
#include "json.hpp"

namespace cfdiff {

namespace fs = std::filesystem;

class PipelineError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Output directory plus the configuration every artifact is stamped with.
class Workspace {
 public:
  Workspace(RunConfig cfg, fs::path dir, bool overwrite)
      : cfg_(std::move(cfg)), hash_(config_hash(cfg_)), dir_(std::move(dir)), overwrite_(overwrite) {}

  const RunConfig& config() const { return cfg_; }
  const std::string& hash() const { return hash_; }
  const fs::path& dir() const { return dir_; }
  bool overwrite() const { return overwrite_; }

  fs::path data_dir() const { return dir_ / "data"; }
  fs::path manifest() const { return data_dir() / "manifest.jsonl"; }
  fs::path checkpoint(const std::string& name) const { return dir_ / "checkpoints" / (name + ".ckpt"); }
  fs::path eval_dir() const { return dir_ / "eval"; }

  /// Metadata stamped into every artifact.
  nlohmann::json stamp(const std::string& kind) const {
    return {{"kind", kind}, {"config_hash", hash_}, {"seed", cfg_.seed}};
  }

  /// Refuses to clobber existing outputs unless overwriting was requested.
  void claim(const std::vector<fs::path>& outputs) const {
    if (overwrite_) return;
    for (const auto& p : outputs) {
      if (fs::exists(p)) throw PipelineError("output " + p.string() + " already exists (pass --overwrite to replace it)");
    }
  }

  void require(const fs::path& p, const std::string& producer) const {
    if (!fs::exists(p)) throw PipelineError("missing upstream artifact " + p.string() + " (run " + producer + " first)");
  }

  std::uint64_t derived_seed(std::uint64_t tag) const { return Rng::mix(cfg_.seed, tag); }

 private:
  RunConfig cfg_;
  std::string hash_;
  fs::path dir_;
  bool overwrite_;
};

inline void write_json(const fs::path& p, const nlohmann::json& j) {
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  std::ofstream out(p);
  if (!out) throw PipelineError("cannot write " + p.string());
  out << j.dump(2) << '\n';
}

inline nlohmann::json read_json(const fs::path& p) {
  std::ifstream in(p);
  if (!in) throw PipelineError("cannot read " + p.string());
  return nlohmann::json::parse(in);
}

inline void write_text(const fs::path& p, const std::string& s) {
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  std::ofstream out(p);
  if (!out) throw PipelineError("cannot write " + p.string());
  out << s;
}

inline void write_loss_curve(const Workspace& ws, const fs::path& p, const std::vector<double>& losses) {
  std::string s = "# config_hash=" + ws.hash() + " seed=" + std::to_string(ws.config().seed) + "\nstep,loss\n";
  char buf[64];
  for (std::size_t i = 0; i < losses.size(); ++i) {
    std::snprintf(buf, sizeof buf, "%zu,%.9g\n", i, losses[i]);
    s += buf;
  }
  write_text(p, s);
}

// ---------------------------------------------------------------------------
// Model construction (seeds derive from the run seed)

inline AutoencoderConfig ae_config(const RunConfig& c) {
  return {c.corpus.height, c.corpus.width, c.autoencoder.latent_channels, c.autoencoder.identity};
}

inline UNetConfig unet_config(const RunConfig& c) {
  UNetConfig u;
  const LatentAutoencoder probe(ae_config(c), 0);
  const auto ls = probe.latent_shape();
  u.in_channels = ls[0];
  u.resolution = ls[1];
  u.num_timesteps = c.schedule.steps;
  return u;
}

struct Models {
  std::unique_ptr<LatentAutoencoder> ae;
  std::unique_ptr<TextEncoder> text;
  std::unique_ptr<ImageEncoder> image;
  std::unique_ptr<UNet> unet;
  std::unique_ptr<MultiHeadClassifier> classifier;
  std::unique_ptr<MultiHeadClassifier> device_classifier;
};

inline constexpr std::uint64_t kSeedAe = 0xae, kSeedText = 0x7e, kSeedImage = 0x1e, kSeedUnet = 0x0e7,
                               kSeedClassifier = 0xc1, kSeedDeviceClassifier = 0xdc, kSeedUnconfounded = 0x0c;

inline Models fresh_models(const Workspace& ws) {
  const auto& c = ws.config();
  Models m;
  m.ae = std::make_unique<LatentAutoencoder>(ae_config(c), ws.derived_seed(kSeedAe));
  m.text = std::make_unique<TextEncoder>(TextEncoderConfig{}, ws.derived_seed(kSeedText));
  m.image = std::make_unique<ImageEncoder>(ImageEncoderConfig{c.corpus.height, c.corpus.width}, ws.derived_seed(kSeedImage));
  m.unet = std::make_unique<UNet>(unet_config(c), ws.derived_seed(kSeedUnet));
  ClassifierConfig cc;
  cc.height = c.corpus.height;
  cc.width = c.corpus.width;
  m.classifier = std::make_unique<MultiHeadClassifier>(cc, ws.derived_seed(kSeedClassifier));
  cc.heads = {Attribute::device};
  m.device_classifier = std::make_unique<MultiHeadClassifier>(cc, ws.derived_seed(kSeedDeviceClassifier));
  return m;
}

inline void freeze(Models& m) {
  for (ParameterSet* ps : {&m.ae->params(), &m.text->params(), &m.image->params(), &m.unet->params(),
                           &m.classifier->params(), &m.device_classifier->params()}) {
    ps->set_trainable(false);
  }
}

inline Checkpoint load_required(ParameterSet& ps, const Workspace& ws, const std::string& name, const std::string& producer) {
  const auto p = ws.checkpoint(name);
  ws.require(p, producer);
  return load_into(ps, p);
}

enum ModelNeeds : unsigned {
  kNeedAe = 1,
  kNeedClip = 2,
  kNeedUnet = 4,
  kNeedClassifiers = 8,
  kNeedAll = 15,
};

/// Loads the requested trained components from the workspace and freezes them.
inline Models load_models(const Workspace& ws, unsigned needs) {
  auto m = fresh_models(ws);
  if ((needs & kNeedAe) && !ws.config().autoencoder.identity) {
    const auto ck = load_required(m.ae->params(), ws, "ae", "train-ae");
    const auto meta = nlohmann::json::parse(ck.metadata);
    m.ae->set_recorded_error(meta.value("recorded_error", 0.0));
  }
  if (needs & kNeedClip) {
    load_required(m.text->params(), ws, "text", "train-clip");
    load_required(m.image->params(), ws, "image", "train-clip");
  }
  if (needs & kNeedUnet) {
    load_required(m.unet->params(), ws, "unet", "train-unet");
    m.unet->set_trained(true);
  }
  if (needs & kNeedClassifiers) {
    load_required(m.classifier->params(), ws, "classifier", "train-classifier");
    load_required(m.device_classifier->params(), ws, "device_classifier", "train-classifier");
    m.classifier->set_trained(true);
    m.device_classifier->set_trained(true);
  }
  freeze(m);
  return m;
}

inline Corpus load_data(const Workspace& ws) {
  ws.require(ws.manifest(), "gen-data");
  auto c = load_corpus(ws.data_dir());
  c.spec = ws.config().corpus;
  return c;
}

inline std::string stamp_with(const Workspace& ws, const std::string& kind, nlohmann::json extra = {}) {
  auto j = ws.stamp(kind);
  if (extra.is_object()) j.update(extra);
  return j.dump();
}

// ---------------------------------------------------------------------------
// Commands

inline nlohmann::json cmd_gen_data(const Workspace& ws) {
  ws.claim({ws.manifest()});
  const auto corpus = generate_corpus(ws.config().corpus);
  write_corpus(corpus, ws.data_dir(), ws.stamp("manifest"));
  return {{"samples", corpus.samples.size()}, {"correlation", device_disease_correlation(corpus)}};
}

inline nlohmann::json cmd_train_ae(const Workspace& ws) {
  const auto& c = ws.config();
  if (c.autoencoder.identity) return {{"skipped", "pixel-space mode uses the identity codec"}};
  ws.claim({ws.checkpoint("ae")});
  const auto corpus = load_data(ws);
  auto m = fresh_models(ws);
  const auto r = train_autoencoder(*m.ae, corpus.split(Split::train),
                                   {c.autoencoder.steps, c.autoencoder.batch, c.autoencoder.lr, ws.derived_seed(0xa1)});
  const double val = mean_abs_reconstruction(*m.ae, corpus.split(Split::val));
  save_checkpoint(m.ae->params(), ws.checkpoint("ae"),
                  stamp_with(ws, "autoencoder", {{"recorded_error", r.train_mae}, {"val_error", val}}));
  write_loss_curve(ws, ws.dir() / "ae_loss.csv", r.losses);
  return {{"train_mae", r.train_mae}, {"val_mae", val}, {"latent_scale", r.latent_scale}};
}

inline nlohmann::json cmd_train_clip(const Workspace& ws) {
  ws.claim({ws.checkpoint("text"), ws.checkpoint("image")});
  const auto corpus = load_data(ws);
  auto m = fresh_models(ws);
  auto cfg = ws.config().clip;
  cfg.seed = ws.derived_seed(0xc2);
  const auto r = train_contrastive(*m.text, *m.image, corpus.split(Split::train), cfg, corpus.split(Split::val));
  const double retrieval = retrieval_accuracy(*m.text, *m.image, corpus.split(Split::val));
  save_checkpoint(m.text->params(), ws.checkpoint("text"), stamp_with(ws, "text_encoder"));
  save_checkpoint(m.image->params(), ws.checkpoint("image"), stamp_with(ws, "image_encoder"));
  write_loss_curve(ws, ws.dir() / "clip_loss.csv", r.losses);
  return {{"final_margin", r.final_margin}, {"epoch_margins", r.epoch_margins}, {"val_retrieval", retrieval}};
}

struct UnetTraining {
  FinetuneResult result;
  std::uint64_t ae_checksum_before = 0, ae_checksum_after = 0;
  std::uint64_t text_checksum_before = 0, text_checksum_after = 0;
};

inline UnetTraining train_unet_models(const Workspace& ws, Models& m, const Corpus& corpus) {
  UnetTraining out;
  out.ae_checksum_before = m.ae->params().checksum();
  out.text_checksum_before = m.text->params().checksum();
  auto cfg = ws.config().unet;
  cfg.seed = ws.derived_seed(0xd3);
  m.unet->params().set_trainable(true);
  out.result = finetune(*m.unet, *m.ae, *m.text, corpus.split(Split::train), ws.config().schedule.build(), cfg);
  m.unet->params().set_trainable(false);
  out.ae_checksum_after = m.ae->params().checksum();
  out.text_checksum_after = m.text->params().checksum();
  return out;
}

inline nlohmann::json cmd_train_unet(const Workspace& ws) {
  ws.claim({ws.checkpoint("unet")});
  const auto corpus = load_data(ws);
  auto m = load_models(ws, kNeedAe | kNeedClip);
  const auto t = train_unet_models(ws, m, corpus);
  save_checkpoint(m.unet->params(), ws.checkpoint("unet"), stamp_with(ws, "unet"));
  write_loss_curve(ws, ws.dir() / "unet_loss.csv", t.result.losses);
  const auto sm = smooth(t.result.losses, 50);
  return {{"steps", t.result.losses.size()},
          {"initial_loss", t.result.losses.front()},
          {"final_smoothed_loss", sm.back()},
          {"encoders_unchanged",
           t.ae_checksum_before == t.ae_checksum_after && t.text_checksum_before == t.text_checksum_after}};
}

/// Corpus without device/disease coupling, used to train the independent
/// device classifier.
inline Corpus unconfounded_corpus(const Workspace& ws) {
  auto spec = ws.config().corpus;
  spec.rho = 0.0;
  spec.base_seed = ws.derived_seed(kSeedUnconfounded);
  return generate_corpus(spec);
}

inline nlohmann::json cmd_train_classifier(const Workspace& ws) {
  ws.claim({ws.checkpoint("classifier"), ws.checkpoint("device_classifier")});
  const auto corpus = load_data(ws);
  auto m = fresh_models(ws);
  auto cfg = ws.config().classifier;
  cfg.seed = ws.derived_seed(0xc4);
  const auto r = train_classifier(*m.classifier, corpus.split(Split::train), corpus.split(Split::val), cfg);
  const auto un = unconfounded_corpus(ws);
  cfg.seed = ws.derived_seed(0xc5);
  const auto rd = train_classifier(*m.device_classifier, un.split(Split::train), un.split(Split::val), cfg);
  save_checkpoint(m.classifier->params(), ws.checkpoint("classifier"), stamp_with(ws, "classifier"));
  save_checkpoint(m.device_classifier->params(), ws.checkpoint("device_classifier"), stamp_with(ws, "device_classifier"));
  nlohmann::json heads;
  for (std::size_t h = 0; h < r.val_accuracy.size(); ++h) heads[attribute_name(all_heads()[h])] = r.val_accuracy[h];
  return {{"val_accuracy", heads}, {"device_classifier_val_accuracy", rd.val_accuracy.front()}};
}

struct EditEnv {
  Models models;
  DiffusionSchedule schedule;
  std::unique_ptr<ContextCache> contexts;

  EditModels view() const { return {*models.unet, *models.ae, *models.text, *models.image, schedule}; }
};

inline EditEnv edit_env(const Workspace& ws, unsigned extra_needs = 0) {
  EditEnv env{load_models(ws, kNeedAe | kNeedClip | kNeedUnet | extra_needs), ws.config().schedule.build(), nullptr};
  env.contexts = std::make_unique<ContextCache>(*env.models.text);
  return env;
}

inline nlohmann::json cmd_invert(const Workspace& ws, const fs::path& image_path, const std::string& prompt) {
  const auto out = ws.dir() / "invert" / image_path.stem();
  ws.claim({out / "inversion.json"});
  auto env = edit_env(ws);
  const auto img = read_png(image_path);
  const auto inv = invert(env.view(), *env.contexts, img, prompt, ws.config().edit);
  const auto rec = env.models.ae->decode_image(inv.reconstruction);
  fs::create_directories(out);
  write_png(rec, out / "reconstruction.png");
  nlohmann::json j = ws.stamp("inversion");
  j["image"] = image_path.string();
  j["prompt"] = prompt;
  j["timesteps"] = inv.trajectory.plan.timesteps;
  j["null_loss_before"] = inv.nulls.loss_before;
  j["null_loss_after"] = inv.nulls.loss_after;
  j["reconstruction_l1"] = l1_identity(img, rec);
  write_json(out / "inversion.json", j);
  return j;
}

inline nlohmann::json cmd_edit(const Workspace& ws, const fs::path& image_path, const std::string& orig_prompt,
                               const std::string& edit_prompt) {
  const auto out = ws.dir() / "edit" / image_path.stem();
  ws.claim({out / "session.json"});
  auto env = edit_env(ws);
  const auto s = run_edit_session(env.view(), *env.contexts, read_png(image_path), orig_prompt, edit_prompt, ws.config().edit);
  auto j = write_edit_session(s, out, "edit");
  j.update(ws.stamp("edit_session"));
  j["image"] = image_path.string();
  write_json(out / "session.json", j);
  return j;
}

// ---------------------------------------------------------------------------
// Evaluation

struct EditMeasurement {
  std::size_t sample = 0;
  std::optional<double> score;
  bool accepted = false;
  double p_orig = 0, p_cf = 0, p_identity = 0;
  double l1 = 0, l1_identity_edit = 0;
  double cpg = 0, cpg_identity = 0;
  double change_inside = 0, change_outside = 0;
};

struct EditEvaluation {
  std::vector<EditMeasurement> edits;
  std::vector<EditSession> sessions;

  std::size_t accepted() const {
    std::size_t n = 0;
    for (const auto& e : edits) n += e.accepted;
    return n;
  }
  double flip_rate() const {
    std::size_t n = 0, f = 0;
    for (const auto& e : edits) {
      if (!e.accepted) continue;
      ++n;
      f += e.p_cf < 0.5;
    }
    return n ? static_cast<double>(f) / static_cast<double>(n) : 0.0;
  }
  double mean_accepted(double EditMeasurement::*field) const {
    double s = 0;
    std::size_t n = 0;
    for (const auto& e : edits) {
      if (!e.accepted) continue;
      s += e.*field;
      ++n;
    }
    return n ? s / static_cast<double>(n) : 0.0;
  }
  double mean_all(double EditMeasurement::*field) const {
    double s = 0;
    for (const auto& e : edits) s += e.*field;
    return edits.empty() ? 0.0 : s / static_cast<double>(edits.size());
  }
  std::size_t local_count() const {
    std::size_t n = 0;
    for (const auto& e : edits) n += e.change_outside < e.change_inside;
    return n;
  }

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["count"] = edits.size();
    j["accepted"] = accepted();
    j["flip_rate"] = flip_rate();
    j["mean_l1_accepted"] = mean_accepted(&EditMeasurement::l1);
    j["mean_cpg_accepted"] = mean_accepted(&EditMeasurement::cpg);
    j["mean_cpg_identity"] = mean_all(&EditMeasurement::cpg_identity);
    j["local_count"] = local_count();
    j["edits"] = nlohmann::json::array();
    for (const auto& e : edits) {
      j["edits"].push_back({{"sample", e.sample},
                            {"score", e.score ? nlohmann::json(*e.score) : nlohmann::json(nullptr)},
                            {"accepted", e.accepted},
                            {"p_orig", e.p_orig},
                            {"p_cf", e.p_cf},
                            {"p_identity", e.p_identity},
                            {"l1", e.l1},
                            {"cpg", e.cpg},
                            {"cpg_identity", e.cpg_identity},
                            {"change_inside", e.change_inside},
                            {"change_outside", e.change_outside}});
    }
    return j;
  }
};

inline const MultiHeadClassifier& cpg_classifier(const Models& m, const RunConfig& c) {
  return c.eval.cpg_mode == "head" ? *m.classifier : *m.device_classifier;
}

/// Device-removal edits on the first `count` device-bearing test samples,
/// each paired with a tau = 1 identity edit of the same inversion.
inline EditEvaluation evaluate_device_removal(const EditEnv& env, const RunConfig& c, const SampleView& test, int count) {
  EditEvaluation ev;
  const auto& clf = cpg_classifier(env.models, c);
  const auto view = env.view();
  auto identity_cfg = c.edit;
  identity_cfg.tau = 1.0;
  for (std::size_t i = 0; i < test.size() && static_cast<int>(ev.edits.size()) < count; ++i) {
    const auto* s = test[i];
    if (!s->record.device) continue;
    const auto prompts = make_edit_prompts(s->record, {{Attribute::device, EditAction::remove}});
    const auto& p0 = prompts.original.text;
    const auto& p1 = prompts.edited.text;
    const auto inv = invert(view, *env.contexts, s->image, p0, c.edit);
    const auto out = edit(view, *env.contexts, inv, p0, p1, c.edit);
    const auto idn = edit(view, *env.contexts, inv, p0, p0, identity_cfg);

    EditSession session;
    session.original = s->image;
    session.orig_prompt = p0;
    session.edit_prompt = p1;
    session.reconstruction = out.reconstruction;
    session.counterfactual = out.counterfactual;
    session.null_loss_before = inv.nulls.loss_before;
    session.null_loss_after = inv.nulls.loss_after;
    session.threshold = c.edit.clip_threshold;
    try {
      session.score = clip_edit_score(view, s->image, out.counterfactual, p0, p1);
    } catch (const DegenerateEditError& e) {
      session.status = e.what();
    }
    session.accepted = session.score && *session.score >= session.threshold;

    EditMeasurement e;
    e.sample = i;
    e.score = session.score;
    e.accepted = session.accepted;
    e.p_orig = clf.probability(s->image, Attribute::device);
    e.p_cf = clf.probability(out.counterfactual, Attribute::device);
    e.p_identity = clf.probability(idn.counterfactual, Attribute::device);
    e.l1 = l1_identity(s->image, out.counterfactual);
    e.l1_identity_edit = l1_identity(s->image, idn.counterfactual);
    e.cpg = std::abs(e.p_orig - e.p_cf);
    e.cpg_identity = std::abs(e.p_orig - e.p_identity);
    const auto& mask = s->masks[static_cast<std::size_t>(rendered_index(Attribute::device))];
    double in = 0, outside = 0;
    std::size_t ni = 0, no = 0;
    for (std::size_t k = 0; k < mask.bits.size(); ++k) {
      const double d = std::abs(double(s->image.pixels[k]) - out.counterfactual.pixels[k]);
      if (mask.bits[k]) {
        in += d;
        ++ni;
      } else {
        outside += d;
        ++no;
      }
    }
    e.change_inside = ni ? in / static_cast<double>(ni) : 0.0;
    e.change_outside = no ? outside / static_cast<double>(no) : 0.0;
    ev.edits.push_back(e);
    ev.sessions.push_back(std::move(session));
  }
  return ev;
}

/// Writes edits.json and one set of session images per edit.
inline nlohmann::json save_edit_evaluation(const Workspace& ws, const EditEvaluation& ev) {
  for (std::size_t i = 0; i < ev.sessions.size(); ++i) {
    char stem[32];
    std::snprintf(stem, sizeof stem, "edit_%03zu", i);
    write_edit_session(ev.sessions[i], ws.eval_dir() / "sessions", stem);
  }
  auto j = ev.to_json();
  j["metadata"] = ws.stamp("edit_evaluation");
  write_json(ws.eval_dir() / "edits.json", j);
  return j;
}

inline nlohmann::json cmd_eval(const Workspace& ws) {
  ws.claim({ws.eval_dir() / "edits.json"});
  const auto corpus = load_data(ws);
  auto env = edit_env(ws, kNeedClassifiers);
  return save_edit_evaluation(
      ws, evaluate_device_removal(env, ws.config(), corpus.split(Split::test), ws.config().eval.num_edits));
}

struct AugmentationSets {
  std::vector<SyntheticSample> counterfactuals;
  std::vector<SyntheticSample> generated;
  std::size_t attempted = 0;
};

/// Counterfactuals for both anti-correlated subgroups, taken from the
/// training split: device removed from (device, disease_a) images and added
/// to images with neither. Only edits passing the score filter are kept and
/// are labelled by their edit prompt. The generated arm samples the same
/// prompts from noise.
inline AugmentationSets make_augmentation_sets(const EditEnv& env, const RunConfig& c, const SampleView& train) {
  AugmentationSets sets;
  const auto view = env.view();
  const int per = c.eval.counterfactuals_per_subgroup;
  int removed = 0, added = 0;
  const auto plan = make_plan(env.schedule, c.edit.steps);
  std::uint64_t gen_seed = Rng::mix(c.seed, 0x9e0);
  std::vector<std::pair<std::string, AttributeRecord>> gen_prompts;
  for (const auto* s : train) {
    if (removed >= per && added >= per) break;
    const bool remove = s->record.device && s->record.disease_a;
    const bool add = !s->record.device && !s->record.disease_a;
    if ((!remove || removed >= per) && (!add || added >= per)) continue;
    const auto prompts =
        make_edit_prompts(s->record, {{Attribute::device, remove ? EditAction::remove : EditAction::add}});
    ++sets.attempted;
    const auto session = run_edit_session(view, *env.contexts, s->image, prompts.original.text, prompts.edited.text, c.edit);
    gen_prompts.emplace_back(prompts.edited.text, prompts.edited.source_record);
    if (!session.accepted) continue;
    (remove ? removed : added)++;
    SyntheticSample cf;
    cf.image = session.counterfactual;
    cf.record = prompts.edited.source_record;
    cf.caption = prompts.edited;
    cf.seed = s->seed;
    sets.counterfactuals.push_back(std::move(cf));
  }
  // Same prompt mix as the attempted edits, capped at the configured count.
  const std::size_t n_gen = std::min(gen_prompts.size(), static_cast<std::size_t>(2 * c.eval.generated_per_subgroup));
  for (std::size_t i = 0; i < n_gen; ++i) {
    SyntheticSample g;
    g.image = sample(*env.models.unet, *env.models.ae, *env.contexts, gen_prompts[i].first, env.schedule, plan,
                     c.edit.guidance, gen_seed + i);
    g.record = gen_prompts[i].second;
    g.seed = gen_seed + i;
    sets.generated.push_back(std::move(g));
  }
  return sets;
}

inline Corpus anticorrelated_test(const RunConfig& c) {
  return generate_subgroup(c.corpus, Subgroup::anticorrelated, c.eval.anti_test_size,
                           c.seed + kAnticorrelatedSeedOffset);
}

inline AugmentationConfig augmentation_config(const RunConfig& c) {
  AugmentationConfig ac;
  ac.classifier = c.classifier;
  ac.seeds = c.eval.seeds;
  ac.min_counterfactuals = c.eval.min_counterfactuals;
  return ac;
}

inline std::vector<ArmReport> run_augmentation(const EditEnv& env, const RunConfig& c, const Corpus& corpus,
                                               AugmentationSets* keep = nullptr) {
  auto sets = make_augmentation_sets(env, c, corpus.split(Split::train));
  SampleView cf, gen;
  for (const auto& s : sets.counterfactuals) cf.push_back(&s);
  for (const auto& s : sets.generated) gen.push_back(&s);
  const auto anti = anticorrelated_test(c);
  SampleView anti_view;
  for (const auto& s : anti.samples) anti_view.push_back(&s);
  auto arms = augmentation_experiment(corpus.split(Split::train), cf, gen, corpus.split(Split::test), anti_view,
                                      augmentation_config(c));
  if (keep) *keep = std::move(sets);
  return arms;
}

inline nlohmann::json arms_to_json(const std::vector<ArmReport>& arms) {
  EvalReport r;
  r.arms = arms;
  return r.to_json()["arms"];
}

inline std::vector<ArmReport> arms_from_json(const nlohmann::json& j) {
  std::vector<ArmReport> out;
  for (const auto& a : j) {
    ArmReport r;
    r.arm = a.at("arm").get<std::string>();
    r.extra_samples = a.at("extra_samples").get<std::size_t>();
    r.standard = a.at("standard").get<std::vector<HeadScores>>();
    r.anticorrelated = a.at("anticorrelated").get<std::vector<HeadScores>>();
    out.push_back(std::move(r));
  }
  return out;
}

inline nlohmann::json save_augmentation(const Workspace& ws, const AugmentationSets& sets,
                                        const std::vector<ArmReport>& arms) {
  nlohmann::json j;
  j["metadata"] = ws.stamp("augmentation");
  j["attempted_edits"] = sets.attempted;
  j["counterfactuals"] = sets.counterfactuals.size();
  j["generated"] = sets.generated.size();
  j["arms"] = arms_to_json(arms);
  write_json(ws.eval_dir() / "augmentation.json", j);
  return j;
}

inline nlohmann::json cmd_augment(const Workspace& ws) {
  ws.claim({ws.eval_dir() / "augmentation.json"});
  const auto corpus = load_data(ws);
  auto env = edit_env(ws);
  AugmentationSets sets;
  const auto arms = run_augmentation(env, ws.config(), corpus, &sets);
  return save_augmentation(ws, sets, arms);
}

inline EvalReport build_report(const Workspace& ws, const nlohmann::json& edits, const nlohmann::json& augmentation) {
  EvalReport r;
  r.edits_total = edits.at("count").get<std::size_t>();
  r.edits_accepted = edits.at("accepted").get<std::size_t>();
  r.mean_l1 = edits.at("mean_l1_accepted").get<double>();
  r.mean_cpg = edits.at("mean_cpg_accepted").get<double>();
  r.arms = arms_from_json(augmentation.at("arms"));
  r.metadata = ws.stamp("eval_report");
  r.metadata["eval_seeds"] = ws.config().eval.seeds;
  r.metadata["config"] = to_json(ws.config());
  return r;
}

inline nlohmann::json cmd_report(const Workspace& ws) {
  const auto edits_path = ws.eval_dir() / "edits.json";
  const auto aug_path = ws.eval_dir() / "augmentation.json";
  ws.require(edits_path, "eval");
  ws.require(aug_path, "augment-exp");
  ws.claim({ws.dir() / "eval_report.json"});
  const auto report = build_report(ws, read_json(edits_path), read_json(aug_path));
  write_json(ws.dir() / "eval_report.json", report.to_json());
  write_text(ws.dir() / "eval_report.txt", report.table());
  // Panels: original | reconstruction | counterfactual | difference.
  std::size_t panels = 0;
  const auto sessions = ws.eval_dir() / "sessions";
  if (fs::exists(sessions)) {
    std::vector<fs::path> found;
    for (const auto& e : fs::directory_iterator(sessions)) {
      if (e.path().string().ends_with("_panel.png")) found.push_back(e.path());
    }
    std::sort(found.begin(), found.end());
    for (const auto& p : found) {
      fs::create_directories(ws.dir() / "figures");
      fs::copy_file(p, ws.dir() / "figures" / p.filename(), fs::copy_options::overwrite_existing);
      if (++panels == 8) break;
    }
  }
  auto j = report.to_json();
  j["panels"] = panels;
  return j;
}

inline nlohmann::json grad_check_report() {
  nlohmann::json j = nlohmann::json::array();
  for (const auto& check : primitive_checks()) {
    double worst = 0.0;
    for (std::uint64_t seed = 0; seed < 5; ++seed) worst = std::max(worst, check.run(seed));
    j.push_back({{"primitive", check.name}, {"max_relative_error", worst}, {"pass", worst <= 1e-3}});
  }
  return j;
}

inline nlohmann::json cmd_grad_check(const Workspace& ws) {
  const auto out = ws.dir() / "grad_check.json";
  ws.claim({out});
  nlohmann::json j;
  j["metadata"] = ws.stamp("grad_check");
  j["primitives"] = grad_check_report();
  bool all = true;
  for (const auto& p : j["primitives"]) all = all && p["pass"].get<bool>();
  j["all_pass"] = all;
  write_json(out, j);
  return j;
}

}  // namespace cfdiff
