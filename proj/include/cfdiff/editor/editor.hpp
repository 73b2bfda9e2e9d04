// Copyright 2026 The cfdiff Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <filesystem>
#include <limits>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "cfdiff/denoiser/denoiser.hpp"
#include "cfdiff/io/image.hpp"
#include "json.hpp"

namespace cfdiff {

class EditError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Raised when an edit leaves the image or the prompt embedding unchanged,
/// so no direction can be scored.
class DegenerateEditError : public EditError {
 public:
  using EditError::EditError;
};

struct EditConfig {
  double guidance = 4.0;
  /// Guidance used while inverting; 1 means the conditional branch alone.
  double inversion_guidance = 1.0;
  int null_inner_steps = 10;
  double null_lr = 1e-2;
  double null_early_stop = 1e-5;
  /// Fraction of sampling steps that reuse the source prompt's attention.
  double tau = 0.8;
  double clip_threshold = 0.1;
  int steps = 25;

  void validate() const {
    if (!(guidance >= 0.0) || !(inversion_guidance >= 0.0)) throw EditError("edit config: guidance must be >= 0");
    if (null_inner_steps < 0) throw EditError("edit config: null_inner_steps must be >= 0");
    if (!(null_lr > 0.0)) throw EditError("edit config: null_lr must be positive");
    if (!(tau >= 0.0 && tau <= 1.0)) throw EditError("edit config: tau must lie in [0, 1]");
    if (!(clip_threshold >= -1.0 && clip_threshold <= 1.0)) throw EditError("edit config: threshold must lie in [-1, 1]");
    if (steps < 1) throw EditError("edit config: steps must be >= 1");
  }
};

/// Frozen components shared by every edit.
struct EditModels {
  const UNet& unet;
  const LatentAutoencoder& ae;
  const TextEncoder& text;
  const ImageEncoder& image;
  const DiffusionSchedule& schedule;
};

/// latents[0] is the clean latent; latents[k] sits at plan.timesteps[k - 1].
struct LatentTrajectory {
  std::vector<Tensor> latents;
  TimestepPlan plan;
  std::string prompt;

  const Tensor& noisy() const { return latents.back(); }
};

/// One optimized unconditional context per plan timestep, indexed like
/// plan.timesteps.
struct NullEmbeddings {
  std::vector<Tensor> contexts;
  std::vector<double> loss_before;
  std::vector<double> loss_after;
};

struct Inversion {
  LatentTrajectory trajectory;
  NullEmbeddings nulls;
  /// Final latent of the guided reconstruction pass.
  Tensor reconstruction;
  double guidance = 0.0;
};

inline void require_frozen(const ParameterSet& ps, const char* what) {
  for (const auto& [name, t] : ps.named()) {
    if (t.requires_grad()) throw EditError(std::string(what) + " must be frozen before editing (" + name + " is trainable)");
  }
}

/// DDIM inversion of `img` under `prompt`, then per-timestep optimization of
/// the unconditional context so guided sampling retraces the inverted path.
inline Inversion invert(const EditModels& m, ContextCache& contexts, const Image& img, const std::string& prompt,
                        const EditConfig& cfg) {
  cfg.validate();
  require_frozen(m.unet.params(), "U-Net");
  if (!m.unet.trained()) throw EditError("invert: U-Net weights are untrained");
  const auto cond = contexts.get(prompt);
  Inversion inv;
  inv.guidance = cfg.guidance;
  auto& traj = inv.trajectory;
  traj.plan = make_plan(m.schedule, cfg.steps, PlanDirection::inversion);
  traj.prompt = prompt;
  {
    NoGradGuard ng;
    auto z = m.ae.encode(img);
    traj.latents.push_back(z);
    for (const auto& [from, to] : traj.plan.transitions()) {
      z = ddim_invert_step(z, cfg_eps(m.unet, z, to, cond, contexts.null(), cfg.inversion_guidance), from, to, m.schedule);
      traj.latents.push_back(z);
    }
  }

  const std::size_t S = traj.plan.size();
  auto& nulls = inv.nulls;
  nulls.contexts.resize(S);
  nulls.loss_before.resize(S);
  nulls.loss_after.resize(S);
  Tensor z = traj.noisy();
  Tensor e = contexts.null().detach();
  const auto transitions = traj.plan.reversed().transitions();
  for (std::size_t k = 0; k < transitions.size(); ++k) {
    const auto [t, t_prev] = transitions[k];
    const std::size_t slot = S - 1 - k;
    const Tensor& target = traj.latents[slot];
    Tensor eps_cond;
    {
      NoGradGuard ng;
      eps_cond = m.unet.forward(z, t, cond);
    }
    auto loss_of = [&](const Tensor& uncond) {
      auto eps = ops::combine(1.0 - cfg.guidance, m.unet.forward(z, t, uncond), cfg.guidance, eps_cond);
      return ops::mse_loss(ddim_step(z, eps, t, t_prev, m.schedule), target);
    };
    e.set_requires_grad(true);
    Adam opt({e}, {.lr = cfg.null_lr});
    Tensor best = e.detach();
    double before = 0.0, best_loss = std::numeric_limits<double>::infinity();
    for (int it = 0; it <= cfg.null_inner_steps; ++it) {
      auto loss = loss_of(e);
      const double lv = loss.item();
      if (!std::isfinite(lv)) throw EditError("invert: non-finite null-text loss at t=" + std::to_string(t));
      if (it == 0) before = lv;
      if (lv > 10.0 * before && lv > cfg.null_early_stop) {
        throw EditError("invert: null-text optimization diverged at t=" + std::to_string(t) + " (loss " +
                        std::to_string(lv) + " vs initial " + std::to_string(before) + ")");
      }
      if (lv < best_loss) {
        best_loss = lv;
        best = e.detach();
      }
      if (it == cfg.null_inner_steps || lv < cfg.null_early_stop) break;
      opt.zero_grad();
      backward(loss);
      opt.step();
    }
    nulls.contexts[slot] = best;
    nulls.loss_before[slot] = before;
    nulls.loss_after[slot] = best_loss;
    {
      NoGradGuard ng;
      z = ddim_step(z, cfg_eps(m.unet, z, t, cond, best, cfg.guidance), t, t_prev, m.schedule);
    }
    e = best.detach();
  }
  inv.reconstruction = z;
  return inv;
}

/// One cross-attention map set from a single forward pass.
struct LayerAttention {
  int layer = 0;
  int batch = 0;
  int heads = 0;
  int queries = 0;
  int keys = 0;
  std::vector<float> probs;  // [batch, heads, queries, keys]

  /// Map of one batch element, [heads, queries, keys].
  std::vector<float> sample(int b) const {
    const std::size_t per = static_cast<std::size_t>(heads) * queries * keys;
    return {probs.begin() + static_cast<std::ptrdiff_t>(b * per), probs.begin() + static_cast<std::ptrdiff_t>((b + 1) * per)};
  }
};

using AttentionRecord = std::vector<LayerAttention>;

/// Copies every map it sees and never modifies them.
class AttentionCapture : public AttentionController {
 public:
  bool on_attention(int layer, std::span<float> probs, int batch, int heads, int queries, int keys) override {
    record_.push_back({layer, batch, heads, queries, keys, {probs.begin(), probs.end()}});
    return false;
  }
  const AttentionRecord& record() const { return record_; }
  void clear() { record_.clear(); }

 private:
  AttentionRecord record_;
};

inline AttentionRecord get_attention_maps(const UNet& unet, const Tensor& z, int t, const Tensor& context) {
  NoGradGuard ng;
  AttentionCapture cap;
  unet.forward(z, t, context, &cap);
  return cap.record();
}

/// Replaces the edited prompt's maps with the source prompt's maps for
/// aligned tokens. The last two batch entries are the source and edited
/// conditional branches.
class AttentionInjection : public AttentionController {
 public:
  explicit AttentionInjection(std::vector<int> alignment) : alignment_(std::move(alignment)) {}

  void set_active(bool on) { active_ = on; }

  bool on_attention(int, std::span<float> probs, int batch, int heads, int queries, int keys) override {
    if (!active_) return false;
    if (batch < 2 || static_cast<int>(alignment_.size()) != keys) {
      throw EditError("attention injection: unexpected batch " + std::to_string(batch) + " or key count " +
                      std::to_string(keys));
    }
    const std::size_t per = static_cast<std::size_t>(heads) * queries * keys;
    const float* src = probs.data() + static_cast<std::size_t>(batch - 2) * per;
    float* dst = probs.data() + static_cast<std::size_t>(batch - 1) * per;
    for (std::size_t row = 0; row < static_cast<std::size_t>(heads) * queries; ++row) {
      for (int j = 0; j < keys; ++j) {
        const int i = alignment_[static_cast<std::size_t>(j)];
        if (i >= 0) dst[row * keys + j] = src[row * keys + i];
      }
    }
    return true;
  }

 private:
  std::vector<int> alignment_;
  bool active_ = false;
};

struct EditOutput {
  Tensor latent;
  Image counterfactual;
  Image reconstruction;
  /// Latents of the source and edited branches after every sampling step.
  std::vector<Tensor> source_path;
  std::vector<Tensor> edit_path;
};

/// Guided sampling from the inverted noise under `edit_prompt`, running the
/// source prompt alongside and injecting its attention for the first
/// ceil(tau * S) steps.
inline EditOutput edit(const EditModels& m, ContextCache& contexts, const Inversion& inv, const std::string& orig_prompt,
                       const std::string& edit_prompt, const EditConfig& cfg) {
  cfg.validate();
  require_frozen(m.unet.params(), "U-Net");
  if (normalize_text(orig_prompt) != normalize_text(inv.trajectory.prompt)) {
    throw EditError("edit: source prompt '" + orig_prompt + "' does not match the inverted prompt '" +
                    inv.trajectory.prompt + "'");
  }
  const auto& plan = inv.trajectory.plan;
  if (inv.nulls.contexts.size() != plan.size()) throw EditError("edit: null embeddings do not match the trajectory");
  const int L = m.text.config().length;
  AttentionInjection inject(align_tokens(tokenize(orig_prompt, L), tokenize(edit_prompt, L)));
  const auto cond = ops::concat<float>({contexts.get(orig_prompt), contexts.get(edit_prompt)}, 0);
  const int S = static_cast<int>(plan.size());
  const int inject_steps = static_cast<int>(std::ceil(cfg.tau * S - 1e-9));

  NoGradGuard ng;
  auto z = ops::concat<float>({inv.trajectory.noisy(), inv.trajectory.noisy()}, 0);
  EditOutput out;
  const auto transitions = plan.reversed().transitions();
  for (int k = 0; k < S; ++k) {
    const auto [t, t_prev] = transitions[static_cast<std::size_t>(k)];
    const auto& e = inv.nulls.contexts[static_cast<std::size_t>(S - 1 - k)];
    inject.set_active(k < inject_steps);
    const auto eps = cfg_eps(m.unet, z, t, cond, ops::concat<float>({e, e}, 0), inv.guidance, &inject);
    z = ddim_step(z, eps, t, t_prev, m.schedule);
    out.source_path.push_back(ops::narrow(z, 0, 0, 1).detach());
    out.edit_path.push_back(ops::narrow(z, 0, 1, 1).detach());
  }
  out.latent = out.edit_path.back();
  out.counterfactual = m.ae.decode_image(out.latent);
  out.reconstruction = m.ae.decode_image(out.source_path.back());
  return out;
}

/// Cosine between an image-embedding delta and a prompt-embedding delta.
inline double directional_similarity(std::span<const float> delta_image, std::span<const float> delta_prompt) {
  if (delta_image.size() != delta_prompt.size()) throw EditError("directional similarity: dimension mismatch");
  double dot = 0, ni = 0, np = 0;
  for (std::size_t i = 0; i < delta_image.size(); ++i) {
    dot += double(delta_image[i]) * delta_prompt[i];
    ni += double(delta_image[i]) * delta_image[i];
    np += double(delta_prompt[i]) * delta_prompt[i];
  }
  ni = std::sqrt(ni);
  np = std::sqrt(np);
  if (ni < 1e-8) throw DegenerateEditError("degenerate edit: image embedding unchanged");
  if (np < 1e-8) throw DegenerateEditError("degenerate edit: prompt embedding unchanged");
  return std::clamp(dot / (ni * np), -1.0, 1.0);
}

inline double clip_edit_score(const EditModels& m, const Image& orig, const Image& cf, const std::string& orig_prompt,
                              const std::string& edit_prompt) {
  NoGradGuard ng;
  const auto img = m.image.encode(images_to_tensor({&cf, &orig}));
  const int L = m.text.config().length;
  const auto txt = m.text.encode({tokenize(edit_prompt, L), tokenize(orig_prompt, L)}).joint;
  const int D = img.dim(1);
  std::vector<float> di(static_cast<std::size_t>(D)), dp(static_cast<std::size_t>(D));
  for (int k = 0; k < D; ++k) {
    di[static_cast<std::size_t>(k)] = img.data()[static_cast<std::size_t>(k)] - img.data()[static_cast<std::size_t>(D + k)];
    dp[static_cast<std::size_t>(k)] = txt.data()[static_cast<std::size_t>(k)] - txt.data()[static_cast<std::size_t>(D + k)];
  }
  return directional_similarity(di, dp);
}

/// Indices whose score is at least `threshold`; missing scores never pass.
inline std::vector<std::size_t> filter_edits(const std::vector<std::optional<double>>& scores, double threshold) {
  std::vector<std::size_t> keep;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    if (scores[i] && *scores[i] >= threshold) keep.push_back(i);
  }
  return keep;
}

inline std::vector<std::size_t> filter_edits(const std::vector<double>& scores, double threshold) {
  return filter_edits(std::vector<std::optional<double>>(scores.begin(), scores.end()), threshold);
}

struct EditSession {
  Image original;
  std::string orig_prompt;
  std::string edit_prompt;
  Image reconstruction;
  Image counterfactual;
  std::vector<double> null_loss_before;
  std::vector<double> null_loss_after;
  /// Empty when the edit was degenerate.
  std::optional<double> score;
  std::string status = "ok";
  bool accepted = false;
  double threshold = 0.1;
};

inline EditSession run_edit_session(const EditModels& m, ContextCache& contexts, const Image& img,
                                    const std::string& orig_prompt, const std::string& edit_prompt,
                                    const EditConfig& cfg) {
  EditSession s;
  s.original = img;
  s.orig_prompt = orig_prompt;
  s.edit_prompt = edit_prompt;
  s.threshold = cfg.clip_threshold;
  const auto inv = invert(m, contexts, img, orig_prompt, cfg);
  const auto out = edit(m, contexts, inv, orig_prompt, edit_prompt, cfg);
  s.reconstruction = out.reconstruction;
  s.counterfactual = out.counterfactual;
  s.null_loss_before = inv.nulls.loss_before;
  s.null_loss_after = inv.nulls.loss_after;
  try {
    s.score = clip_edit_score(m, s.original, s.counterfactual, orig_prompt, edit_prompt);
  } catch (const DegenerateEditError& e) {
    s.status = e.what();
  }
  s.accepted = s.score && *s.score >= s.threshold;
  return s;
}

/// Writes original, reconstruction, counterfactual, difference and a joined
/// panel as PNGs under `dir`, and returns the session record.
inline nlohmann::json write_edit_session(const EditSession& s, const std::filesystem::path& dir, const std::string& stem) {
  std::filesystem::create_directories(dir);
  nlohmann::json paths;
  const auto diff = abs_difference(s.original, s.counterfactual);
  const std::vector<std::pair<std::string, const Image*>> images = {
      {"original", &s.original}, {"reconstruction", &s.reconstruction}, {"counterfactual", &s.counterfactual},
      {"difference", &diff}};
  for (const auto& [kind, im] : images) {
    const auto name = stem + "_" + kind + ".png";
    write_png(*im, dir / name);
    paths[kind] = name;
  }
  const auto panel = stem + "_panel.png";
  write_png(hconcat({s.original, s.reconstruction, s.counterfactual, diff}), dir / panel);
  paths["panel"] = panel;
  nlohmann::json j;
  j["paths"] = paths;
  j["orig_prompt"] = s.orig_prompt;
  j["edit_prompt"] = s.edit_prompt;
  j["score"] = s.score ? nlohmann::json(*s.score) : nlohmann::json(nullptr);
  j["status"] = s.status;
  j["accepted"] = s.accepted;
  j["threshold"] = s.threshold;
  j["null_loss_before"] = s.null_loss_before;
  j["null_loss_after"] = s.null_loss_after;
  return j;
}

}  // namespace cfdiff
