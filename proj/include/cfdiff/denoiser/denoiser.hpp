// Copyright 2026 The cfdiff Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "cfdiff/denoiser/unet.hpp"
#include "cfdiff/encoders/encoders.hpp"
#include "cfdiff/numerics/optim.hpp"
#include "cfdiff/schedule/schedule.hpp"

namespace cfdiff {

/// Default noise schedule: scaled-linear betas over 1000 steps.
inline DiffusionSchedule default_schedule() { return DiffusionSchedule::make(BetaKind::scaled_linear, 1000, 85e-5, 12e-3); }

/// Memoized text contexts for the frozen text encoder. The empty string maps
/// to the null prompt.
class ContextCache {
 public:
  explicit ContextCache(const TextEncoder& text) : text_(&text) {}

  Tensor get(const std::string& prompt) {
    auto it = cache_.find(prompt);
    if (it != cache_.end()) return it->second;
    NoGradGuard ng;
    const int L = text_->config().length;
    const auto toks = prompt.empty() ? null_tokens(L) : tokenize(prompt, L);
    auto ctx = text_->encode(std::vector<TokenSequence>{toks}).context;
    cache_.emplace(prompt, ctx);
    return ctx;
  }

  Tensor null() { return get(""); }

  Tensor batch(const std::vector<std::string>& prompts) {
    std::vector<Tensor> parts;
    parts.reserve(prompts.size());
    for (const auto& p : prompts) parts.push_back(get(p));
    return ops::concat(parts, 0);
  }

 private:
  const TextEncoder* text_;
  std::map<std::string, Tensor> cache_;
};

struct FinetuneConfig {
  int epochs = 60;
  int batch = 32;
  double lr = 2e-3;
  /// Fraction of captions replaced by the null prompt.
  double null_prob = 0.1;
  double negation_prob = 0.5;
  std::uint64_t seed = 0;
  /// Stops early after this many optimizer steps when positive.
  int max_steps = 0;
};

struct FinetuneResult {
  std::vector<double> losses;
  int epochs_run = 0;
};

/// Moving average with a trailing window (shorter at the start).
inline std::vector<double> smooth(const std::vector<double>& v, int window) {
  std::vector<double> out(v.size());
  double acc = 0.0;
  for (std::size_t i = 0; i < v.size(); ++i) {
    acc += v[i];
    if (i >= static_cast<std::size_t>(window)) acc -= v[i - static_cast<std::size_t>(window)];
    out[i] = acc / static_cast<double>(std::min<std::size_t>(i + 1, static_cast<std::size_t>(window)));
  }
  return out;
}

inline void write_loss_csv(const std::string& path, const std::vector<double>& losses) {
  std::ofstream out(path);
  if (!out) throw DenoiserError("cannot write loss curve to " + path);
  out << "step,loss\n";
  out.precision(9);
  for (std::size_t i = 0; i < losses.size(); ++i) out << i << ',' << losses[i] << '\n';
}

/// Latents of every sample under the frozen codec, [N, C, h, w].
inline Tensor encode_latents(const LatentAutoencoder& ae, const SampleView& samples, int chunk = 64) {
  NoGradGuard ng;
  std::vector<Tensor> parts;
  for (std::size_t s = 0; s < samples.size(); s += static_cast<std::size_t>(chunk)) {
    std::vector<std::size_t> idx;
    for (std::size_t i = s; i < std::min(samples.size(), s + static_cast<std::size_t>(chunk)); ++i) idx.push_back(i);
    parts.push_back(ae.encode(batch_images(samples, idx)));
  }
  return ops::concat(parts, 0);
}

/// Rows `idx` of a [N, ...] tensor as a new constant tensor.
inline Tensor take_rows(const Tensor& x, const std::vector<std::size_t>& idx) {
  const std::size_t per = x.numel() / static_cast<std::size_t>(x.dim(0));
  std::vector<float> out;
  out.reserve(per * idx.size());
  for (auto i : idx) {
    const auto row = x.data().subspan(i * per, per);
    out.insert(out.end(), row.begin(), row.end());
  }
  Shape shape = x.shape();
  shape[0] = static_cast<int>(idx.size());
  return Tensor::from_data(shape, std::move(out));
}

/// Noise-prediction training of the U-Net only; the codec and text encoder
/// are read but never written.
inline FinetuneResult finetune(UNet& unet, const LatentAutoencoder& ae, const TextEncoder& text, const SampleView& train,
                               const DiffusionSchedule& schedule, const FinetuneConfig& cfg) {
  if (train.empty()) throw DenoiserError("finetune: empty training set");
  if (cfg.epochs <= 0 || cfg.batch <= 0 || !(cfg.lr > 0.0)) throw DenoiserError("finetune: epochs, batch and lr must be positive");
  const auto latents = encode_latents(ae, train);
  ContextCache contexts(text);
  Adam opt(unet.params().tensors(), {.lr = cfg.lr});
  BatchSampler sampler(train.size(), Rng::mix(cfg.seed, 0xd1f));
  Rng rng(Rng::mix(cfg.seed, 0x7e5));
  const int batch = std::min<int>(cfg.batch, static_cast<int>(train.size()));
  const int per_epoch = static_cast<int>((train.size() + static_cast<std::size_t>(batch) - 1) / static_cast<std::size_t>(batch));
  int total = per_epoch * cfg.epochs;
  if (cfg.max_steps > 0) total = std::min(total, cfg.max_steps);
  const int T = schedule.num_steps();
  FinetuneResult res;
  for (int step = 0; step < total; ++step) {
    const auto idx = sampler.next(static_cast<std::size_t>(batch));
    std::vector<std::string> prompts;
    std::vector<int> t;
    for (auto i : idx) {
      if (rng.bernoulli(cfg.null_prob)) {
        prompts.emplace_back();
      } else {
        prompts.push_back(training_caption(train[i]->record, rng, cfg.negation_prob).text);
      }
      t.push_back(static_cast<int>(rng.below(static_cast<std::uint64_t>(T))));
    }
    const auto z0 = take_rows(latents, idx);
    const auto eps = Tensor::randn(z0.shape(), rng);
    const auto zt = add_noise(z0, eps, t, schedule);
    opt.set_lr(cosine_lr(cfg.lr, step, total));
    opt.zero_grad();
    auto loss = ops::mse_loss(unet.forward(zt, t, contexts.batch(prompts)), eps);
    const double lv = loss.item();
    if (!std::isfinite(lv)) {
      throw DenoiserError("finetune: non-finite loss at step " + std::to_string(step) + " (lr " +
                          std::to_string(cosine_lr(cfg.lr, step, total)) + ")");
    }
    backward(loss);
    opt.step();
    res.losses.push_back(lv);
  }
  res.epochs_run = (total + per_epoch - 1) / per_epoch;
  unet.set_trained(true);
  return res;
}

/// Classifier-free guidance: uncond + w (cond - uncond). w == 1 and w == 0
/// evaluate only the branch they select.
inline Tensor cfg_eps(const UNet& unet, const Tensor& z, int t, const Tensor& cond, const Tensor& uncond, double w,
                      AttentionController* ctl = nullptr) {
  if (!(w >= 0.0)) throw DenoiserError("cfg_eps: guidance weight must be >= 0");
  if (cond.shape() != uncond.shape()) {
    throw DenoiserError("cfg_eps: context shapes " + shape_str(cond.shape()) + " and " + shape_str(uncond.shape()) + " differ");
  }
  if (w == 1.0) return unet.forward(z, t, cond, ctl);
  if (w == 0.0) return unet.forward(z, t, uncond, ctl);
  const int B = z.dim(0);
  auto both = unet.forward(ops::concat<float>({z, z}, 0), t, ops::concat<float>({uncond, cond}, 0), ctl);
  auto eu = ops::narrow(both, 0, 0, B);
  auto ec = ops::narrow(both, 0, B, B);
  return ops::combine(1.0 - w, eu, w, ec);
}

inline Tensor gaussian_latent(const Shape& latent_shape, std::uint64_t seed) {
  Rng rng(Rng::mix(seed, 0x5a3));
  Shape s{1};
  s.insert(s.end(), latent_shape.begin(), latent_shape.end());
  return Tensor::randn(s, rng);
}

/// Guided DDIM generation from a seeded Gaussian latent; returns the final latent.
inline Tensor sample_latent(const UNet& unet, ContextCache& contexts, const std::string& prompt,
                            const DiffusionSchedule& schedule, const TimestepPlan& plan, double w, std::uint64_t seed) {
  if (!unet.trained()) throw DenoiserError("sample: U-Net weights are untrained");
  NoGradGuard ng;
  const auto cond = contexts.get(prompt);
  const auto uncond = contexts.null();
  const auto& c = unet.config();
  auto z = gaussian_latent({c.in_channels, c.resolution, c.resolution}, seed);
  for (const auto& [t, t_prev] : plan.transitions()) {
    z = ddim_step(z, cfg_eps(unet, z, t, cond, uncond, w), t, t_prev, schedule);
  }
  return z;
}

inline Image sample(const UNet& unet, const LatentAutoencoder& ae, ContextCache& contexts, const std::string& prompt,
                    const DiffusionSchedule& schedule, const TimestepPlan& plan, double w, std::uint64_t seed) {
  return ae.decode_image(sample_latent(unet, contexts, prompt, schedule, plan, w, seed));
}

}  // namespace cfdiff
