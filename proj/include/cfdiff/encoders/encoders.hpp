// Copyright 2026 The cfdiff Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

#include "cfdiff/captions/captions.hpp"
#include "cfdiff/io/image.hpp"
#include "cfdiff/numerics/layers.hpp"
#include "cfdiff/numerics/ops.hpp"
#include "cfdiff/numerics/optim.hpp"
#include "cfdiff/synthdata/synthdata.hpp"

namespace cfdiff {

class EncoderError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// ---------------------------------------------------------------------------
// Text encoder

struct TextEncoderConfig {
  int length = kDefaultTokenLength;
  /// Token width; also the per-token context width handed to the U-Net.
  int width = 64;
  int embed_dim = 64;
  int layers = 2;
  int heads = 4;
  int mlp = 128;
};

struct TextEncoding {
  Tensor joint;    // [B, embed_dim], unit rows
  Tensor context;  // [B, length, width]
};

class TextEncoder {
 public:
  explicit TextEncoder(const TextEncoderConfig& cfg = {}, std::uint64_t seed = 0) : cfg_(cfg) {
    Rng rng(seed);
    const int V = static_cast<int>(vocabulary().size());
    token_emb_ = params_.add("text.token_emb", Tensor::randn({V, cfg.width}, rng, 0.5));
    pos_emb_ = params_.add("text.pos_emb", Tensor::randn({cfg.length, cfg.width}, rng, 0.1));
    for (int l = 0; l < cfg.layers; ++l) {
      const std::string p = "text.layer" + std::to_string(l);
      Block b;
      b.ln1 = nn::LayerNorm(params_, p + ".ln1", cfg.width);
      b.attn = nn::MultiHeadAttention(params_, p + ".attn", rng, cfg.width, cfg.width, cfg.width, cfg.heads);
      b.ln2 = nn::LayerNorm(params_, p + ".ln2", cfg.width);
      b.fc1 = nn::Linear(params_, p + ".fc1", rng, cfg.width, cfg.mlp);
      b.fc2 = nn::Linear(params_, p + ".fc2", rng, cfg.mlp, cfg.width);
      blocks_.push_back(b);
    }
    ln_final_ = nn::LayerNorm(params_, "text.ln_final", cfg.width);
    proj_ = nn::Linear(params_, "text.proj", rng, cfg.width, cfg.embed_dim, false);
  }

  const TextEncoderConfig& config() const { return cfg_; }
  ParameterSet& params() { return params_; }
  const ParameterSet& params() const { return params_; }

  TextEncoding encode(const std::vector<TokenSequence>& batch) const {
    if (batch.empty()) throw EncoderError("encode_text: empty batch");
    const int B = static_cast<int>(batch.size()), L = cfg_.length, D = cfg_.width;
    std::vector<int> ids;
    std::vector<int> end_rows;
    ids.reserve(static_cast<std::size_t>(B * L));
    for (int b = 0; b < B; ++b) {
      const auto& seq = batch[static_cast<std::size_t>(b)];
      if (seq.length() != L) {
        throw EncoderError("encode_text: sequence length " + std::to_string(seq.length()) + ", expected " +
                           std::to_string(L));
      }
      validate_tokens(seq, L);
      ids.insert(ids.end(), seq.ids.begin(), seq.ids.end());
      const auto end = std::find(seq.ids.begin(), seq.ids.end(), kEndId) - seq.ids.begin();
      end_rows.push_back(b * L + static_cast<int>(end));
    }
    auto x = ops::add(ops::reshape(ops::gather_rows(token_emb_, ids), {B, L, D}), pos_emb_);
    for (const auto& blk : blocks_) {
      auto h = blk.ln1(x);
      x = ops::add(x, blk.attn(h, h));
      x = ops::add(x, blk.fc2(ops::gelu(blk.fc1(blk.ln2(x)))));
    }
    x = ln_final_(x);
    // Pool at the end marker, which has attended over the whole prompt.
    auto pooled = ops::gather_rows(ops::reshape(x, {B * L, D}), end_rows);
    return {ops::l2_normalize(proj_(pooled)), x};
  }

  TextEncoding encode(std::string_view text) const { return encode(std::vector<TokenSequence>{tokenize(text, cfg_.length)}); }

 private:
  struct Block {
    nn::LayerNorm ln1, ln2;
    nn::MultiHeadAttention attn;
    nn::Linear fc1, fc2;
  };

  TextEncoderConfig cfg_;
  ParameterSet params_;
  Tensor token_emb_, pos_emb_;
  std::vector<Block> blocks_;
  nn::LayerNorm ln_final_;
  nn::Linear proj_;
};

// ---------------------------------------------------------------------------
// Image encoder

struct ImageEncoderConfig {
  int height = 32;
  int width = 32;
  std::vector<int> channels{16, 32, 64};
  int embed_dim = 64;
};

inline void check_image_batch(const Tensor& images, int height, int width, const char* who) {
  if (images.rank() != 4 || images.dim(1) != 1 || images.dim(2) != height || images.dim(3) != width) {
    throw EncoderError(std::string(who) + ": expected [N, 1, " + std::to_string(height) + ", " +
                       std::to_string(width) + "], got " + shape_str(images.shape()));
  }
}

class ImageEncoder {
 public:
  explicit ImageEncoder(const ImageEncoderConfig& cfg = {}, std::uint64_t seed = 0) : cfg_(cfg) {
    Rng rng(seed);
    int in = 1;
    for (std::size_t i = 0; i < cfg.channels.size(); ++i) {
      const std::string p = "image.conv" + std::to_string(i);
      const int out = cfg.channels[i];
      convs_.emplace_back(params_, p, rng, in, out, 3, i == 0 ? 1 : 2);
      norms_.emplace_back(params_, p + ".gn", out, std::min(8, out));
      in = out;
    }
    proj_ = nn::Linear(params_, "image.proj", rng, in, cfg.embed_dim);
  }

  const ImageEncoderConfig& config() const { return cfg_; }
  ParameterSet& params() { return params_; }
  const ParameterSet& params() const { return params_; }

  /// [N, 1, H, W] in [0, 1] -> [N, embed_dim] unit rows.
  Tensor encode(const Tensor& images) const {
    check_image_batch(images, cfg_.height, cfg_.width, "encode_image");
    for (float v : images.data()) {
      if (v < 0.0f || v > 1.0f) throw EncoderError("encode_image: pixel values must lie in [0, 1]");
    }
    auto x = images;
    for (std::size_t i = 0; i < convs_.size(); ++i) x = ops::silu(norms_[i](convs_[i](x)));
    return ops::l2_normalize(proj_(ops::spatial_mean(x)));
  }

  Tensor encode(const Image& img) const { return encode(image_to_tensor(img)); }

 private:
  ImageEncoderConfig cfg_;
  ParameterSet params_;
  std::vector<nn::Conv2d> convs_;
  std::vector<nn::GroupNorm> norms_;
  nn::Linear proj_;
};

// ---------------------------------------------------------------------------
// Latent autoencoder

struct AutoencoderConfig {
  int height = 32;
  int width = 32;
  int latent_channels = 4;
  /// Identity codec: latents are the images themselves.
  bool identity = false;
};

class LatentAutoencoder {
 public:
  explicit LatentAutoencoder(const AutoencoderConfig& cfg = {}, std::uint64_t seed = 0) : cfg_(cfg) {
    if (cfg.identity) return;
    if (cfg.height % 4 != 0 || cfg.width % 4 != 0) throw EncoderError("autoencoder needs sizes divisible by 4");
    Rng rng(seed);
    enc_ = {nn::Conv2d(params_, "ae.enc0", rng, 1, 16, 3), nn::Conv2d(params_, "ae.enc1", rng, 16, 32, 3, 2),
            nn::Conv2d(params_, "ae.enc2", rng, 32, 64, 3, 2), nn::Conv2d(params_, "ae.enc3", rng, 64, 64, 3)};
    to_latent_ = nn::Conv2d(params_, "ae.to_latent", rng, 64, cfg.latent_channels, 1);
    dec_in_ = nn::Conv2d(params_, "ae.dec_in", rng, cfg.latent_channels, 64, 3);
    dec_ = {nn::Conv2d(params_, "ae.dec0", rng, 64, 64, 3), nn::Conv2d(params_, "ae.dec1", rng, 64, 32, 3),
            nn::Conv2d(params_, "ae.dec2", rng, 32, 16, 3)};
    to_image_ = nn::Conv2d(params_, "ae.to_image", rng, 16, 1, 3);
    latent_scale_ = params_.add("ae.latent_scale", Tensor::full({1}, 1.0f));
    latent_scale_.set_requires_grad(false);
  }

  const AutoencoderConfig& config() const { return cfg_; }
  bool identity() const { return cfg_.identity; }
  ParameterSet& params() { return params_; }
  const ParameterSet& params() const { return params_; }

  Shape latent_shape() const {
    if (cfg_.identity) return {1, cfg_.height, cfg_.width};
    return {cfg_.latent_channels, cfg_.height / 4, cfg_.width / 4};
  }

  float latent_scale() const { return cfg_.identity ? 1.0f : latent_scale_.item(); }
  void set_latent_scale(float s) {
    if (cfg_.identity) return;
    latent_scale_.mutable_data()[0] = s;
  }

  /// Unscaled encoder output; used for training and for measuring the scale.
  Tensor encode_raw(const Tensor& images) const {
    check_image_batch(images, cfg_.height, cfg_.width, "ae_encode");
    if (cfg_.identity) return images;
    auto x = images;
    for (const auto& c : enc_) x = ops::silu(c(x));
    return to_latent_(x);
  }

  Tensor decode_raw(const Tensor& z) const {
    if (cfg_.identity) return z;
    auto x = ops::silu(dec_in_(z));
    x = ops::silu(dec_[0](x));
    x = ops::silu(dec_[1](ops::upsample2x(x)));
    x = ops::silu(dec_[2](ops::upsample2x(x)));
    return to_image_(x);
  }

  /// Images [N, 1, H, W] -> latents scaled to roughly unit variance.
  Tensor encode(const Tensor& images) const {
    if (cfg_.identity) {
      check_image_batch(images, cfg_.height, cfg_.width, "ae_encode");
      return images;
    }
    return ops::scale(encode_raw(images), latent_scale());
  }

  Tensor encode(const Image& img) const { return encode(image_to_tensor(img)); }

  /// Latents -> images clamped to [0, 1]. Not differentiable through the clamp.
  Tensor decode(const Tensor& z) const {
    const Shape ls = latent_shape();
    if (z.rank() != 4 || Shape(z.shape().begin() + 1, z.shape().end()) != ls) {
      throw EncoderError("ae_decode: expected latent [N, " + shape_str(ls) + "], got " + shape_str(z.shape()));
    }
    if (cfg_.identity) return z;
    NoGradGuard ng;
    auto img = decode_raw(ops::scale(z, 1.0f / latent_scale()));
    std::vector<float> v = img.to_vector();
    for (float& p : v) p = std::clamp(p, 0.0f, 1.0f);
    return Tensor::from_data(img.shape(), std::move(v));
  }

  Image decode_image(const Tensor& z) const { return tensor_to_image(decode(z)); }

  /// Mean absolute reconstruction error recorded at the end of training.
  double recorded_error() const { return recorded_error_; }
  void set_recorded_error(double e) { recorded_error_ = e; }

 private:
  AutoencoderConfig cfg_;
  ParameterSet params_;
  std::vector<nn::Conv2d> enc_, dec_;
  nn::Conv2d to_latent_, dec_in_, to_image_;
  Tensor latent_scale_;
  double recorded_error_ = 0.0;
};

// ---------------------------------------------------------------------------
// Training

using SampleView = std::vector<const SyntheticSample*>;

/// Shuffled index stream: each pass over the data is a fresh permutation.
class BatchSampler {
 public:
  BatchSampler(std::size_t n, std::uint64_t seed) : order_(n), rng_(seed) {
    if (n == 0) throw EncoderError("cannot sample batches from an empty set");
    reshuffle();
  }

  std::vector<std::size_t> next(std::size_t batch) {
    std::vector<std::size_t> out;
    out.reserve(batch);
    while (out.size() < batch) {
      if (pos_ == order_.size()) {
        reshuffle();
        ++epoch_;
      }
      out.push_back(order_[pos_++]);
    }
    return out;
  }

  std::size_t epoch() const { return epoch_; }
  Rng& rng() { return rng_; }

 private:
  void reshuffle() {
    std::iota(order_.begin(), order_.end(), std::size_t{0});
    for (std::size_t i = order_.size(); i > 1; --i) std::swap(order_[i - 1], order_[rng_.below(i)]);
    pos_ = 0;
  }

  std::vector<std::size_t> order_;
  Rng rng_;
  std::size_t pos_ = 0;
  std::size_t epoch_ = 0;
};

inline Tensor batch_images(const SampleView& samples, const std::vector<std::size_t>& idx) {
  std::vector<const Image*> imgs;
  imgs.reserve(idx.size());
  for (auto i : idx) imgs.push_back(&samples[i]->image);
  return images_to_tensor(imgs);
}

struct AutoencoderTrainConfig {
  int steps = 1200;
  int batch = 16;
  double lr = 2e-3;
  std::uint64_t seed = 0;
};

struct AutoencoderTrainResult {
  std::vector<double> losses;
  double train_mae = 0.0;
  double latent_scale = 1.0;
};

inline double mean_abs_reconstruction(const LatentAutoencoder& ae, const SampleView& samples, std::size_t limit = 256) {
  NoGradGuard ng;
  double total = 0.0;
  std::size_t count = 0;
  for (std::size_t i = 0; i < std::min(limit, samples.size()); ++i) {
    const auto rec = ae.decode(ae.encode(samples[i]->image));
    const auto& px = samples[i]->image.pixels;
    for (std::size_t k = 0; k < px.size(); ++k) total += std::abs(rec.data()[k] - px[k]);
    count += px.size();
  }
  return count ? total / static_cast<double>(count) : 0.0;
}

/// Minimizes pixel MSE, then fixes the latent scale to 1 / std of the latents.
inline AutoencoderTrainResult train_autoencoder(LatentAutoencoder& ae, const SampleView& train,
                                                const AutoencoderTrainConfig& cfg) {
  AutoencoderTrainResult res;
  if (ae.identity()) return res;
  auto trainable = ae.params().tensors();
  trainable.erase(std::remove_if(trainable.begin(), trainable.end(), [](const Tensor& t) { return !t.requires_grad(); }),
                  trainable.end());
  Adam opt(trainable, {.lr = cfg.lr});
  BatchSampler sampler(train.size(), Rng::mix(cfg.seed, 0xae));
  for (int step = 0; step < cfg.steps; ++step) {
    const auto idx = sampler.next(static_cast<std::size_t>(cfg.batch));
    auto x = batch_images(train, idx);
    opt.set_lr(cosine_lr(cfg.lr, step, cfg.steps));
    opt.zero_grad();
    auto loss = ops::mse_loss(ae.decode_raw(ae.encode_raw(x)), x);
    backward(loss);
    opt.step();
    res.losses.push_back(loss.item());
  }
  {
    NoGradGuard ng;
    double s = 0.0, s2 = 0.0;
    std::size_t n = 0;
    for (std::size_t i = 0; i < std::min<std::size_t>(256, train.size()); ++i) {
      const auto z = ae.encode_raw(image_to_tensor(train[i]->image));
      for (float v : z.data()) {
        s += v;
        s2 += double(v) * v;
        ++n;
      }
    }
    const double var = s2 / n - (s / n) * (s / n);
    res.latent_scale = 1.0 / std::sqrt(std::max(var, 1e-12));
    ae.set_latent_scale(static_cast<float>(res.latent_scale));
  }
  res.train_mae = mean_abs_reconstruction(ae, train);
  ae.set_recorded_error(res.train_mae);
  return res;
}

struct ContrastiveConfig {
  int steps = 1200;
  int batch = 32;
  double lr = 1e-3;
  double temperature = 0.07;
  /// Probability of the explicit "without device" clause for device-free records.
  double negation_prob = 0.5;
  std::uint64_t seed = 0;
};

struct ContrastiveTrainResult {
  std::vector<double> losses;
  /// Matched minus mismatched mean cosine, measured after every epoch.
  std::vector<double> epoch_margins;
  double final_margin = 0.0;
};

inline bool same_positive_attributes(const AttributeRecord& a, const AttributeRecord& b) {
  return positive_attributes(a) == positive_attributes(b);
}

/// Symmetric in-batch cross-entropy. Samples sharing a record are all
/// positives, with target mass split evenly between them.
inline Tensor contrastive_loss(const Tensor& img_emb, const Tensor& txt_emb, const std::vector<AttributeRecord>& records,
                               double temperature) {
  const int B = img_emb.dim(0);
  auto logits = ops::scale(ops::matmul(img_emb, ops::permute(txt_emb, {1, 0})), static_cast<float>(1.0 / temperature));
  std::vector<float> t(static_cast<std::size_t>(B) * B, 0.0f);
  for (int i = 0; i < B; ++i) {
    int n = 0;
    for (int j = 0; j < B; ++j) n += same_positive_attributes(records[i], records[j]);
    for (int j = 0; j < B; ++j) {
      if (same_positive_attributes(records[i], records[j])) t[static_cast<std::size_t>(i * B + j)] = 1.0f / n;
    }
  }
  // The positive relation is symmetric, so the same targets serve both directions.
  auto targets = Tensor::from_data({B, B}, std::move(t));
  return ops::add(ops::softmax_cross_entropy(logits, targets),
                  ops::softmax_cross_entropy(ops::permute(logits, {1, 0}), targets));
}

/// Matched minus mismatched mean cosine between image embeddings and the
/// canonical captions of every record present in `samples`.
inline double contrastive_margin(const TextEncoder& text, const ImageEncoder& image, const SampleView& samples,
                                 std::size_t limit = 256) {
  NoGradGuard ng;
  std::vector<AttributeRecord> recs;
  for (const auto* s : samples) {
    if (std::none_of(recs.begin(), recs.end(), [&](const auto& r) { return same_positive_attributes(r, s->record); })) {
      recs.push_back(s->record);
    }
  }
  std::vector<TokenSequence> toks;
  for (const auto& r : recs) toks.push_back(tokenize(caption_from_record(r).text));
  const auto txt = text.encode(toks).joint;
  const int D = txt.dim(1);
  double matched = 0, mismatched = 0;
  std::size_t nm = 0, nx = 0;
  for (std::size_t i = 0; i < std::min(limit, samples.size()); ++i) {
    const auto emb = image.encode(samples[i]->image);
    for (std::size_t r = 0; r < recs.size(); ++r) {
      double c = 0;
      for (int k = 0; k < D; ++k) c += emb.data()[k] * txt.data()[r * D + k];
      if (same_positive_attributes(recs[r], samples[i]->record)) {
        matched += c;
        ++nm;
      } else {
        mismatched += c;
        ++nx;
      }
    }
  }
  if (nm == 0 || nx == 0) return 0.0;
  return matched / nm - mismatched / nx;
}

/// Caption-to-image top-1 accuracy within consecutive batches; a hit is any
/// image whose record matches the caption's record.
inline double retrieval_accuracy(const TextEncoder& text, const ImageEncoder& image, const SampleView& samples,
                                 int batch = 16) {
  NoGradGuard ng;
  int hits = 0, total = 0;
  for (std::size_t start = 0; start + static_cast<std::size_t>(batch) <= samples.size(); start += batch) {
    std::vector<std::size_t> idx(static_cast<std::size_t>(batch));
    std::iota(idx.begin(), idx.end(), start);
    const auto img = image.encode(batch_images(samples, idx));
    std::vector<TokenSequence> toks;
    for (auto i : idx) toks.push_back(tokenize(samples[i]->caption.text));
    const auto txt = text.encode(toks).joint;
    const int D = img.dim(1);
    for (int c = 0; c < batch; ++c) {
      int best = 0;
      double best_v = -2;
      for (int m = 0; m < batch; ++m) {
        double v = 0;
        for (int k = 0; k < D; ++k) v += txt.data()[static_cast<std::size_t>(c * D + k)] * img.data()[static_cast<std::size_t>(m * D + k)];
        if (v > best_v) {
          best_v = v;
          best = m;
        }
      }
      hits += same_positive_attributes(samples[idx[static_cast<std::size_t>(c)]]->record,
                                       samples[idx[static_cast<std::size_t>(best)]]->record);
      ++total;
    }
  }
  return total ? static_cast<double>(hits) / total : 0.0;
}

inline ContrastiveTrainResult train_contrastive(TextEncoder& text, ImageEncoder& image, const SampleView& train,
                                                const ContrastiveConfig& cfg, const SampleView& monitor = {}) {
  if (cfg.batch < 8) throw EncoderError("contrastive training needs batch >= 8");
  {
    bool varied = false;
    for (const auto* s : train) varied |= !same_positive_attributes(s->record, train.front()->record);
    if (train.empty() || !varied) throw EncoderError("contrastive training needs at least two distinct records");
  }
  auto params = text.params().tensors();
  for (const auto& t : image.params().tensors()) params.push_back(t);
  Adam opt(params, {.lr = cfg.lr});
  BatchSampler sampler(train.size(), Rng::mix(cfg.seed, 0xc11));
  Rng caption_rng(Rng::mix(cfg.seed, 0xca9));
  ContrastiveTrainResult res;
  const SampleView& probe = monitor.empty() ? train : monitor;
  std::size_t epoch = 0;
  for (int step = 0; step < cfg.steps; ++step) {
    const auto idx = sampler.next(static_cast<std::size_t>(cfg.batch));
    std::vector<TokenSequence> toks;
    std::vector<AttributeRecord> recs;
    for (auto i : idx) {
      recs.push_back(train[i]->record);
      toks.push_back(tokenize(training_caption(train[i]->record, caption_rng, cfg.negation_prob).text));
    }
    opt.set_lr(cosine_lr(cfg.lr, step, cfg.steps));
    opt.zero_grad();
    auto loss = contrastive_loss(image.encode(batch_images(train, idx)), text.encode(toks).joint, recs, cfg.temperature);
    backward(loss);
    opt.step();
    res.losses.push_back(loss.item());
    if (sampler.epoch() != epoch) {
      epoch = sampler.epoch();
      res.epoch_margins.push_back(contrastive_margin(text, image, probe, 128));
    }
  }
  res.final_margin = contrastive_margin(text, image, probe);
  return res;
}

}  // namespace cfdiff
