// Copyright 2026 The cfdiff Authors.
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>

#include "cfdiff/encoders/encoders.hpp"

using namespace cfdiff;

namespace {

double norm(std::span<const float> v) {
  double s = 0;
  for (float x : v) s += double(x) * x;
  return std::sqrt(s);
}

std::vector<double> image_delta(const ImageEncoder& enc, const Image& a, const Image& b) {
  NoGradGuard ng;
  const auto e = enc.encode(images_to_tensor({&a, &b}));
  const int D = e.dim(1);
  std::vector<double> d(static_cast<std::size_t>(D));
  for (int k = 0; k < D; ++k) d[static_cast<std::size_t>(k)] = e.data()[static_cast<std::size_t>(k)] - e.data()[static_cast<std::size_t>(D + k)];
  return d;
}

double l2(const std::vector<double>& v) {
  double s = 0;
  for (double x : v) s += x * x;
  return std::sqrt(s);
}

// Trained once and shared: full corpus, fixed seeds.
class TrainedEncoders : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    corpus_ = new Corpus(generate_corpus(CorpusSpec{}));
    train_ = corpus_->split(Split::train);
    val_ = corpus_->split(Split::val);
    ae_ = new LatentAutoencoder({}, 1);
    train_autoencoder(*ae_, train_, {.steps = 600, .batch = 16, .lr = 2e-3, .seed = 1});
    text_ = new TextEncoder({}, 2);
    image_ = new ImageEncoder({}, 3);
    clip_ = new ContrastiveTrainResult(train_contrastive(*text_, *image_, train_, {.steps = 600, .batch = 32, .seed = 4}, val_));
  }
  static void TearDownTestSuite() {
    delete clip_;
    delete image_;
    delete text_;
    delete ae_;
    delete corpus_;
  }

  static inline Corpus* corpus_ = nullptr;
  static inline SampleView train_, val_;
  static inline LatentAutoencoder* ae_ = nullptr;
  static inline TextEncoder* text_ = nullptr;
  static inline ImageEncoder* image_ = nullptr;
  static inline ContrastiveTrainResult* clip_ = nullptr;
};

}  // namespace

TEST(TextEncoder, DeterministicAndUnitNorm) {
  TextEncoder a({}, 7), b({}, 7);
  const auto ea = a.encode("scan of a subject showing device");
  const auto eb = b.encode("scan of a subject showing device");
  EXPECT_EQ(ea.joint.to_vector(), eb.joint.to_vector());
  EXPECT_NEAR(norm(ea.joint.data()), 1.0, 1e-5);
  EXPECT_EQ(ea.context.shape(), (Shape{1, 16, 64}));
}

TEST(TextEncoder, RejectsBadSequences) {
  TextEncoder enc({}, 1);
  EXPECT_THROW(enc.encode(std::vector<TokenSequence>{}), EncoderError);
  EXPECT_THROW(enc.encode(std::vector<TokenSequence>{tokenize("scan", 8)}), EncoderError);
}

TEST(ImageEncoder, UnitNormAndResolutionCheck) {
  ImageEncoder enc({}, 3);
  const auto s = make_sample(AttributeRecord::make(true, false, true), 5, Split::test, 32, 32);
  const auto e = enc.encode(s.image);
  EXPECT_NEAR(norm(e.data()), 1.0, 1e-5);
  const Image wrong(16, 16, 0.5f);
  EXPECT_THROW(enc.encode(wrong), EncoderError);
}

TEST(ImageEncoder, DeltaVanishesForIdenticalAndTinyNoise) {
  ImageEncoder enc({}, 3);
  const auto s = make_sample(AttributeRecord::make(false, true, false), 9, Split::test, 32, 32);
  EXPECT_EQ(l2(image_delta(enc, s.image, s.image)), 0.0);
  Image noisy = s.image;
  Rng rng(1);
  for (float& p : noisy.pixels) p = std::clamp(p + static_cast<float>(1e-4 * rng.normal()), 0.0f, 1.0f);
  EXPECT_LT(l2(image_delta(enc, noisy, s.image)), 0.05);
}

TEST(Contrastive, InitialLossNearUniformExpectation) {
  CorpusSpec spec;
  spec.n_samples = 64;
  const auto c = generate_corpus(spec);
  SampleView all;
  for (const auto& s : c.samples) all.push_back(&s);
  TextEncoder text({}, 2);
  ImageEncoder image({}, 3);
  auto r = train_contrastive(text, image, all, {.steps = 1, .batch = 32, .seed = 4});
  const double expected = 2.0 * std::log(32.0);
  EXPECT_NEAR(r.losses.front(), expected, 0.2 * expected);
}

TEST(Contrastive, TwoClassRetrieval) {
  std::vector<SyntheticSample> samples;
  for (int i = 0; i < 256; ++i) {
    samples.push_back(make_sample(AttributeRecord::make(false, false, i % 2 == 0), 300 + i, Split::train, 32, 32));
  }
  SampleView train, held;
  for (std::size_t i = 0; i < samples.size(); ++i) (i < 192 ? train : held).push_back(&samples[i]);
  TextEncoder text({}, 21);
  ImageEncoder image({}, 22);
  train_contrastive(text, image, train, {.steps = 200, .batch = 32, .seed = 23});
  EXPECT_GT(retrieval_accuracy(text, image, held), 0.9);
}

TEST(Contrastive, RejectsDegenerateCorpus) {
  std::vector<SyntheticSample> samples;
  for (int i = 0; i < 16; ++i) samples.push_back(make_sample(AttributeRecord::make(true, false, false), i, Split::train, 32, 32));
  SampleView v;
  for (const auto& s : samples) v.push_back(&s);
  TextEncoder text;
  ImageEncoder image;
  EXPECT_THROW(train_contrastive(text, image, v, {.steps = 1}), EncoderError);
  EXPECT_THROW(train_contrastive(text, image, v, {.steps = 1, .batch = 4}), EncoderError);
}

TEST(Autoencoder, LatentShapeAndIdentityMode) {
  LatentAutoencoder ae({}, 1);
  EXPECT_EQ(ae.latent_shape(), (Shape{4, 8, 8}));
  const auto s = make_sample(AttributeRecord::make(true, true, true), 2, Split::test, 32, 32);
  EXPECT_EQ(ae.encode(s.image).shape(), (Shape{1, 4, 8, 8}));
  LatentAutoencoder id({.identity = true});
  EXPECT_EQ(id.decode_image(id.encode(s.image)), s.image);
  EXPECT_THROW(ae.encode(image_to_tensor(Image(16, 32, 0.0f))), EncoderError);
  EXPECT_THROW(ae.decode(Tensor::zeros({1, 4, 4, 4})), EncoderError);
}

TEST_F(TrainedEncoders, AutoencoderReconstructs) {
  const Image zeros(32, 32, 0.0f);
  const auto rec = ae_->decode_image(ae_->encode(zeros));
  double mae = 0;
  for (float p : rec.pixels) mae += std::abs(p);
  EXPECT_LT(mae / 1024.0, 0.02);
  EXPECT_LE(mean_abs_reconstruction(*ae_, val_), 1.5 * ae_->recorded_error());
  EXPECT_GT(ae_->latent_scale(), 0.0f);
}

TEST_F(TrainedEncoders, MarginPositiveAndSmoothedMonotone) {
  EXPECT_GE(clip_->final_margin, 0.2);
  const auto& m = clip_->epoch_margins;
  ASSERT_GE(m.size(), 6u);
  std::vector<double> smoothed;
  for (std::size_t i = 0; i + 5 <= m.size(); ++i) {
    double s = 0;
    for (std::size_t k = i; k < i + 5; ++k) s += m[k];
    smoothed.push_back(s / 5);
  }
  for (std::size_t i = 1; i < smoothed.size(); ++i) EXPECT_GE(smoothed[i], smoothed[i - 1]) << "window " << i;
}

TEST_F(TrainedEncoders, DeviceEditMovesEmbeddingMoreThanSameClassPair) {
  // Toggling the device on one anatomy moves the embedding further than
  // swapping anatomy within a record class.
  int wins = 0, total = 0;
  for (std::uint64_t seed = 900; seed < 920; ++seed) {
    const auto base = AttributeRecord::make(true, false, false);
    const auto with = make_sample(AttributeRecord::make(true, false, true), seed, Split::test, 32, 32);
    const auto without = make_sample(base, seed, Split::test, 32, 32);
    const auto other = make_sample(base, seed + 1000, Split::test, 32, 32);
    wins += l2(image_delta(*image_, with.image, without.image)) > l2(image_delta(*image_, other.image, without.image));
    ++total;
  }
  EXPECT_GE(wins, 18) << wins << "/" << total;
}

TEST_F(TrainedEncoders, RetrievalOnHeldOut) { EXPECT_GT(retrieval_accuracy(*text_, *image_, val_), 0.9); }
