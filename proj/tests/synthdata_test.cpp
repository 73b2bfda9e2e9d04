// Copyright 2026 The cfdiff Authors.
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <filesystem>

#include "cfdiff/synthdata/synthdata.hpp"

using namespace cfdiff;

namespace {

const Mask& mask_of(const Rendering& r, Attribute a) { return r.masks[static_cast<std::size_t>(rendered_index(a))]; }

std::filesystem::path scratch_dir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("cfdiff_synth_" + name);
  std::filesystem::remove_all(p);
  return p;
}

}  // namespace

TEST(Render, EmptyRecordHasNoFootprints) {
  const auto r = render(AttributeRecord{}, 3);
  for (const auto& m : r.masks) EXPECT_TRUE(m.empty());
  EXPECT_EQ(r.image.height, 32);
  EXPECT_EQ(r.image.width, 32);
}

TEST(Render, DeterministicPerSeed) {
  const auto rec = AttributeRecord::make(true, true, true);
  EXPECT_EQ(render(rec, 42).image, render(rec, 42).image);
  EXPECT_NE(render(rec, 42).image, render(rec, 43).image);
}

TEST(Render, PixelsInUnitRangeAndQuantized) {
  const auto r = render(AttributeRecord::make(true, false, true), 9);
  for (float p : r.image.pixels) {
    EXPECT_GE(p, 0.0f);
    EXPECT_LE(p, 1.0f);
    EXPECT_EQ(p, static_cast<float>(to_byte(p)) / 255.0f);
  }
}

TEST(Render, DeviceHasAtLeastThirtyBrightPixels) {
  for (std::uint64_t seed = 0; seed < 300; ++seed) {
    for (int size : {32, 64}) {
      const auto r = render(AttributeRecord::make(seed % 2, seed % 3 == 0, true), seed, size, size);
      const auto& m = mask_of(r, Attribute::device);
      int bright = 0;
      for (std::size_t i = 0; i < m.bits.size(); ++i) bright += m.bits[i] && r.image.pixels[i] > 0.9f;
      EXPECT_GE(bright, 30) << "seed " << seed << " size " << size;
    }
  }
}

TEST(Render, MaskNonEmptyIffAttributePresent) {
  for (std::uint64_t seed = 0; seed < 40; ++seed) {
    for (int m = 0; m < 8; ++m) {
      const auto rec = AttributeRecord::make(m & 1, m & 2, m & 4);
      const auto r = render(rec, seed);
      for (Attribute a : kRenderedAttributes) EXPECT_EQ(!mask_of(r, a).empty(), rec.get(a)) << attribute_name(a);
    }
  }
}

TEST(Render, DeviceBarelyOverlapsDiseaseMasks) {
  for (std::uint64_t seed = 0; seed < 200; ++seed) {
    const auto r = render(AttributeRecord::make(true, true, true), seed);
    const auto& d = mask_of(r, Attribute::device);
    const auto& a = mask_of(r, Attribute::disease_a);
    const auto& b = mask_of(r, Attribute::disease_b);
    std::size_t overlap = 0;
    for (std::size_t i = 0; i < d.bits.size(); ++i) overlap += d.bits[i] && (a.bits[i] || b.bits[i]);
    EXPECT_LT(static_cast<double>(overlap), 0.05 * static_cast<double>(d.count())) << seed;
  }
}

TEST(Render, TogglingDeviceOnlyChangesDevicePixels) {
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    const auto with = render(AttributeRecord::make(true, false, true), seed);
    const auto without = render(AttributeRecord::make(true, false, false), seed);
    const auto& m = mask_of(with, Attribute::device);
    for (std::size_t i = 0; i < m.bits.size(); ++i) {
      if (!m.bits[i]) {
        EXPECT_EQ(with.image.pixels[i], without.image.pixels[i]);
      }
    }
  }
}

TEST(Corpus, IndependentLabelsAreUncorrelated) {
  CorpusSpec spec;
  spec.rho = 0.0;
  EXPECT_LT(std::abs(device_disease_correlation(generate_corpus(spec))), 0.1);
}

TEST(Corpus, ConfoundedCorrelationNearTarget) {
  CorpusSpec spec;
  spec.rho = 0.9;
  const double c = device_disease_correlation(generate_corpus(spec));
  EXPECT_GE(c, 0.8);
  EXPECT_LE(c, 0.95);
}

TEST(Corpus, ConditionalsPreserveMarginals) {
  CorpusSpec spec;
  spec.p_disease_a = 0.3;
  spec.p_device = 0.4;
  spec.rho = 0.5;
  const auto [g1, g0] = device_conditionals(spec);
  EXPECT_NEAR(0.3 * g1 + 0.7 * g0, 0.4, 1e-12);
}

TEST(Corpus, InfeasibleRhoRejected) {
  CorpusSpec spec;
  spec.p_disease_a = 0.1;
  spec.p_device = 0.9;
  spec.rho = 0.9;
  EXPECT_THROW(generate_corpus(spec), SynthDataError);
  spec = {};
  spec.split_fractions = {0.5, 0.2, 0.2};
  EXPECT_THROW(generate_corpus(spec), SynthDataError);
  spec = {};
  spec.rho = 1.5;
  EXPECT_THROW(generate_corpus(spec), SynthDataError);
}

TEST(Corpus, SplitCounts) {
  CorpusSpec spec;
  const auto c = generate_corpus(spec);
  EXPECT_EQ(c.split(Split::train).size(), 1400u);
  EXPECT_EQ(c.split(Split::val).size(), 300u);
  EXPECT_EQ(c.split(Split::test).size(), 300u);
}

TEST(Corpus, SeedsAreBasePlusIndex) {
  CorpusSpec spec;
  spec.n_samples = 20;
  spec.base_seed = 500;
  const auto c = generate_corpus(spec);
  for (std::size_t i = 0; i < c.samples.size(); ++i) {
    EXPECT_EQ(c.samples[i].seed, 500 + i);
    EXPECT_EQ(c.samples[i].image, render(c.samples[i].record, c.samples[i].seed).image);
    EXPECT_TRUE(c.samples[i].record.valid());
  }
}

TEST(Corpus, SubgroupsFollowTheirPattern) {
  CorpusSpec spec;
  const auto anti = generate_subgroup(spec, Subgroup::anticorrelated, 40, kAnticorrelatedSeedOffset);
  const auto matched = generate_subgroup(spec, Subgroup::matched, 40, kMatchedSeedOffset);
  int devices = 0;
  for (const auto& s : anti.samples) {
    EXPECT_NE(s.record.device, s.record.disease_a);
    devices += s.record.device;
  }
  EXPECT_EQ(devices, 20);
  for (const auto& s : matched.samples) EXPECT_EQ(s.record.device, s.record.disease_a);
}

TEST(Manifest, WriteThenLoadReproducesPixelsAndLabels) {
  CorpusSpec spec;
  spec.n_samples = 24;
  const auto c = generate_corpus(spec);
  const auto dir = scratch_dir("roundtrip");
  write_corpus(c, dir, {{"config_hash", "abc"}});
  const auto loaded = load_corpus(dir);
  ASSERT_EQ(loaded.samples.size(), c.samples.size());
  for (std::size_t i = 0; i < c.samples.size(); ++i) {
    EXPECT_EQ(loaded.samples[i].image, c.samples[i].image);
    EXPECT_EQ(loaded.samples[i].record, c.samples[i].record);
    EXPECT_EQ(loaded.samples[i].masks, c.samples[i].masks);
    EXPECT_EQ(loaded.samples[i].split, c.samples[i].split);
    // Manifest plus seed alone regenerate every pixel.
    EXPECT_EQ(render(loaded.samples[i].record, loaded.samples[i].seed).image, loaded.samples[i].image);
  }
  std::filesystem::remove_all(dir);
}

TEST(Manifest, RejectsBadLabels) {
  EXPECT_THROW(record_from_json({{"disease_a", 2}, {"disease_b", 0}, {"device", 0}, {"no_finding", 0}}),
               SynthDataError);
  EXPECT_THROW(record_from_json({{"disease_a", 1}, {"disease_b", 0}, {"device", 0}, {"no_finding", 1}}),
               CaptionError);
}
