// Copyright 2026 The cfdiff Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <numbers>
#include <stdexcept>
#include <string>
#include <vector>

#include "cfdiff/captions/captions.hpp"
#include "cfdiff/io/image.hpp"
#include "cfdiff/numerics/rng.hpp"
#include "json.hpp"

namespace cfdiff {

class SynthDataError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Attributes with a rendered footprint. no_finding is derived and has none.
inline constexpr std::array<Attribute, 3> kRenderedAttributes = kCanonicalOrder;

inline int rendered_index(Attribute a) {
  switch (a) {
    case Attribute::disease_a: return 0;
    case Attribute::disease_b: return 1;
    case Attribute::device: return 2;
    default: throw SynthDataError(std::string(attribute_name(a)) + " has no rendered mask");
  }
}

struct Mask {
  int height = 0;
  int width = 0;
  std::vector<std::uint8_t> bits;

  std::size_t count() const {
    std::size_t n = 0;
    for (auto b : bits) n += b;
    return n;
  }
  bool empty() const { return count() == 0; }
  friend bool operator==(const Mask&, const Mask&) = default;
};

/// Per-attribute footprint masks indexed by rendered_index().
using Masks = std::array<Mask, 3>;

struct Rendering {
  Image image;
  Masks masks;
};

namespace detail {

// Subject-level geometry drawn from the sample seed before any attribute is
// consulted, so one seed gives the same subject under every record.
struct Subject {
  double cx, cy, ax, ay;
  double body, lung, heart;
  std::array<double, 6> tex;
  bool effusion_left;
  bool device_left;
  double box_u, box_v, lead_u;
  double meniscus;
};

inline Subject draw_subject(Rng& rng) {
  Subject s{};
  s.cx = 0.5 + rng.uniform(-0.03, 0.03);
  s.cy = 0.53 + rng.uniform(-0.03, 0.03);
  s.ax = 0.41 + rng.uniform(-0.03, 0.03);
  s.ay = 0.45 + rng.uniform(-0.02, 0.02);
  s.body = rng.uniform(0.32, 0.40);
  s.lung = s.body - rng.uniform(0.12, 0.16);
  s.heart = rng.uniform(0.55, 0.62);
  for (auto& p : s.tex) p = rng.uniform();
  s.effusion_left = rng.bernoulli(0.5);
  s.device_left = rng.bernoulli(0.5);
  s.box_u = rng.uniform(0.20, 0.26);
  s.box_v = rng.uniform(0.13, 0.19);
  s.lead_u = rng.uniform(0.04, 0.10);
  s.meniscus = rng.uniform(0.57, 0.63);
  return s;
}

inline bool in_ellipse(double u, double v, double cx, double cy, double ax, double ay) {
  const double du = (u - cx) / ax, dv = (v - cy) / ay;
  return du * du + dv * dv <= 1.0;
}

}  // namespace detail

/// Draws a pseudo-radiograph for `record`. Subject anatomy depends only on
/// `seed`; attributes add their footprint on top.
inline Rendering render(const AttributeRecord& record, std::uint64_t seed, int height = 32, int width = 32) {
  record.validate();
  if (height < 16 || width < 16) throw SynthDataError("render needs at least 16x16 pixels");
  Rng rng(seed);
  const auto s = detail::draw_subject(rng);

  Rendering out;
  out.image = Image(height, width, 0.04f);
  for (auto& m : out.masks) m = Mask{height, width, std::vector<std::uint8_t>(static_cast<std::size_t>(height) * width, 0)};
  auto& mask_a = out.masks[0].bits;
  auto& mask_b = out.masks[1].bits;
  auto& mask_d = out.masks[2].bits;

  const double lung_dx = 0.17, lung_cy = s.cy - 0.04, lung_ax = 0.13, lung_ay = 0.27;
  const double heart_cx = s.cx + 0.03, heart_cy = s.cy + 0.12;
  const double heart_ax = record.disease_b ? 0.21 : 0.11, heart_ay = record.disease_b ? 0.19 : 0.12;
  const double eff_cx = s.cx + (s.effusion_left ? -lung_dx : lung_dx);
  const double two_pi = 2.0 * std::numbers::pi;

  for (int y = 0; y < height; ++y) {
    for (int x = 0; x < width; ++x) {
      const double u = (x + 0.5) / width, v = (y + 0.5) / height;
      const std::size_t i = static_cast<std::size_t>(y) * width + x;
      if (!detail::in_ellipse(u, v, s.cx, s.cy, s.ax, s.ay)) continue;
      const double texture = 0.03 * std::sin(two_pi * (2.0 * u + s.tex[0])) * std::cos(two_pi * (1.5 * v + s.tex[1])) +
                             0.02 * std::sin(two_pi * (3.0 * (u + v) + s.tex[2]));
      double val = s.body + texture;
      const bool in_lung = detail::in_ellipse(u, v, s.cx - lung_dx, lung_cy, lung_ax, lung_ay) ||
                           detail::in_ellipse(u, v, s.cx + lung_dx, lung_cy, lung_ax, lung_ay);
      if (in_lung) val = s.lung + texture;
      if (detail::in_ellipse(u, v, heart_cx, heart_cy, heart_ax, heart_ay)) {
        val = s.heart + 0.5 * texture;
        if (record.disease_b) mask_b[i] = 1;
      }
      if (record.disease_a && detail::in_ellipse(u, v, eff_cx, lung_cy, lung_ax + 0.02, lung_ay + 0.02)) {
        // Fluid level rises toward the lateral wall.
        const double lateral = s.effusion_left ? (eff_cx - u) : (u - eff_cx);
        if (v > s.meniscus - 0.6 * lateral) {
          val = 0.78 + 0.5 * texture;
          mask_a[i] = 1;
        }
      }
      out.image.pixels[i] = static_cast<float>(val);
    }
  }

  if (record.device) {
    // Pulse generator box in an upper corner with a lead running off the top edge.
    const double side = s.device_left ? -1.0 : 1.0;
    const double bu = s.cx + side * s.box_u, bv = s.box_v;
    const int bw = std::max(6, width * 6 / 32), bh = std::max(4, height * 4 / 32);
    const int bx0 = static_cast<int>(std::lround(bu * width)) - bw / 2;
    const int by0 = static_cast<int>(std::lround(bv * height)) - bh / 2;
    auto plot = [&](int x, int y) {
      if (x < 0 || y < 0 || x >= width || y >= height) return;
      const std::size_t i = static_cast<std::size_t>(y) * width + x;
      out.image.pixels[i] = 1.0f;
      mask_d[i] = 1;
    };
    for (int y = by0; y < by0 + bh; ++y) {
      for (int x = bx0; x < bx0 + bw; ++x) plot(x, y);
    }
    const std::array<std::array<double, 2>, 3> lead{{{bu, bv}, {s.cx + side * s.lead_u, 0.26}, {s.cx + side * (s.lead_u - 0.03), 0.0}}};
    for (std::size_t k = 0; k + 1 < lead.size(); ++k) {
      const double x0 = lead[k][0] * width, y0 = lead[k][1] * height;
      const double x1 = lead[k + 1][0] * width, y1 = lead[k + 1][1] * height;
      const int n = static_cast<int>(std::ceil(std::max(std::abs(x1 - x0), std::abs(y1 - y0)) * 2)) + 1;
      for (int j = 0; j <= n; ++j) {
        const double f = static_cast<double>(j) / n;
        plot(static_cast<int>(std::floor(x0 + f * (x1 - x0))), static_cast<int>(std::floor(y0 + f * (y1 - y0))));
      }
    }
  }

  quantize(out.image);
  return out;
}

// ---------------------------------------------------------------------------
// Corpus

enum class Split { train, val, test };

inline const char* to_string(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::val: return "val";
    case Split::test: return "test";
  }
  return "?";
}

inline Split split_from_string(const std::string& s) {
  if (s == "train") return Split::train;
  if (s == "val") return Split::val;
  if (s == "test") return Split::test;
  throw SynthDataError("unknown split '" + s + "'");
}

struct CorpusSpec {
  int n_samples = 2000;
  int height = 32;
  int width = 32;
  double p_disease_a = 0.5;
  double p_disease_b = 0.3;
  double p_device = 0.5;
  /// Target Pearson correlation between device and disease_a.
  double rho = 0.9;
  std::array<double, 3> split_fractions{0.7, 0.15, 0.15};
  std::uint64_t base_seed = 17;

  void validate() const {
    if (n_samples < 1) throw SynthDataError("n_samples must be positive");
    for (double p : {p_disease_a, p_disease_b, p_device}) {
      if (!(p >= 0.0 && p <= 1.0)) throw SynthDataError("marginal probabilities must lie in [0, 1]");
    }
    if (!(rho >= 0.0 && rho <= 1.0)) throw SynthDataError("rho must lie in [0, 1]");
    double total = 0.0;
    for (double f : split_fractions) {
      if (f < 0.0) throw SynthDataError("split fractions must be non-negative");
      total += f;
    }
    if (std::abs(total - 1.0) > 1e-9) throw SynthDataError("split fractions must sum to 1");
  }
};

/// P(device | disease_a = 1) and P(device | disease_a = 0) that keep both
/// marginals and give corr(device, disease_a) = rho.
inline std::pair<double, double> device_conditionals(const CorpusSpec& spec) {
  const double pa = spec.p_disease_a, pd = spec.p_device;
  if (spec.rho == 0.0) return {pd, pd};
  if (pa <= 0.0 || pa >= 1.0 || pd <= 0.0 || pd >= 1.0) {
    throw SynthDataError("nonzero rho needs both marginals strictly inside (0, 1)");
  }
  const double p11 = pa * pd + spec.rho * std::sqrt(pa * (1 - pa) * pd * (1 - pd));
  const double given1 = p11 / pa, given0 = (pd - p11) / (1 - pa);
  const double tol = 1e-12;
  if (given1 > 1 + tol || given0 < -tol) {
    throw SynthDataError("rho " + std::to_string(spec.rho) + " is infeasible for marginals p_disease_a=" +
                         std::to_string(pa) + ", p_device=" + std::to_string(pd));
  }
  return {std::clamp(given1, 0.0, 1.0), std::clamp(given0, 0.0, 1.0)};
}

struct SyntheticSample {
  Image image;
  AttributeRecord record;
  Masks masks;
  Caption caption;
  std::uint64_t seed = 0;
  Split split = Split::train;
};

struct Corpus {
  CorpusSpec spec;
  std::vector<SyntheticSample> samples;

  std::vector<const SyntheticSample*> split(Split s) const {
    std::vector<const SyntheticSample*> out;
    for (const auto& x : samples) {
      if (x.split == s) out.push_back(&x);
    }
    return out;
  }
};

inline std::array<int, 3> split_counts(int n, const std::array<double, 3>& fractions) {
  const int val = static_cast<int>(std::lround(n * fractions[1]));
  const int test = static_cast<int>(std::lround(n * fractions[2]));
  return {n - val - test, val, test};
}

inline SyntheticSample make_sample(const AttributeRecord& record, std::uint64_t seed, Split split, int height,
                                   int width) {
  auto r = render(record, seed, height, width);
  return {std::move(r.image), record, std::move(r.masks), caption_from_record(record), seed, split};
}

/// Labels and images for seeds base_seed + i. Labels come from a stream
/// derived from each sample seed, so any sample can be rebuilt on its own.
inline Corpus generate_corpus(const CorpusSpec& spec) {
  spec.validate();
  const auto [given1, given0] = device_conditionals(spec);
  const auto counts = split_counts(spec.n_samples, spec.split_fractions);
  Corpus c;
  c.spec = spec;
  c.samples.reserve(static_cast<std::size_t>(spec.n_samples));
  for (int i = 0; i < spec.n_samples; ++i) {
    const std::uint64_t seed = spec.base_seed + static_cast<std::uint64_t>(i);
    Rng label_rng(Rng::mix(seed, 0x1abe1));
    const bool a = label_rng.bernoulli(spec.p_disease_a);
    const bool b = label_rng.bernoulli(spec.p_disease_b);
    const bool d = label_rng.bernoulli(a ? given1 : given0);
    const Split split = i < counts[0] ? Split::train : (i < counts[0] + counts[1] ? Split::val : Split::test);
    c.samples.push_back(make_sample(AttributeRecord::make(a, b, d), seed, split, spec.height, spec.width));
  }
  return c;
}

enum class Subgroup { matched, anticorrelated };

/// Balanced evaluation set. matched: device == disease_a; anticorrelated:
/// device != disease_a. disease_b keeps its marginal. Seeds start at
/// `first_seed` and should not overlap the training corpus.
inline Corpus generate_subgroup(const CorpusSpec& spec, Subgroup kind, int n, std::uint64_t first_seed) {
  spec.validate();
  Corpus c;
  c.spec = spec;
  c.spec.n_samples = n;
  c.spec.base_seed = first_seed;
  for (int i = 0; i < n; ++i) {
    const std::uint64_t seed = first_seed + static_cast<std::uint64_t>(i);
    Rng label_rng(Rng::mix(seed, 0x1abe1));
    const bool d = i % 2 == 0;
    const bool a = kind == Subgroup::matched ? d : !d;
    const bool b = label_rng.bernoulli(spec.p_disease_b);
    c.samples.push_back(make_sample(AttributeRecord::make(a, b, d), seed, Split::test, spec.height, spec.width));
  }
  return c;
}

/// Seed offsets for the evaluation subgroups, far from any training seed.
inline constexpr std::uint64_t kMatchedSeedOffset = 1'000'000;
inline constexpr std::uint64_t kAnticorrelatedSeedOffset = 2'000'000;

inline double pearson(const std::vector<double>& x, const std::vector<double>& y) {
  const double n = static_cast<double>(x.size());
  double mx = 0, my = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    mx += x[i];
    my += y[i];
  }
  mx /= n;
  my /= n;
  double sxy = 0, sxx = 0, syy = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxy += (x[i] - mx) * (y[i] - my);
    sxx += (x[i] - mx) * (x[i] - mx);
    syy += (y[i] - my) * (y[i] - my);
  }
  if (sxx == 0 || syy == 0) return 0.0;
  return sxy / std::sqrt(sxx * syy);
}

inline double device_disease_correlation(const Corpus& c) {
  std::vector<double> d, a;
  for (const auto& s : c.samples) {
    d.push_back(s.record.device);
    a.push_back(s.record.disease_a);
  }
  return pearson(d, a);
}

// ---------------------------------------------------------------------------
// Manifest

inline nlohmann::json record_to_json(const AttributeRecord& r) {
  return {{"disease_a", int(r.disease_a)}, {"disease_b", int(r.disease_b)}, {"device", int(r.device)},
          {"no_finding", int(r.no_finding)}};
}

inline AttributeRecord record_from_json(const nlohmann::json& j) {
  AttributeRecord r;
  for (Attribute a : {Attribute::disease_a, Attribute::disease_b, Attribute::device, Attribute::no_finding}) {
    const int v = j.at(attribute_name(a)).get<int>();
    if (v != 0 && v != 1) throw SynthDataError(std::string("label ") + attribute_name(a) + " must be 0 or 1");
    r.set(a, v == 1);
  }
  r.validate();
  return r;
}

struct ManifestEntry {
  std::string path;
  AttributeRecord record;
  std::string caption;
  std::uint64_t seed = 0;
  Split split = Split::train;
  std::map<std::string, std::string> mask_paths;
};

inline Image mask_to_image(const Mask& m) {
  Image img(m.height, m.width);
  for (std::size_t i = 0; i < m.bits.size(); ++i) img.pixels[i] = m.bits[i] ? 1.0f : 0.0f;
  return img;
}

inline Mask image_to_mask(const Image& img) {
  Mask m{img.height, img.width, std::vector<std::uint8_t>(img.size())};
  for (std::size_t i = 0; i < img.size(); ++i) m.bits[i] = img.pixels[i] > 0.5f;
  return m;
}

/// Writes images/, masks/ and manifest.jsonl under `dir` with paths relative
/// to `dir`. `extra` is merged into every line (e.g. the config hash).
inline void write_corpus(const Corpus& c, const std::filesystem::path& dir, const nlohmann::json& extra = {}) {
  namespace fs = std::filesystem;
  fs::create_directories(dir / "images");
  fs::create_directories(dir / "masks");
  std::ofstream manifest(dir / "manifest.jsonl");
  if (!manifest) throw SynthDataError("cannot write manifest in " + dir.string());
  for (std::size_t i = 0; i < c.samples.size(); ++i) {
    const auto& s = c.samples[i];
    char stem[32];
    std::snprintf(stem, sizeof stem, "%06zu", i);
    const std::string img_rel = std::string("images/") + stem + ".png";
    write_png(s.image, dir / img_rel);
    nlohmann::json masks = nlohmann::json::object();
    for (Attribute a : kRenderedAttributes) {
      const auto& m = s.masks[static_cast<std::size_t>(rendered_index(a))];
      if (m.empty()) continue;
      const std::string rel = std::string("masks/") + stem + "_" + attribute_name(a) + ".png";
      write_png(mask_to_image(m), dir / rel);
      masks[attribute_name(a)] = rel;
    }
    nlohmann::json line = {{"path", img_rel},          {"labels", record_to_json(s.record)},
                           {"caption", s.caption.text}, {"seed", s.seed},
                           {"split", to_string(s.split)}, {"mask_paths", masks}};
    if (extra.is_object()) line.update(extra);
    manifest << line.dump() << '\n';
  }
}

inline std::vector<ManifestEntry> read_manifest(const std::filesystem::path& dir) {
  std::ifstream in(dir / "manifest.jsonl");
  if (!in) throw SynthDataError("missing manifest " + (dir / "manifest.jsonl").string());
  std::vector<ManifestEntry> out;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      ManifestEntry e;
      e.path = j.at("path").get<std::string>();
      e.record = record_from_json(j.at("labels"));
      e.caption = j.at("caption").get<std::string>();
      e.seed = j.at("seed").get<std::uint64_t>();
      e.split = split_from_string(j.at("split").get<std::string>());
      for (const auto& [k, v] : j.at("mask_paths").items()) e.mask_paths[k] = v.get<std::string>();
      out.push_back(std::move(e));
    } catch (const std::exception& ex) {
      throw SynthDataError("manifest line " + std::to_string(lineno) + ": " + ex.what());
    }
  }
  return out;
}

/// Loads images and masks listed in a manifest written by write_corpus.
inline Corpus load_corpus(const std::filesystem::path& dir) {
  Corpus c;
  for (auto& e : read_manifest(dir)) {
    SyntheticSample s;
    s.image = read_png(dir / e.path);
    s.record = e.record;
    s.caption = caption_from_record(e.record);
    if (s.caption.text != e.caption) throw SynthDataError("caption mismatch for " + e.path);
    s.seed = e.seed;
    s.split = e.split;
    for (auto& m : s.masks) m = Mask{s.image.height, s.image.width, std::vector<std::uint8_t>(s.image.size(), 0)};
    for (const auto& [name, rel] : e.mask_paths) {
      s.masks[static_cast<std::size_t>(rendered_index(attribute_from_name(name)))] = image_to_mask(read_png(dir / rel));
    }
    c.samples.push_back(std::move(s));
  }
  if (!c.samples.empty()) {
    c.spec.n_samples = static_cast<int>(c.samples.size());
    c.spec.height = c.samples[0].image.height;
    c.spec.width = c.samples[0].image.width;
  }
  return c;
}

}  // namespace cfdiff
