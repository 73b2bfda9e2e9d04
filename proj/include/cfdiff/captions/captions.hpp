// Copyright 2026 The cfdiff Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <array>
#include <cctype>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace cfdiff {

class CaptionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

enum class Attribute { disease_a, disease_b, device, no_finding };

inline constexpr std::array<Attribute, 3> kCanonicalOrder{Attribute::disease_a, Attribute::disease_b,
                                                          Attribute::device};

inline const char* attribute_name(Attribute a) {
  switch (a) {
    case Attribute::disease_a: return "disease_a";
    case Attribute::disease_b: return "disease_b";
    case Attribute::device: return "device";
    case Attribute::no_finding: return "no_finding";
  }
  return "?";
}

inline Attribute attribute_from_name(std::string_view s) {
  for (Attribute a : {Attribute::disease_a, Attribute::disease_b, Attribute::device, Attribute::no_finding}) {
    if (s == attribute_name(a)) return a;
  }
  throw CaptionError("unknown attribute '" + std::string(s) + "'");
}

/// Binary labels for one image.
struct AttributeRecord {
  bool disease_a = false;
  bool disease_b = false;
  bool device = false;
  bool no_finding = false;

  bool get(Attribute a) const {
    switch (a) {
      case Attribute::disease_a: return disease_a;
      case Attribute::disease_b: return disease_b;
      case Attribute::device: return device;
      case Attribute::no_finding: return no_finding;
    }
    return false;
  }
  void set(Attribute a, bool v) {
    switch (a) {
      case Attribute::disease_a: disease_a = v; break;
      case Attribute::disease_b: disease_b = v; break;
      case Attribute::device: device = v; break;
      case Attribute::no_finding: no_finding = v; break;
    }
  }

  bool any_disease() const { return disease_a || disease_b; }
  bool valid() const { return !(no_finding && any_disease()); }
  void validate() const {
    if (!valid()) throw CaptionError("contradictory record: no_finding set together with a disease");
  }

  /// Record with no_finding recomputed from the disease labels.
  static AttributeRecord make(bool disease_a, bool disease_b, bool device) {
    return {disease_a, disease_b, device, !(disease_a || disease_b)};
  }

  friend bool operator==(const AttributeRecord&, const AttributeRecord&) = default;
};

enum class TemplateId { findings, normal };

inline constexpr std::string_view kFindingsPrefix = "scan of a subject showing";
inline constexpr std::string_view kNormalTemplate = "normal scan of a subject with no significant findings";
inline constexpr std::string_view kNegationWord = "without";

struct Caption {
  std::string text;
  AttributeRecord source_record;
  TemplateId template_id = TemplateId::findings;
  /// Attributes spelled out as "without <attr>" after the template.
  std::vector<Attribute> negated;
};

inline std::vector<Attribute> positive_attributes(const AttributeRecord& r) {
  std::vector<Attribute> out;
  for (Attribute a : kCanonicalOrder) {
    if (r.get(a)) out.push_back(a);
  }
  return out;
}

/// Renders text from a record, a template choice and optional negations.
inline std::string render_caption(const AttributeRecord& r, const std::vector<Attribute>& negated = {}) {
  r.validate();
  const auto pos = positive_attributes(r);
  std::string text;
  if (pos.empty()) {
    text = kNormalTemplate;
  } else {
    text = kFindingsPrefix;
    for (std::size_t i = 0; i < pos.size(); ++i) {
      text += i == 0 ? " " : ", ";
      text += attribute_name(pos[i]);
    }
  }
  for (Attribute a : negated) {
    if (r.get(a)) throw CaptionError(std::string("cannot negate present attribute ") + attribute_name(a));
    text += " ";
    text += kNegationWord;
    text += " ";
    text += attribute_name(a);
  }
  return text;
}

/// Positive attributes joined in canonical order into the findings template;
/// records with nothing positive use the normal template.
inline Caption caption_from_record(const AttributeRecord& r, const std::vector<Attribute>& negated = {}) {
  Caption c;
  c.text = render_caption(r, negated);
  c.source_record = r;
  c.template_id = positive_attributes(r).empty() ? TemplateId::normal : TemplateId::findings;
  c.negated = negated;
  return c;
}

/// Caption used while training: records without a device get an explicit
/// "without device" clause with probability `negation_prob`.
template <class Rng>
Caption training_caption(const AttributeRecord& r, Rng& rng, double negation_prob) {
  if (!r.device && negation_prob > 0.0 && rng.bernoulli(negation_prob)) {
    return caption_from_record(r, {Attribute::device});
  }
  return caption_from_record(r);
}

enum class EditAction { add, remove };
enum class RemovalStyle { omit, negate };

struct AttributeEdit {
  Attribute attribute;
  EditAction action;
};

struct EditPromptOptions {
  RemovalStyle device_removal = RemovalStyle::negate;
  RemovalStyle disease_removal = RemovalStyle::omit;
};

struct EditPrompts {
  Caption original;
  Caption edited;
};

/// Builds (P_orig, P_edit) for an intervention on a labelled record.
inline EditPrompts make_edit_prompts(const AttributeRecord& r, const std::vector<AttributeEdit>& intervention,
                                     const EditPromptOptions& opts = {}) {
  r.validate();
  AttributeRecord after = r;
  std::vector<Attribute> negated;
  for (const auto& e : intervention) {
    if (e.attribute == Attribute::no_finding) {
      throw CaptionError("no_finding is derived from the disease labels and cannot be edited directly");
    }
    const bool present = after.get(e.attribute);
    if (e.action == EditAction::remove && !present) {
      throw CaptionError(std::string("cannot remove absent attribute ") + attribute_name(e.attribute));
    }
    if (e.action == EditAction::add && present) {
      throw CaptionError(std::string("cannot add present attribute ") + attribute_name(e.attribute));
    }
    after.set(e.attribute, e.action == EditAction::add);
    if (e.action == EditAction::remove) {
      const auto style = e.attribute == Attribute::device ? opts.device_removal : opts.disease_removal;
      if (style == RemovalStyle::negate) negated.push_back(e.attribute);
    }
  }
  after.no_finding = !after.any_disease();
  EditPrompts p;
  p.original = caption_from_record(r);
  p.edited = caption_from_record(after, negated);
  return p;
}

// ---------------------------------------------------------------------------
// Tokenizer

inline constexpr int kPadId = 0;
inline constexpr int kEndId = 1;
inline constexpr int kDefaultTokenLength = 16;

/// Closed word-level vocabulary covering every template, attribute and the
/// negation word. Ids 0 and 1 are the pad and end markers.
inline const std::vector<std::string>& vocabulary() {
  static const std::vector<std::string> words = {
      "<pad>", "<end>", "scan",        "of",       "a",         "subject", "showing", "disease_a", "disease_b",
      "device", ",",    "normal",      "with",     "no",        "significant", "findings", "without"};
  return words;
}

struct TokenSequence {
  std::vector<int> ids;

  int length() const { return static_cast<int>(ids.size()); }
  friend bool operator==(const TokenSequence&, const TokenSequence&) = default;
};

/// Lower-cases, separates commas and collapses whitespace.
inline std::vector<std::string> split_words(std::string_view text) {
  std::vector<std::string> words;
  std::string cur;
  auto flush = [&] {
    if (!cur.empty()) words.push_back(std::move(cur));
    cur.clear();
  };
  for (char ch : text) {
    const auto c = static_cast<unsigned char>(ch);
    if (std::isspace(c)) {
      flush();
    } else if (ch == ',') {
      flush();
      words.emplace_back(",");
    } else {
      cur.push_back(static_cast<char>(std::tolower(c)));
    }
  }
  flush();
  return words;
}

inline std::string normalize_text(std::string_view text) {
  std::string out;
  for (const auto& w : split_words(text)) {
    if (w != "," && !out.empty()) out += ' ';
    out += w;
  }
  return out;
}

inline TokenSequence tokenize(std::string_view text, int length = kDefaultTokenLength) {
  const auto words = split_words(text);
  if (words.empty()) throw CaptionError("cannot tokenize empty text");
  if (static_cast<int>(words.size()) + 1 > length) {
    throw CaptionError("text has " + std::to_string(words.size()) + " words; limit is " + std::to_string(length - 1));
  }
  const auto& vocab = vocabulary();
  TokenSequence seq;
  seq.ids.reserve(static_cast<std::size_t>(length));
  for (const auto& w : words) {
    auto it = std::find(vocab.begin() + 2, vocab.end(), w);
    if (it == vocab.end()) throw CaptionError("out-of-vocabulary word '" + w + "'");
    seq.ids.push_back(static_cast<int>(it - vocab.begin()));
  }
  seq.ids.push_back(kEndId);
  seq.ids.resize(static_cast<std::size_t>(length), kPadId);
  return seq;
}

/// The empty prompt used for the unconditional branch: end marker then padding.
inline TokenSequence null_tokens(int length = kDefaultTokenLength) {
  TokenSequence seq;
  seq.ids.assign(static_cast<std::size_t>(length), kPadId);
  seq.ids[0] = kEndId;
  return seq;
}

inline void validate_tokens(const TokenSequence& seq, int length = kDefaultTokenLength) {
  if (seq.length() != length) throw CaptionError("token sequence length " + std::to_string(seq.length()));
  bool ended = false;
  const int vocab = static_cast<int>(vocabulary().size());
  for (int id : seq.ids) {
    if (id < 0 || id >= vocab) throw CaptionError("token id out of range");
    if (ended && id != kPadId) throw CaptionError("non-pad token after end marker");
    if (!ended && id == kPadId) throw CaptionError("pad token before end marker");
    if (id == kEndId) ended = true;
  }
  if (!ended) throw CaptionError("missing end marker");
}

inline std::string detokenize(const TokenSequence& seq) {
  std::string out;
  for (int id : seq.ids) {
    if (id == kEndId) break;
    const auto& w = vocabulary().at(static_cast<std::size_t>(id));
    if (w != "," && !out.empty()) out += ' ';
    out += w;
  }
  return out;
}

/// For each position of `edited`, the aligned position in `original` (or -1)
/// under a longest-common-subsequence match of token ids.
inline std::vector<int> align_tokens(const TokenSequence& original, const TokenSequence& edited) {
  const std::size_t n = original.ids.size(), m = edited.ids.size();
  std::vector<std::vector<int>> lcs(n + 1, std::vector<int>(m + 1, 0));
  for (std::size_t i = n; i-- > 0;) {
    for (std::size_t j = m; j-- > 0;) {
      lcs[i][j] = original.ids[i] == edited.ids[j] ? lcs[i + 1][j + 1] + 1 : std::max(lcs[i + 1][j], lcs[i][j + 1]);
    }
  }
  std::vector<int> map(m, -1);
  std::size_t i = 0, j = 0;
  while (i < n && j < m) {
    if (original.ids[i] == edited.ids[j]) {
      map[j] = static_cast<int>(i);
      ++i;
      ++j;
    } else if (lcs[i + 1][j] >= lcs[i][j + 1]) {
      ++i;
    } else {
      ++j;
    }
  }
  return map;
}

}  // namespace cfdiff
