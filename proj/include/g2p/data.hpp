#pragma once

// Pronunciation entries, WikiPron-style TSV I/O, language tags and vocabularies.

#include <algorithm>
#include <array>
#include <cstdint>
#include <iomanip>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "g2p/hash.hpp"
#include "g2p/unicode.hpp"

namespace g2p {

class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ParseError : public DataError {
 public:
  ParseError(std::size_t line, const std::string& what)
      : DataError("line " + std::to_string(line) + ": " + what), line_(line) {}
  std::size_t line() const { return line_; }

 private:
  std::size_t line_;
};

class LanguageCode {
 public:
  LanguageCode() = default;
  explicit LanguageCode(std::string_view code) : code_(code) {
    if (code.size() != 3 ||
        !std::all_of(code.begin(), code.end(), [](char c) { return c >= 'a' && c <= 'z'; })) {
      throw DataError("language code must be exactly 3 lowercase ASCII letters: '" +
                      std::string(code) + "'");
    }
  }

  const std::string& str() const { return code_; }
  std::string tag() const { return "<" + code_ + ">"; }

  auto operator<=>(const LanguageCode&) const = default;

 private:
  std::string code_;
};

class LanguageRegistry {
 public:
  static constexpr std::array<std::string_view, 15> kSharedTaskCodes = {
      "ady", "arm", "bul", "dut", "fre", "geo", "gre", "hin",
      "hun", "ice", "jpn", "kor", "lit", "rum", "vie"};

  LanguageRegistry() = default;

  static LanguageRegistry shared_task() {
    LanguageRegistry r;
    for (auto code : kSharedTaskCodes) r.add(LanguageCode(code));
    return r;
  }

  void add(const LanguageCode& code) { codes_.insert(code); }
  bool contains(const LanguageCode& code) const { return codes_.contains(code); }
  const std::set<LanguageCode>& codes() const { return codes_; }

  LanguageCode require(std::string_view code) const {
    LanguageCode c(code);
    if (!contains(c)) throw DataError("language '" + std::string(code) + "' is not registered");
    return c;
  }

 private:
  std::set<LanguageCode> codes_;
};

enum class Provenance : std::uint8_t { gold, silver };

struct PronunciationEntry {
  LanguageCode lang;
  std::vector<std::string> source;  // one NFC codepoint per token
  std::vector<std::string> target;  // opaque phoneme segments
  Provenance origin = Provenance::gold;

  bool operator==(const PronunciationEntry&) const = default;

  std::string word() const {
    std::string w;
    for (const auto& t : source) w += t;
    return w;
  }
};

enum class Split : std::uint8_t { train, dev, test, silver };

inline std::string_view to_string(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::dev: return "dev";
    case Split::test: return "test";
    case Split::silver: return "silver";
  }
  return "?";
}

struct Dataset {
  std::vector<PronunciationEntry> entries;
  Split split = Split::train;

  std::size_t count(Provenance p) const {
    return static_cast<std::size_t>(std::count_if(
        entries.begin(), entries.end(), [p](const auto& e) { return e.origin == p; }));
  }
};

// NFC-normalizes a word and splits it into codepoint tokens. Rejects empty
// words and words containing whitespace.
inline std::vector<std::string> tokenize_graphemes(std::string_view word) {
  if (!unicode::is_valid_utf8(word)) throw DataError("invalid UTF-8 in word");
  const std::string normalized = unicode::nfc(word);
  std::vector<std::string> tokens;
  for (char32_t cp : unicode::decode(normalized)) {
    if (unicode::is_whitespace(cp)) throw DataError("word contains whitespace");
    std::string t;
    unicode::append(t, cp);
    tokens.push_back(std::move(t));
  }
  if (tokens.empty()) throw DataError("empty word");
  return tokens;
}

// Splits on single ASCII spaces; empty segments (doubled or edge spaces) are
// rejected since they cannot round-trip.
inline std::vector<std::string> split_segments(std::string_view text) {
  std::vector<std::string> out;
  if (text.empty()) return out;
  std::size_t start = 0;
  while (true) {
    const std::size_t pos = text.find(' ', start);
    const std::string_view seg = text.substr(start, pos == std::string_view::npos ? pos : pos - start);
    if (seg.empty()) throw DataError("empty phoneme segment");
    for (char32_t cp : unicode::decode(seg)) {
      if (unicode::is_whitespace(cp)) throw DataError("phoneme segment contains whitespace");
    }
    out.emplace_back(seg);
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return out;
}

namespace detail {

template <class F>
void for_each_line(std::string_view text, F&& f) {
  std::size_t line_no = 0;
  std::size_t start = 0;
  while (start < text.size()) {
    std::size_t end = text.find('\n', start);
    if (end == std::string_view::npos) end = text.size();
    std::string_view line = text.substr(start, end - start);
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    f(line_no, line);
    start = end + 1;
  }
}

inline std::vector<std::string_view> split_tabs(std::string_view line) {
  std::vector<std::string_view> fields;
  std::size_t start = 0;
  while (true) {
    const std::size_t pos = line.find('\t', start);
    fields.push_back(line.substr(start, pos == std::string_view::npos ? pos : pos - start));
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return fields;
}

inline std::string join(std::span<const std::string> parts, std::string_view sep) {
  std::string out;
  for (std::size_t i = 0; i < parts.size(); ++i) {
    if (i) out += sep;
    out += parts[i];
  }
  return out;
}

}  // namespace detail

inline std::vector<PronunciationEntry> parse_wikipron_tsv(std::string_view text,
                                                          const LanguageCode& lang) {
  if (!unicode::is_valid_utf8(text)) throw DataError("input is not valid UTF-8");
  std::vector<PronunciationEntry> entries;
  detail::for_each_line(text, [&](std::size_t line_no, std::string_view line) {
    if (line.empty()) return;
    const auto fields = detail::split_tabs(line);
    if (fields.size() != 2) throw ParseError(line_no, "expected exactly one tab");
    try {
      PronunciationEntry e;
      e.lang = lang;
      e.source = tokenize_graphemes(fields[0]);
      e.target = split_segments(fields[1]);
      if (e.target.empty()) throw DataError("empty phoneme sequence");
      entries.push_back(std::move(e));
    } catch (const ParseError&) {
      throw;
    } catch (const std::exception& ex) {
      throw ParseError(line_no, ex.what());
    }
  });
  return entries;
}

inline std::string write_tsv(std::span<const PronunciationEntry> entries) {
  std::string out;
  for (const auto& e : entries) {
    out += e.word();
    out += '\t';
    out += detail::join(e.target, " ");
    out += '\n';
  }
  return out;
}

// Word list input: one word per non-empty line.
inline std::vector<std::string> parse_word_list(std::string_view text) {
  std::vector<std::string> words;
  detail::for_each_line(text, [&](std::size_t, std::string_view line) {
    if (!line.empty()) words.emplace_back(line);
  });
  return words;
}

struct PredictionRow {
  std::string word;
  std::vector<std::string> segments;
  std::optional<double> confidence;  // empty marks a failed row
};

inline std::string format_confidence(double c) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(4) << c;
  return os.str();
}

inline std::string write_prediction_tsv(std::span<const PredictionRow> rows) {
  std::string out;
  for (const auto& r : rows) {
    out += r.word;
    out += '\t';
    out += detail::join(r.segments, " ");
    out += '\t';
    out += r.confidence ? format_confidence(*r.confidence) : std::string("NA");
    out += '\n';
  }
  return out;
}

inline std::vector<PredictionRow> parse_prediction_tsv(std::string_view text) {
  std::vector<PredictionRow> rows;
  detail::for_each_line(text, [&](std::size_t line_no, std::string_view line) {
    if (line.empty()) return;
    const auto fields = detail::split_tabs(line);
    if (fields.size() != 3) throw ParseError(line_no, "expected word, segments and confidence");
    PredictionRow r;
    r.word = std::string(fields[0]);
    r.segments = split_segments(fields[1]);
    if (fields[2] != "NA") {
      try {
        r.confidence = std::stod(std::string(fields[2]));
      } catch (const std::exception&) {
        throw ParseError(line_no, "bad confidence value");
      }
    }
    rows.push_back(std::move(r));
  });
  return rows;
}

class Vocabulary {
 public:
  static constexpr std::int32_t kPad = 0;
  static constexpr std::int32_t kBos = 1;
  static constexpr std::int32_t kEos = 2;
  static constexpr std::int32_t kUnk = 3;
  static constexpr std::array<std::string_view, 4> kSpecials = {"<pad>", "<s>", "</s>", "<unk>"};

  Vocabulary() {
    for (auto s : kSpecials) add(std::string(s));
  }

  // Rebuilds from an id-ordered token list, e.g. one read back from disk.
  static Vocabulary from_tokens(std::span<const std::string> tokens) {
    if (tokens.size() < kSpecials.size()) throw DataError("vocabulary missing special tokens");
    for (std::size_t i = 0; i < kSpecials.size(); ++i) {
      if (tokens[i] != kSpecials[i]) throw DataError("vocabulary specials out of order");
    }
    Vocabulary v;
    for (std::size_t i = kSpecials.size(); i < tokens.size(); ++i) {
      if (v.contains(tokens[i])) throw DataError("duplicate vocabulary token '" + tokens[i] + "'");
      v.add(tokens[i]);
      const auto& t = tokens[i];
      if (t.size() == 5 && t.front() == '<' && t.back() == '>') {
        v.lang_tags_.emplace(LanguageCode(std::string_view(t).substr(1, 3)), t);
      }
    }
    return v;
  }

  void add_language(const LanguageCode& code) {
    if (lang_tags_.contains(code)) return;
    lang_tags_.emplace(code, code.tag());
    add(code.tag());
  }

  void add_token(const std::string& token) {
    if (!contains(token)) add(token);
  }

  bool contains(const std::string& token) const { return token_to_id_.contains(token); }

  std::int32_t id(const std::string& token) const {
    auto it = token_to_id_.find(token);
    return it == token_to_id_.end() ? kUnk : it->second;
  }

  const std::string& token(std::int32_t id) const {
    if (id < 0 || static_cast<std::size_t>(id) >= id_to_token_.size()) {
      throw DataError("token id out of range: " + std::to_string(id));
    }
    return id_to_token_[static_cast<std::size_t>(id)];
  }

  std::size_t size() const { return id_to_token_.size(); }
  const std::vector<std::string>& tokens() const { return id_to_token_; }
  const std::map<LanguageCode, std::string>& lang_tags() const { return lang_tags_; }
  bool has_language(const LanguageCode& code) const { return lang_tags_.contains(code); }

  const std::string& lang_tag(const LanguageCode& code) const {
    auto it = lang_tags_.find(code);
    if (it == lang_tags_.end()) {
      throw DataError("language '" + code.str() + "' has no tag in this vocabulary");
    }
    return it->second;
  }

  std::uint64_t fingerprint() const {
    Fnv1a64 h;
    for (const auto& t : id_to_token_) {
      h.update(t);
      h.update(std::string_view("\n"));
    }
    return h.digest();
  }

  std::string serialize() const {
    std::string out;
    for (const auto& t : id_to_token_) {
      out += t;
      out += '\n';
    }
    return out;
  }

  static Vocabulary deserialize(std::string_view text) {
    std::vector<std::string> tokens;
    detail::for_each_line(text, [&](std::size_t line_no, std::string_view line) {
      if (line.empty()) throw ParseError(line_no, "empty vocabulary token");
      tokens.emplace_back(line);
    });
    return from_tokens(tokens);
  }

  bool operator==(const Vocabulary& o) const { return id_to_token_ == o.id_to_token_; }

 private:
  void add(const std::string& token) {
    token_to_id_.emplace(token, static_cast<std::int32_t>(id_to_token_.size()));
    id_to_token_.push_back(token);
  }

  std::unordered_map<std::string, std::int32_t> token_to_id_;
  std::vector<std::string> id_to_token_;
  std::map<LanguageCode, std::string> lang_tags_;
};

struct Vocabularies {
  Vocabulary source;
  Vocabulary target;
};

// Source vocabulary: specials, language tags sorted by code, then graphemes
// sorted bytewise. Target vocabulary: specials, then phoneme segments sorted.
// Only train-split datasets contribute.
inline Vocabularies build_vocabulary(std::span<const Dataset> datasets) {
  std::set<LanguageCode> langs;
  std::set<std::string> graphemes;
  std::set<std::string> phonemes;
  bool any_train = false;
  for (const auto& ds : datasets) {
    if (ds.split != Split::train) continue;
    any_train = true;
    for (const auto& e : ds.entries) {
      langs.insert(e.lang);
      graphemes.insert(e.source.begin(), e.source.end());
      phonemes.insert(e.target.begin(), e.target.end());
    }
  }
  if (!any_train) throw DataError("build_vocabulary needs at least one train split");

  Vocabularies v;
  for (const auto& l : langs) v.source.add_language(l);
  for (const auto& g : graphemes) v.source.add_token(g);
  for (const auto& p : phonemes) v.target.add_token(p);
  return v;
}

inline std::vector<std::string> prepend_language_tag(const PronunciationEntry& entry,
                                                     const Vocabulary& source_vocab) {
  std::vector<std::string> tokens;
  tokens.reserve(entry.source.size() + 1);
  tokens.push_back(source_vocab.lang_tag(entry.lang));
  tokens.insert(tokens.end(), entry.source.begin(), entry.source.end());
  return tokens;
}

inline std::vector<std::int32_t> encode(std::span<const std::string> seq, const Vocabulary& vocab,
                                        bool add_bos_eos) {
  std::vector<std::int32_t> ids;
  ids.reserve(seq.size() + 2);
  if (add_bos_eos) ids.push_back(Vocabulary::kBos);
  for (const auto& t : seq) ids.push_back(vocab.id(t));
  if (add_bos_eos) ids.push_back(Vocabulary::kEos);
  return ids;
}

inline std::vector<std::string> decode(std::span<const std::int32_t> ids, const Vocabulary& vocab) {
  std::vector<std::string> out;
  out.reserve(ids.size());
  for (auto id : ids) out.push_back(vocab.token(id));
  return out;
}

}  // namespace g2p
