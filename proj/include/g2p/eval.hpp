#pragma once

// WER / micro-averaged PER and per-language reports.

#include <algorithm>
#include <cstdint>
#include <iomanip>
#include <map>
#include <numeric>
#include <set>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "g2p/data.hpp"
#include "g2p/decoding.hpp"
#include "json.hpp"

namespace g2p {

class EvalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Levenshtein distance over whole tokens with unit costs.
template <class Token>
std::size_t edit_distance(std::span<const Token> a, std::span<const Token> b) {
  std::vector<std::size_t> prev(b.size() + 1), cur(b.size() + 1);
  std::iota(prev.begin(), prev.end(), std::size_t{0});
  for (std::size_t i = 1; i <= a.size(); ++i) {
    cur[0] = i;
    for (std::size_t j = 1; j <= b.size(); ++j) {
      const std::size_t sub = prev[j - 1] + (a[i - 1] == b[j - 1] ? 0 : 1);
      cur[j] = std::min({prev[j] + 1, cur[j - 1] + 1, sub});
    }
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

inline std::size_t edit_distance(const std::vector<std::string>& a, const std::vector<std::string>& b) {
  return edit_distance<std::string>(std::span<const std::string>(a), std::span<const std::string>(b));
}

// (gold, predicted)
using SequencePair = std::pair<std::vector<std::string>, std::vector<std::string>>;

inline double word_error_rate(std::span<const SequencePair> pairs) {
  if (pairs.empty()) throw EvalError("word_error_rate of an empty list");
  const auto wrong = std::count_if(pairs.begin(), pairs.end(), [](const auto& p) { return p.first != p.second; });
  return 100.0 * static_cast<double>(wrong) / static_cast<double>(pairs.size());
}

// Pooled edit distance over pooled gold length.
inline double phoneme_error_rate(std::span<const SequencePair> pairs) {
  if (pairs.empty()) throw EvalError("phoneme_error_rate of an empty list");
  std::size_t distance = 0, gold = 0;
  for (const auto& [g, p] : pairs) {
    distance += edit_distance(g, p);
    gold += g.size();
  }
  if (gold == 0) throw EvalError("phoneme_error_rate with zero total gold length");
  return 100.0 * static_cast<double>(distance) / static_cast<double>(gold);
}

struct LanguageScore {
  double wer = 0.0;
  double per = 0.0;
  std::size_t n_words = 0;
  std::size_t n_gold_phonemes = 0;
  std::size_t total_edit_distance = 0;
  std::size_t failures = 0;  // words the decoder could not produce output for
};

struct EvalReport {
  std::map<LanguageCode, LanguageScore> rows;
  double macro_wer = 0.0;
  double macro_per = 0.0;

  std::string to_tsv() const {
    std::ostringstream os;
    os << std::fixed << std::setprecision(2);
    os << "lang\tWER\tPER\n";
    for (const auto& [lang, s] : rows) os << lang.str() << '\t' << s.wer << '\t' << s.per << '\n';
    os << "avg\t" << macro_wer << '\t' << macro_per << '\n';
    return os.str();
  }

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["columns"] = {"lang", "WER", "PER"};
    nlohmann::json rows_json = nlohmann::json::array();
    for (const auto& [lang, s] : rows) {
      rows_json.push_back({{"lang", lang.str()},
                           {"wer", s.wer},
                           {"per", s.per},
                           {"n_words", s.n_words},
                           {"n_gold_phonemes", s.n_gold_phonemes},
                           {"total_edit_distance", s.total_edit_distance},
                           {"failures", s.failures}});
    }
    j["rows"] = rows_json;
    j["avg"] = {{"wer", macro_wer}, {"per", macro_per}};
    return j;
  }
};

// Keeps only the given languages and recomputes the macro average.
inline EvalReport restrict_languages(const EvalReport& report, const std::set<LanguageCode>& langs) {
  EvalReport r;
  for (const auto& [lang, s] : report.rows) {
    if (langs.contains(lang)) r.rows.emplace(lang, s);
  }
  if (r.rows.empty()) return r;
  for (const auto& [lang, s] : r.rows) {
    r.macro_wer += s.wer;
    r.macro_per += s.per;
  }
  r.macro_wer /= static_cast<double>(r.rows.size());
  r.macro_per /= static_cast<double>(r.rows.size());
  return r;
}

struct ScoredItem {
  LanguageCode lang;
  std::vector<std::string> gold;
  std::vector<std::string> predicted;
  bool failed = false;
};

// Groups by language and fills per-language rows plus the unweighted mean
// over languages.
inline EvalReport score(std::span<const ScoredItem> items) {
  if (items.empty()) throw EvalError("nothing to score");
  std::map<LanguageCode, std::vector<SequencePair>> grouped;
  std::map<LanguageCode, std::size_t> failures;
  for (const auto& it : items) {
    if (it.gold.empty()) throw EvalError("gold transcription is empty");
    grouped[it.lang].emplace_back(it.gold, it.predicted);
    if (it.failed) ++failures[it.lang];
  }
  EvalReport r;
  for (const auto& [lang, pairs] : grouped) {
    LanguageScore s;
    s.wer = word_error_rate(pairs);
    s.per = phoneme_error_rate(pairs);
    s.n_words = pairs.size();
    for (const auto& [g, p] : pairs) {
      s.n_gold_phonemes += g.size();
      s.total_edit_distance += edit_distance(g, p);
    }
    s.failures = failures[lang];
    r.rows.emplace(lang, s);
  }
  for (const auto& [lang, s] : r.rows) {
    r.macro_wer += s.wer;
    r.macro_per += s.per;
  }
  r.macro_wer /= static_cast<double>(r.rows.size());
  r.macro_per /= static_cast<double>(r.rows.size());
  return r;
}

// Decodes every entry with the ensemble and scores against the gold targets.
inline EvalReport evaluate(const EnsembleSpec& spec, const Dataset& dataset, const BeamOptions& options = {},
                           std::size_t jobs = 1) {
  if (dataset.entries.empty()) throw EvalError("empty evaluation set");
  std::vector<ScoredItem> items(dataset.entries.size());
  parallel_for(dataset.entries.size(), jobs, [&](std::size_t i) {
    const auto& e = dataset.entries[i];
    items[i].lang = e.lang;
    items[i].gold = e.target;
    try {
      items[i].predicted = predict(spec, e.lang, e.source, options).predicted;
    } catch (const std::exception&) {
      items[i].failed = true;
    }
  });
  return score(items);
}

struct AblationRow {
  std::string label;
  EvalReport report;
};

// Each member alone, then the full ensemble.
inline std::vector<AblationRow> ablate_members(const EnsembleSpec& spec, std::span<const std::string> labels,
                                               const Dataset& dataset, const BeamOptions& options = {},
                                               std::size_t jobs = 1) {
  if (labels.size() != spec.size()) throw EvalError("one label per ensemble member is required");
  std::vector<AblationRow> rows;
  for (std::size_t i = 0; i < spec.size(); ++i) {
    const std::size_t idx[] = {i};
    rows.push_back({labels[i], evaluate(spec.subset(idx), dataset, options, jobs)});
  }
  rows.push_back({"Ensemble", evaluate(spec, dataset, options, jobs)});
  return rows;
}

inline std::string ablation_tsv(std::span<const AblationRow> rows) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(2);
  os << "model\tWER\tPER\n";
  for (const auto& r : rows) os << r.label << '\t' << r.report.macro_wer << '\t' << r.report.macro_per << '\n';
  return os.str();
}

}  // namespace g2p
