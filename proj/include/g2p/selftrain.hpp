#pragma once

// Self-training: clean raw text into candidate words, pseudo-label them with
// an ensemble, keep confident labels as silver data and retrain on gold +
// silver from scratch.

#include <algorithm>
#include <iomanip>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <vector>

#include "g2p/data.hpp"
#include "g2p/decoding.hpp"
#include "g2p/eval.hpp"
#include "g2p/training.hpp"
#include "g2p/unicode.hpp"

namespace g2p {

class SelfTrainError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct SelfTrainConfig {
  double threshold = 0.2;
  std::size_t word_cap = 1'000'000;
  std::set<LanguageCode> languages;  // empty = every language with a corpus
  bool lowercase = false;

  void validate() const {
    if (!(threshold > 0.0 && threshold < 1.0)) throw ConfigError("threshold must be in (0, 1)");
    if (word_cap == 0) throw ConfigError("word cap must be >= 1");
  }
};

// Removes <...> markup, splits on whitespace, strips leading and trailing
// punctuation/symbols/numerals, and drops words that still contain any.
inline std::vector<std::string> extract_words(std::string_view raw) {
  std::string text;
  text.reserve(raw.size());
  bool in_tag = false;
  for (char c : raw) {
    if (c == '<') {
      in_tag = true;
      text.push_back(' ');
    } else if (c == '>' && in_tag) {
      in_tag = false;
    } else if (!in_tag) {
      text.push_back(c);
    }
  }
  if (!unicode::is_valid_utf8(text)) throw DataError("corpus is not valid UTF-8");

  const auto cps = unicode::decode(unicode::nfc(text));
  std::vector<std::string> words;
  std::size_t i = 0;
  while (i < cps.size()) {
    while (i < cps.size() && unicode::is_whitespace(cps[i])) ++i;
    std::size_t j = i;
    while (j < cps.size() && !unicode::is_whitespace(cps[j])) ++j;
    const auto strip = [](char32_t c) { return unicode::is_punctuation(c) || unicode::is_numeral(c); };
    std::size_t b = i, e = j;
    while (b < e && strip(cps[b])) ++b;
    while (e > b && strip(cps[e - 1])) --e;
    if (b < e && std::none_of(cps.begin() + static_cast<std::ptrdiff_t>(b),
                              cps.begin() + static_cast<std::ptrdiff_t>(e), strip)) {
      words.push_back(unicode::encode(std::u32string(cps.begin() + static_cast<std::ptrdiff_t>(b),
                                                     cps.begin() + static_cast<std::ptrdiff_t>(e))));
    }
    i = j;
  }
  return words;
}

// Takes the first `cap` words in corpus order, then drops repeats keeping the
// first occurrence.
inline std::vector<std::string> dedupe_and_cap(std::span<const std::string> words, std::size_t cap) {
  if (cap == 0) throw ConfigError("word cap must be >= 1");
  std::vector<std::string> out;
  std::unordered_set<std::string> seen;
  for (std::size_t i = 0; i < std::min(cap, words.size()); ++i) {
    if (seen.insert(words[i]).second) out.push_back(words[i]);
  }
  return out;
}

struct SilverCandidate {
  PronunciationEntry entry;  // origin = silver
  double confidence = 0.0;
};

struct PseudoLabels {
  std::vector<SilverCandidate> candidates;
  std::vector<std::pair<std::string, std::string>> failures;  // (word, error)
};

inline PseudoLabels pseudo_label(const EnsembleSpec& spec, std::span<const std::string> words,
                                 const LanguageCode& lang, const BeamOptions& options = {}, std::size_t jobs = 1) {
  PseudoLabels out;
  for (auto& o : predict_file(spec, words, lang, options, jobs)) {
    if (o.result) {
      out.candidates.push_back({o.result->as_entry(Provenance::silver), o.result->confidence});
    } else {
      out.failures.emplace_back(o.word, o.error);
    }
  }
  return out;
}

class SilverSet {
 public:
  SilverSet(double threshold, std::string provenance) : threshold_(threshold), provenance_(std::move(provenance)) {}

  void add(SilverCandidate c) {
    if (!(c.confidence > threshold_)) {
      throw SelfTrainError("silver confidence " + std::to_string(c.confidence) + " does not exceed threshold " +
                           std::to_string(threshold_));
    }
    c.entry.origin = Provenance::silver;
    items_.push_back(std::move(c));
  }

  const std::vector<SilverCandidate>& items() const { return items_; }
  std::size_t size() const { return items_.size(); }
  bool empty() const { return items_.empty(); }
  double threshold() const { return threshold_; }
  const std::string& provenance() const { return provenance_; }

  std::vector<PronunciationEntry> entries() const {
    std::vector<PronunciationEntry> out;
    for (const auto& c : items_) out.push_back(c.entry);
    return out;
  }

  void append(const SilverSet& other) {
    for (const auto& c : other.items_) add(c);
  }

 private:
  double threshold_;
  std::string provenance_;
  std::vector<SilverCandidate> items_;
};

// Keeps candidates whose confidence is strictly greater than the threshold.
inline SilverSet select(std::span<const SilverCandidate> candidates, double threshold,
                        std::string provenance = {}) {
  if (!(threshold > 0.0 && threshold < 1.0)) throw ConfigError("threshold must be in (0, 1)");
  SilverSet s(threshold, std::move(provenance));
  for (const auto& c : candidates) {
    if (c.confidence > threshold) s.add(c);
  }
  return s;
}

inline double dev_mean_confidence(const EnsembleSpec& spec, const Dataset& dev, const BeamOptions& options = {},
                                  std::size_t jobs = 1) {
  if (dev.entries.empty()) throw SelfTrainError("dev set is empty");
  std::vector<double> conf(dev.entries.size());
  parallel_for(dev.entries.size(), jobs, [&](std::size_t i) {
    const auto& e = dev.entries[i];
    conf[i] = predict(spec, e.lang, e.source, options).confidence;
  });
  double total = 0.0;
  for (double c : conf) total += c;
  return total / static_cast<double>(conf.size());
}

// Silver labels that cannot serve as training targets: empty predictions and
// predictions containing the unknown-phoneme token.
inline bool usable_silver(const PronunciationEntry& e) {
  if (e.target.empty()) return false;
  const std::string unk(Vocabulary::kSpecials[Vocabulary::kUnk]);
  return std::find(e.target.begin(), e.target.end(), unk) == e.target.end();
}

struct SelectionStat {
  LanguageCode lang;
  std::size_t translated = 0;
  std::size_t selected = 0;
};

inline std::string selection_stats_tsv(std::span<const SelectionStat> stats) {
  std::ostringstream os;
  os << "Language\tTranslated\tSelected\n";
  std::size_t t = 0, s = 0;
  for (const auto& st : stats) {
    os << st.lang.str() << '\t' << st.translated << '\t' << st.selected << '\n';
    t += st.translated;
    s += st.selected;
  }
  os << "Total\t" << t << '\t' << s << '\n';
  return os.str();
}

inline std::string silver_tsv(const SilverSet& silver) {
  std::vector<PredictionRow> rows;
  for (const auto& c : silver.items()) rows.push_back({c.entry.word(), c.entry.target, c.confidence});
  return write_prediction_tsv(rows);
}

struct RetrainResult {
  Vocabularies vocabs;
  std::vector<SeedRun> runs;
  EvalReport report;
  std::size_t gold_count = 0;
  std::size_t silver_count = 0;      // silver entries actually added
  std::size_t silver_discarded = 0;  // empty or <unk>-bearing labels
};

// Gold + usable silver, vocabulary rebuilt over the combined set, retrained
// from scratch with the given configuration and evaluated on `dev`.
inline RetrainResult augment_and_retrain(std::span<const PronunciationEntry> gold, const SilverSet& silver,
                                         const ModelConfig& model_config, const TrainConfig& train_config,
                                         const Dataset& dev, const BeamOptions& options = {},
                                         std::size_t jobs = 1, bool parallel_seeds = false,
                                         const ProgressFn& progress = {}) {
  RetrainResult r;
  Dataset combined;
  combined.split = Split::train;
  combined.entries.assign(gold.begin(), gold.end());
  r.gold_count = gold.size();
  for (const auto& c : silver.items()) {
    if (usable_silver(c.entry)) {
      combined.entries.push_back(c.entry);
      ++r.silver_count;
    } else {
      ++r.silver_discarded;
    }
  }
  r.vocabs = build_vocabulary(std::span<const Dataset>(&combined, 1));
  r.runs = train_seeds(model_config, combined.entries, r.vocabs, train_config, parallel_seeds, progress);
  std::vector<Checkpoint> all;
  for (const auto& run : r.runs) all.insert(all.end(), run.checkpoints.begin(), run.checkpoints.end());
  const auto spec = EnsembleSpec::from_checkpoints(all, r.vocabs);
  r.report = evaluate(spec, dev, options, jobs);
  return r;
}

}  // namespace g2p
