#pragma once

// Ensemble inference: per-step prediction distributions of every member are
// averaged in probability space and searched with a length-unnormalized beam.

#include <algorithm>
#include <cmath>
#include <concepts>
#include <cstdint>
#include <limits>
#include <memory>
#include <numeric>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "g2p/data.hpp"
#include "g2p/model.hpp"
#include "g2p/parallel.hpp"
#include "g2p/training.hpp"

namespace g2p {

class DecodingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Elementwise arithmetic mean of member distributions, accumulated in double
// in member order. The mean of k identical float distributions is exactly
// that distribution.
template <class Distribution>
std::vector<double> ensemble_distribution(std::span<const Distribution> members) {
  if (members.empty()) throw DecodingError("ensemble has no members");
  const std::size_t v = std::size(members[0]);
  std::vector<double> out(v, 0.0);
  for (const auto& m : members) {
    if (std::size(m) != v) throw DecodingError("ensemble members disagree on vocabulary size");
    std::size_t i = 0;
    for (auto p : m) out[i++] += static_cast<double>(p);
  }
  const double k = static_cast<double>(members.size());
  for (auto& p : out) p /= k;
  return out;
}

inline double confidence(std::span<const double> step_probs) {
  if (step_probs.empty()) throw DecodingError("confidence of an empty prediction");
  double total = 0.0;
  for (double p : step_probs) total += p;
  return total / static_cast<double>(step_probs.size());
}

class EnsembleSpec {
 public:
  using Model = TransformerModel<float>;

  EnsembleSpec(std::vector<std::shared_ptr<const Model>> members, std::shared_ptr<const Vocabularies> vocabs)
      : members_(std::move(members)), vocabs_(std::move(vocabs)) {
    if (members_.empty()) throw DecodingError("ensemble needs at least one member");
    if (!vocabs_) throw DecodingError("ensemble needs vocabularies");
    for (const auto& m : members_) {
      if (m->source_vocab_size() != vocabs_->source.size() || m->target_vocab_size() != vocabs_->target.size()) {
        throw DecodingError("ensemble member vocabulary sizes disagree with the vocabularies");
      }
    }
  }

  // Every checkpoint must carry the fingerprints of `vocabs`.
  static EnsembleSpec from_checkpoints(std::span<const Checkpoint> checkpoints, const Vocabularies& vocabs) {
    if (checkpoints.empty()) throw DecodingError("ensemble needs at least one checkpoint");
    std::vector<std::shared_ptr<const Model>> members;
    for (const auto& c : checkpoints) {
      c.check_vocabularies(vocabs);
      members.push_back(std::make_shared<const Model>(c.to_model()));
    }
    return EnsembleSpec(std::move(members), std::make_shared<const Vocabularies>(vocabs));
  }

  const std::vector<std::shared_ptr<const Model>>& members() const { return members_; }
  std::size_t size() const { return members_.size(); }
  const Vocabularies& vocabularies() const { return *vocabs_; }
  std::size_t target_vocab_size() const { return vocabs_->target.size(); }

  // Same vocabularies, a subset of members (e.g. one checkpoint for ablations).
  EnsembleSpec subset(std::span<const std::size_t> indices) const {
    std::vector<std::shared_ptr<const Model>> picked;
    for (auto i : indices) picked.push_back(members_.at(i));
    return EnsembleSpec(std::move(picked), vocabs_);
  }

 private:
  std::vector<std::shared_ptr<const Model>> members_;
  std::shared_ptr<const Vocabularies> vocabs_;
};

template <class S>
concept NextTokenScorer = requires(S& s, const std::vector<std::vector<std::int32_t>>& prefixes) {
  { s.next_distributions(prefixes) } -> std::same_as<std::vector<std::vector<double>>>;
  { s.vocab_size() } -> std::convertible_to<std::size_t>;
};

// Scores prefixes for one source sentence against every ensemble member.
class EnsembleScorer {
 public:
  EnsembleScorer(const EnsembleSpec& spec, std::vector<std::int32_t> source_ids) : spec_(spec) {
    if (source_ids.empty()) throw DecodingError("empty source");
    source_ = TokenBatch::from(std::span<const std::vector<std::int32_t>>(&source_ids, 1));
    for (const auto& m : spec_.members()) memories_.push_back(m->encode_memory(source_));
  }

  std::size_t vocab_size() const { return spec_.target_vocab_size(); }

  std::vector<std::vector<double>> next_distributions(const std::vector<std::vector<std::int32_t>>& prefixes) {
    const std::size_t k = prefixes.size();
    const TokenBatch batch = TokenBatch::from(prefixes);
    TokenBatch src;
    src.batch = k;
    src.length = source_.length;
    for (std::size_t i = 0; i < k; ++i) src.ids.insert(src.ids.end(), source_.ids.begin(), source_.ids.end());

    const std::size_t v = vocab_size();
    std::vector<nn::Tensor<float>> per_member;
    per_member.reserve(memories_.size());
    for (std::size_t m = 0; m < memories_.size(); ++m) {
      const auto& mem = memories_[m];
      std::vector<float> rep;
      rep.reserve(mem.size() * k);
      for (std::size_t i = 0; i < k; ++i) rep.insert(rep.end(), mem.data().begin(), mem.data().end());
      nn::Tensor<float> memory({k, mem.dim(1), mem.dim(2)}, std::move(rep));
      per_member.push_back(spec_.members()[m]->decode_step(memory, src, batch));
    }
    std::vector<std::vector<double>> out(k);
    std::vector<std::span<const float>> rows(per_member.size());
    for (std::size_t i = 0; i < k; ++i) {
      for (std::size_t m = 0; m < per_member.size(); ++m) {
        rows[m] = per_member[m].data().subspan(i * v, v);
      }
      out[i] = ensemble_distribution(std::span<const std::span<const float>>(rows));
    }
    return out;
  }

 private:
  const EnsembleSpec& spec_;
  TokenBatch source_;
  std::vector<nn::Tensor<float>> memories_;
};

struct BeamOptions {
  std::size_t beam_width = 5;
  std::size_t max_len = 0;  // output tokens including EOS; 0 = 2 * source length + 8
  bool length_normalize = false;
};

struct BeamHypothesis {
  std::vector<std::int32_t> ids;  // BOS first
  double log_prob = 0.0;
  std::vector<double> step_probs;
  bool finished = false;
};

// Candidates are ranked by cumulative log-probability, ties broken by lower
// token id and then by the rank of the parent hypothesis. The top
// beam_width candidates survive each step; those ending in EOS are set aside.
// PAD and BOS are never emitted.
template <NextTokenScorer Scorer>
BeamHypothesis beam_search(Scorer& scorer, std::size_t beam_width, std::size_t max_len,
                           bool length_normalize = false) {
  if (beam_width == 0) throw DecodingError("beam width must be >= 1");
  if (max_len == 0) throw DecodingError("max_len must be >= 1");
  struct Candidate {
    double score;
    std::int32_t token;
    std::size_t parent;
    double prob;
  };
  std::vector<BeamHypothesis> live(1);
  live[0].ids = {Vocabulary::kBos};
  std::vector<BeamHypothesis> finished;
  std::vector<Candidate> candidates;

  for (std::size_t step = 1; step <= max_len && !live.empty(); ++step) {
    std::vector<std::vector<std::int32_t>> prefixes;
    prefixes.reserve(live.size());
    for (const auto& h : live) prefixes.push_back(h.ids);
    const auto dists = scorer.next_distributions(prefixes);
    if (dists.size() != live.size()) throw DecodingError("scorer returned the wrong number of distributions");

    candidates.clear();
    for (std::size_t h = 0; h < live.size(); ++h) {
      const auto& dist = dists[h];
      for (std::size_t t = 0; t < dist.size(); ++t) {
        const auto token = static_cast<std::int32_t>(t);
        if (token == Vocabulary::kPad || token == Vocabulary::kBos) continue;
        const double p = dist[t];
        if (!(p > 0.0)) continue;
        candidates.push_back({live[h].log_prob + std::log(p), token, h, p});
      }
    }
    const auto better = [](const Candidate& a, const Candidate& b) {
      if (a.score != b.score) return a.score > b.score;
      if (a.token != b.token) return a.token < b.token;
      return a.parent < b.parent;
    };
    const std::size_t keep = std::min(beam_width, candidates.size());
    std::partial_sort(candidates.begin(), candidates.begin() + static_cast<std::ptrdiff_t>(keep),
                      candidates.end(), better);

    std::vector<BeamHypothesis> next;
    for (std::size_t c = 0; c < keep; ++c) {
      const auto& cand = candidates[c];
      BeamHypothesis h;
      h.ids = live[cand.parent].ids;
      h.ids.push_back(cand.token);
      h.log_prob = cand.score;
      h.step_probs = live[cand.parent].step_probs;
      h.step_probs.push_back(cand.prob);
      h.finished = cand.token == Vocabulary::kEos;
      (h.finished ? finished : next).push_back(std::move(h));
    }
    live = std::move(next);
    if (finished.size() >= beam_width) break;
  }

  const auto score_of = [&](const BeamHypothesis& h) {
    if (!length_normalize) return h.log_prob;
    return h.log_prob / static_cast<double>(h.ids.size() - 1);
  };
  const auto& pool = finished.empty() ? live : finished;
  if (pool.empty()) throw DecodingError("beam search produced no hypotheses");
  const BeamHypothesis* best = &pool[0];
  for (const auto& h : pool) {
    if (score_of(h) > score_of(*best)) best = &h;
  }
  return *best;
}

struct PredictionResult {
  LanguageCode lang;
  std::vector<std::string> source;
  std::vector<std::string> predicted;
  std::vector<double> step_probs;  // one per emitted token, EOS included
  double confidence = 0.0;
  double log_prob = 0.0;
  bool finished = false;

  PronunciationEntry as_entry(Provenance origin = Provenance::silver) const {
    return {lang, source, predicted, origin};
  }
};

inline std::size_t default_max_len(std::size_t source_length) { return 2 * source_length + 8; }

inline PredictionResult predict(const EnsembleSpec& spec, const LanguageCode& lang,
                                std::span<const std::string> graphemes, const BeamOptions& options = {}) {
  if (graphemes.empty()) throw DecodingError("empty source");
  const auto& vocabs = spec.vocabularies();
  PronunciationEntry probe{lang, {graphemes.begin(), graphemes.end()}, {}, Provenance::gold};
  const auto ids = encode(prepend_language_tag(probe, vocabs.source), vocabs.source, false);
  const std::size_t max_len = options.max_len ? options.max_len : default_max_len(graphemes.size());
  if (ids.size() > spec.members().front()->config().max_positions ||
      max_len + 1 > spec.members().front()->config().max_positions) {
    throw DecodingError("word too long for the model's max_positions");
  }
  EnsembleScorer scorer(spec, ids);
  const BeamHypothesis best = beam_search(scorer, options.beam_width, max_len, options.length_normalize);

  PredictionResult r;
  r.lang = lang;
  r.source = probe.source;
  for (std::size_t i = 1; i < best.ids.size(); ++i) {
    if (best.ids[i] == Vocabulary::kEos) break;
    r.predicted.push_back(vocabs.target.token(best.ids[i]));
  }
  r.step_probs = best.step_probs;
  r.confidence = confidence(r.step_probs);
  r.log_prob = best.log_prob;
  r.finished = best.finished;
  return r;
}

struct PredictionOutcome {
  std::string word;
  std::optional<PredictionResult> result;
  std::string error;

  bool ok() const { return result.has_value(); }
};

// One outcome per input word, in input order. Failures (empty words, words
// that cannot be tokenized, over-long words) are reported per row.
inline std::vector<PredictionOutcome> predict_file(const EnsembleSpec& spec, std::span<const std::string> words,
                                                   const LanguageCode& lang, const BeamOptions& options = {},
                                                   std::size_t jobs = 1) {
  if (!spec.vocabularies().source.has_language(lang)) {
    throw DataError("language '" + lang.str() + "' is not known to the model");
  }
  std::vector<PredictionOutcome> out(words.size());
  parallel_for(words.size(), jobs, [&](std::size_t i) {
    out[i].word = words[i];
    try {
      const auto graphemes = tokenize_graphemes(words[i]);
      out[i].result = predict(spec, lang, graphemes, options);
    } catch (const std::exception& e) {
      out[i].error = e.what();
    }
  });
  return out;
}

inline std::vector<PredictionRow> to_prediction_rows(std::span<const PredictionOutcome> outcomes) {
  std::vector<PredictionRow> rows;
  rows.reserve(outcomes.size());
  for (const auto& o : outcomes) {
    PredictionRow r;
    r.word = o.word;
    if (o.result) {
      r.segments = o.result->predicted;
      r.confidence = o.result->confidence;
    }
    rows.push_back(std::move(r));
  }
  return rows;
}

}  // namespace g2p
