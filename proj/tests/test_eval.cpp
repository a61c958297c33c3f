#include <gtest/gtest.h>

#include <algorithm>
#include <random>

#include "g2p/eval.hpp"
#include "g2p/synthetic.hpp"
#include "metric_fixture.hpp"

using namespace g2p;
using g2p::testing::oracle_edit_distance;
using g2p::testing::random_tokens;

namespace {

std::vector<std::string> toks(std::string_view s) {
  std::vector<std::string> out;
  for (char c : s) out.emplace_back(1, c);
  return out;
}

}  // namespace

TEST(EditDistance, SpecExamples) {
  EXPECT_EQ(edit_distance(toks("abc"), toks("abc")), 0u);
  EXPECT_EQ(edit_distance(toks("abc"), toks("ac")), 1u);
  EXPECT_EQ(edit_distance(toks("kitten"), toks("sitting")), 3u);
  EXPECT_EQ(edit_distance(toks(""), toks("abcd")), 4u);
}

TEST(EditDistance, WholeTokensNotCharacters) {
  const std::vector<std::string> a{"tʃ", "a"}, b{"t", "a"};
  EXPECT_EQ(edit_distance(a, b), 1u);
  const std::vector<std::string> c{"aː"}, d{"a", "ː"};
  EXPECT_EQ(edit_distance(c, d), 2u);
}

TEST(EditDistance, MatchesMemoizedOracle) {
  std::mt19937_64 rng(17);
  for (int i = 0; i < 1000; ++i) {
    const auto a = random_tokens(rng, 12, 4);
    const auto b = random_tokens(rng, 12, 4);
    ASSERT_EQ(edit_distance(a, b), oracle_edit_distance(a, b));
  }
}

TEST(EditDistance, MetricAxioms) {
  std::mt19937_64 rng(3);
  for (int i = 0; i < 500; ++i) {
    const auto a = random_tokens(rng, 8, 3), b = random_tokens(rng, 8, 3), c = random_tokens(rng, 8, 3);
    const auto ab = edit_distance(a, b), ba = edit_distance(b, a);
    EXPECT_EQ(ab, ba);
    EXPECT_EQ(ab == 0, a == b);
    EXPECT_EQ(edit_distance(a, a), 0u);
    EXPECT_LE(edit_distance(a, c), ab + edit_distance(b, c));
  }
}

TEST(Rates, SpecExamples) {
  const std::vector<SequencePair> same{{toks("ab"), toks("ab")}, {toks("c"), toks("c")}};
  EXPECT_EQ(word_error_rate(same), 0.0);
  EXPECT_EQ(phoneme_error_rate(same), 0.0);

  const std::vector<SequencePair> one_of_four{
      {toks("ab"), toks("ab")}, {toks("c"), toks("c")}, {toks("de"), toks("dx")}, {toks("f"), toks("f")}};
  EXPECT_DOUBLE_EQ(word_error_rate(one_of_four), 25.0);

  // Gold lengths 3 and 4 with distances 1 and 2.
  const std::vector<SequencePair> pooled{{toks("abc"), toks("abx")}, {toks("defg"), toks("de")}};
  EXPECT_NEAR(phoneme_error_rate(pooled), 42.857, 1e-3);
  EXPECT_DOUBLE_EQ(phoneme_error_rate(pooled), 100.0 * 3.0 / 7.0);
}

TEST(Rates, Errors) {
  EXPECT_THROW(word_error_rate(std::span<const SequencePair>{}), EvalError);
  EXPECT_THROW(phoneme_error_rate(std::span<const SequencePair>{}), EvalError);
  const std::vector<SequencePair> empty_gold{{{}, toks("a")}};
  EXPECT_THROW(phoneme_error_rate(empty_gold), EvalError);
}

TEST(Rates, MicroAveragingIsNotMeanOfWordRates) {
  // Gold lengths 1 and 9; the short word is wrong, the long one right.
  const std::vector<SequencePair> pairs{{toks("a"), toks("b")}, {toks("abcdefghi"), toks("abcdefghi")}};
  EXPECT_DOUBLE_EQ(phoneme_error_rate(pairs), 10.0);
  const double mean_of_rates = (100.0 * 1 / 1 + 100.0 * 0 / 9) / 2.0;
  EXPECT_DOUBLE_EQ(mean_of_rates, 50.0);
  EXPECT_NE(phoneme_error_rate(pairs), mean_of_rates);
}

TEST(Rates, CraftedFixture) {
  const auto fixture = g2p::testing::crafted_pairs();
  ASSERT_EQ(fixture.size(), 50u);
  std::vector<SequencePair> pairs;
  for (const auto& p : fixture) {
    ASSERT_EQ(edit_distance(p.gold, p.predicted), p.distance);
    pairs.emplace_back(p.gold, p.predicted);
  }
  // 36 of 50 mismatch; distances sum to 49 over 171 gold tokens.
  EXPECT_DOUBLE_EQ(word_error_rate(pairs), 72.0);
  EXPECT_DOUBLE_EQ(phoneme_error_rate(pairs), 100.0 * 49.0 / 171.0);
}

TEST(Rates, WerIsOrderInvariant) {
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<SequencePair> pairs;
    for (int i = 0; i < 20; ++i) {
      auto g = random_tokens(rng, 4, 2);
      if (g.empty()) g.push_back("a");
      pairs.emplace_back(g, random_tokens(rng, 4, 2));
    }
    const double w = word_error_rate(pairs), p = phoneme_error_rate(pairs);
    std::shuffle(pairs.begin(), pairs.end(), rng);
    EXPECT_EQ(word_error_rate(pairs), w);
    EXPECT_EQ(phoneme_error_rate(pairs), p);
    EXPECT_GE(w, 0.0);
    EXPECT_LE(w, 100.0);
  }
}

TEST(Score, MacroIsMeanOfRows) {
  std::mt19937_64 rng(9);
  std::vector<ScoredItem> items;
  const auto langs = synthetic::language_codes();
  for (int i = 0; i < 300; ++i) {
    ScoredItem it;
    it.lang = LanguageCode(langs[static_cast<std::size_t>(i) % 3]);
    it.gold = random_tokens(rng, 5, 3);
    if (it.gold.empty()) it.gold.push_back("a");
    it.predicted = rng() % 2 ? it.gold : random_tokens(rng, 5, 3);
    items.push_back(it);
  }
  const auto r = score(items);
  ASSERT_EQ(r.rows.size(), 3u);
  double w = 0, p = 0;
  std::size_t words = 0;
  for (const auto& [lang, s] : r.rows) {
    w += s.wer;
    p += s.per;
    words += s.n_words;
    EXPECT_DOUBLE_EQ(s.per, 100.0 * static_cast<double>(s.total_edit_distance) /
                                static_cast<double>(s.n_gold_phonemes));
  }
  EXPECT_EQ(words, 300u);
  EXPECT_NEAR(r.macro_wer, w / 3.0, 1e-9);
  EXPECT_NEAR(r.macro_per, p / 3.0, 1e-9);

  const auto only = restrict_languages(r, {LanguageCode("sya")});
  ASSERT_EQ(only.rows.size(), 1u);
  EXPECT_EQ(only.macro_wer, r.rows.at(LanguageCode("sya")).wer);
}

TEST(Score, ReportFormats) {
  std::vector<ScoredItem> items{{LanguageCode("syb"), toks("ab"), toks("ab"), false},
                                {LanguageCode("sya"), toks("abc"), toks("ab"), false},
                                {LanguageCode("sya"), toks("a"), {}, true}};
  const auto r = score(items);
  EXPECT_EQ(r.to_tsv(), "lang\tWER\tPER\nsya\t100.00\t50.00\nsyb\t0.00\t0.00\navg\t50.00\t25.00\n");
  const auto j = r.to_json();
  EXPECT_EQ(j["rows"].size(), 2u);
  EXPECT_EQ(j["rows"][0]["failures"], 1);
  EXPECT_EQ(j["avg"]["wer"], 50.0);
  EXPECT_THROW(score(std::span<const ScoredItem>{}), EvalError);
}

TEST(Evaluate, PerfectPredictorScoresZero) {
  // A gold-echo "prediction" scored through the same path as decoded output.
  const auto entries = synthetic::make_entries("syc", 50, 4);
  std::vector<ScoredItem> items;
  for (const auto& e : entries) items.push_back({e.lang, e.target, e.target, false});
  const auto r = score(items);
  EXPECT_EQ(r.macro_wer, 0.0);
  EXPECT_EQ(r.macro_per, 0.0);
}

TEST(Evaluate, AblationHasOneRowPerMemberPlusEnsemble) {
  auto split = synthetic::make_split("sya", 60, 10, 2);
  const std::vector<Dataset> ds{{split.train, Split::train}};
  const auto vocabs = build_vocabulary(ds);
  TrainConfig cfg;
  cfg.total_steps = 8;
  cfg.batch_tokens = 128;
  cfg.warmup_steps = 4;
  cfg.seeds = {1};
  auto m = TransformerModel<float>::init(ModelConfig::micro(), vocabs.source.size(), vocabs.target.size(), 1);
  const auto ckpts = train(m, split.train, vocabs, cfg, 1);
  ASSERT_EQ(ckpts.size(), 4u);
  const auto spec = EnsembleSpec::from_checkpoints(ckpts, vocabs);
  const std::vector<std::string> labels{"2 of 8 steps", "4 of 8 steps", "6 of 8 steps", "8 of 8 steps"};
  const Dataset dev{split.dev, Split::dev};
  const auto rows = ablate_members(spec, labels, dev, {.beam_width = 2, .max_len = 12});
  ASSERT_EQ(rows.size(), 5u);
  EXPECT_EQ(rows.back().label, "Ensemble");
  const auto tsv = ablation_tsv(rows);
  EXPECT_EQ(std::count(tsv.begin(), tsv.end(), '\n'), 6);
  EXPECT_NE(tsv.find("Ensemble\t"), std::string::npos);
  EXPECT_THROW(ablate_members(spec, std::span(labels).first(2), dev), EvalError);

  // evaluate is deterministic and honours jobs.
  const auto a = evaluate(spec, dev, {.beam_width = 2, .max_len = 12}, 1);
  const auto b = evaluate(spec, dev, {.beam_width = 2, .max_len = 12}, 2);
  EXPECT_EQ(a.to_json(), b.to_json());
  EXPECT_EQ(a.to_json(), rows.back().report.to_json());
  EXPECT_THROW(evaluate(spec, Dataset{{}, Split::dev}), EvalError);
}
