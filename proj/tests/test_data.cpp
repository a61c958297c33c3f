#include <gtest/gtest.h>

#include <algorithm>
#include <random>

#include "g2p/data.hpp"
#include "g2p/unicode.hpp"

using namespace g2p;

namespace {

const LanguageCode kFre("fre");
const LanguageCode kHun("hun");

PronunciationEntry entry(const char* lang, std::vector<std::string> src, std::vector<std::string> tgt) {
  return {LanguageCode(lang), std::move(src), std::move(tgt), Provenance::gold};
}

}  // namespace

TEST(LanguageCode, AcceptsThreeLowercaseLetters) {
  EXPECT_EQ(LanguageCode("fre").str(), "fre");
  EXPECT_EQ(LanguageCode("fre").tag(), "<fre>");
  EXPECT_THROW(LanguageCode("fr"), DataError);
  EXPECT_THROW(LanguageCode("Fre"), DataError);
  EXPECT_THROW(LanguageCode("fr1"), DataError);
  EXPECT_THROW(LanguageCode("fren"), DataError);
}

TEST(LanguageRegistry, SharedTaskHasFifteenCodes) {
  const auto reg = LanguageRegistry::shared_task();
  for (const char* c : {"ady", "arm", "bul", "dut", "fre", "geo", "gre", "hin", "hun", "ice", "jpn", "kor", "lit",
                        "rum", "vie"}) {
    EXPECT_TRUE(reg.contains(LanguageCode(c))) << c;
  }
  EXPECT_FALSE(reg.contains(LanguageCode("sya")));
  EXPECT_THROW(reg.require("sya"), DataError);
  auto custom = reg;
  custom.add(LanguageCode("sya"));
  EXPECT_EQ(custom.require("sya"), LanguageCode("sya"));
}

TEST(ParseWikipron, FrenchSamplePair) {
  const auto es = parse_wikipron_tsv("v\xC3\xAAtu\tv e t y\n", kFre);
  ASSERT_EQ(es.size(), 1u);
  EXPECT_EQ(es[0].lang, kFre);
  EXPECT_EQ(es[0].source, (std::vector<std::string>{"v", "\xC3\xAA", "t", "u"}));
  EXPECT_EQ(es[0].target, (std::vector<std::string>{"v", "e", "t", "y"}));
  EXPECT_EQ(es[0].origin, Provenance::gold);
}

TEST(ParseWikipron, NfcComposesDecomposedInput) {
  // "e" + combining circumflex normalizes to a single codepoint.
  const auto es = parse_wikipron_tsv("ve\xCC\x82tu\tv e t y\n", kFre);
  ASSERT_EQ(es.size(), 1u);
  EXPECT_EQ(es[0].source, (std::vector<std::string>{"v", "\xC3\xAA", "t", "u"}));
}

TEST(ParseWikipron, EmptyInputGivesNoEntries) {
  EXPECT_TRUE(parse_wikipron_tsv("", kFre).empty());
  EXPECT_TRUE(parse_wikipron_tsv("\n\n", kFre).empty());
}

TEST(ParseWikipron, MissingTabReportsLineNumber) {
  try {
    parse_wikipron_tsv("front v e", kFre);
    FAIL() << "expected ParseError";
  } catch (const ParseError& e) {
    EXPECT_EQ(e.line(), 1u);
  }
  try {
    parse_wikipron_tsv("a\ta\nb\tb\nc\td\te\n", kFre);
    FAIL() << "expected ParseError";
  } catch (const ParseError& e) {
    EXPECT_EQ(e.line(), 3u);
  }
}

TEST(ParseWikipron, EmptyWordOrSegmentsRejected) {
  EXPECT_THROW(parse_wikipron_tsv("\tv e\n", kFre), ParseError);
  EXPECT_THROW(parse_wikipron_tsv("front\t\n", kFre), ParseError);
  EXPECT_THROW(parse_wikipron_tsv("front\tf  r\n", kFre), ParseError);
}

TEST(ParseWikipron, AcceptsCrlfAndPreservesOrder) {
  const auto es = parse_wikipron_tsv("b\tb\r\na\ta\r\n", kFre);
  ASSERT_EQ(es.size(), 2u);
  EXPECT_EQ(es[0].word(), "b");
  EXPECT_EQ(es[1].word(), "a");
}

TEST(ParseWikipron, RejectsInvalidUtf8) { EXPECT_THROW(parse_wikipron_tsv("a\xFF\ta\n", kFre), DataError); }

TEST(PrependLanguageTag, AddsTagAndLeavesEntryAlone) {
  Vocabulary v;
  v.add_language(kFre);
  v.add_language(kHun);
  const auto e = entry("fre", {"f", "r", "o", "n", "t"}, {"f"});
  const auto copy = e;
  EXPECT_EQ(prepend_language_tag(e, v), (std::vector<std::string>{"<fre>", "f", "r", "o", "n", "t"}));
  EXPECT_EQ(e, copy);
  const auto h = entry("hun", {"\xC5\x91"}, {"\xC3\xB8\xCB\x90"});
  EXPECT_EQ(prepend_language_tag(h, v), (std::vector<std::string>{"<hun>", "\xC5\x91"}));
}

TEST(PrependLanguageTag, UnregisteredLanguageThrows) {
  Vocabulary v;
  v.add_language(kFre);
  EXPECT_THROW(prepend_language_tag(entry("xxx", {"a"}, {"a"}), v), DataError);
}

TEST(BuildVocabulary, LayoutAndSetSemantics) {
  Dataset d{{entry("hun", {"b", "a"}, {"b", "a"}), entry("fre", {"a", "c"}, {"a", "k"})}, Split::train};
  const auto v = build_vocabulary(std::span<const Dataset>(&d, 1));
  EXPECT_EQ(v.source.tokens(),
            (std::vector<std::string>{"<pad>", "<s>", "</s>", "<unk>", "<fre>", "<hun>", "a", "b", "c"}));
  EXPECT_EQ(v.target.tokens(), (std::vector<std::string>{"<pad>", "<s>", "</s>", "<unk>", "a", "b", "k"}));
  EXPECT_EQ(v.source.lang_tag(kFre), "<fre>");
  EXPECT_EQ(v.source.id("<pad>"), Vocabulary::kPad);
  EXPECT_EQ(v.source.id("<s>"), Vocabulary::kBos);
  EXPECT_EQ(v.source.id("</s>"), Vocabulary::kEos);
  EXPECT_EQ(v.source.id("<unk>"), Vocabulary::kUnk);
}

TEST(BuildVocabulary, FifteenLanguagesGiveFifteenTags) {
  std::vector<PronunciationEntry> es;
  for (auto code : LanguageRegistry::kSharedTaskCodes) es.push_back(entry(std::string(code).c_str(), {"a"}, {"a"}));
  Dataset d{es, Split::train};
  const auto v = build_vocabulary(std::span<const Dataset>(&d, 1));
  EXPECT_EQ(v.source.lang_tags().size(), 15u);
}

TEST(BuildVocabulary, IgnoresNonTrainSplitsAndRequiresOne) {
  Dataset dev{{entry("fre", {"z"}, {"z"})}, Split::dev};
  EXPECT_THROW(build_vocabulary(std::span<const Dataset>(&dev, 1)), DataError);
  std::vector<Dataset> both = {Dataset{{entry("fre", {"a"}, {"a"})}, Split::train}, dev};
  const auto v = build_vocabulary(both);
  EXPECT_FALSE(v.source.contains("z"));
}

TEST(BuildVocabulary, DeterministicAndPermutationInvariant) {
  std::vector<PronunciationEntry> es;
  std::mt19937_64 rng(3);
  for (int i = 0; i < 200; ++i) {
    std::vector<std::string> s, t;
    for (int j = 0; j < 5; ++j) {
      s.push_back(std::string(1, static_cast<char>('a' + rng() % 26)));
      t.push_back(std::string(1, static_cast<char>('A' + rng() % 26)));
    }
    es.push_back({LanguageCode(i % 2 ? "fre" : "hun"), s, t, Provenance::gold});
  }
  Dataset a{es, Split::train};
  auto shuffled = es;
  std::shuffle(shuffled.begin(), shuffled.end(), rng);
  Dataset b{shuffled, Split::train};
  const auto va = build_vocabulary(std::span<const Dataset>(&a, 1));
  const auto va2 = build_vocabulary(std::span<const Dataset>(&a, 1));
  const auto vb = build_vocabulary(std::span<const Dataset>(&b, 1));
  EXPECT_EQ(va.source, va2.source);
  EXPECT_EQ(va.source, vb.source);
  EXPECT_EQ(va.target, vb.target);
  EXPECT_EQ(va.source.fingerprint(), vb.source.fingerprint());
}

TEST(Vocabulary, DenseBijection) {
  Dataset d{{entry("fre", {"x", "y"}, {"p", "q"})}, Split::train};
  const auto v = build_vocabulary(std::span<const Dataset>(&d, 1));
  for (std::size_t i = 0; i < v.source.size(); ++i) {
    EXPECT_EQ(v.source.id(v.source.token(static_cast<std::int32_t>(i))), static_cast<std::int32_t>(i));
  }
  EXPECT_THROW(v.source.token(static_cast<std::int32_t>(v.source.size())), DataError);
  EXPECT_THROW(v.source.token(-1), DataError);
}

TEST(Vocabulary, SerializeRoundTrip) {
  Dataset d{{entry("fre", {"x", "\xC3\xAA"}, {"p", "t\xCA\x83"}), entry("hun", {"y"}, {"q"})}, Split::train};
  const auto v = build_vocabulary(std::span<const Dataset>(&d, 1));
  const auto back = Vocabulary::deserialize(v.source.serialize());
  EXPECT_EQ(back, v.source);
  EXPECT_EQ(back.lang_tags(), v.source.lang_tags());
  EXPECT_EQ(back.fingerprint(), v.source.fingerprint());
  EXPECT_THROW(Vocabulary::deserialize("<s>\n<pad>\n</s>\n<unk>\n"), DataError);
}

TEST(Encode, MapsUnknownToUnkAndAddsMarkers) {
  Dataset d{{entry("fre", {"a", "b"}, {"a"})}, Split::train};
  const auto v = build_vocabulary(std::span<const Dataset>(&d, 1));
  const std::vector<std::string> seq{"a", "\xC3\x9F", "b"};
  const auto ids = encode(seq, v.source, false);
  EXPECT_EQ(ids[1], Vocabulary::kUnk);
  EXPECT_EQ(encode(std::vector<std::string>{}, v.source, true), (std::vector<std::int32_t>{1, 2}));
  const std::vector<std::string> known{"b", "a", "<fre>"};
  EXPECT_EQ(decode(encode(known, v.source, false), v.source), known);
  const auto framed = encode(known, v.source, true);
  EXPECT_EQ(framed.front(), Vocabulary::kBos);
  EXPECT_EQ(framed.back(), Vocabulary::kEos);
  EXPECT_EQ(framed.size(), known.size() + 2);
}

TEST(WriteTsv, JoinRuleAndEmpty) {
  EXPECT_EQ(write_tsv(std::vector<PronunciationEntry>{}), "");
  const auto e = entry("fre", {"a", "b", "c"}, {"x", "y", "z"});
  const std::string line = write_tsv(std::vector<PronunciationEntry>{e});
  EXPECT_EQ(line, "abc\tx y z\n");
  const auto after_tab = line.substr(line.find('\t') + 1);
  EXPECT_EQ(std::count(after_tab.begin(), after_tab.end(), ' '), 2);
}

TEST(WriteTsv, RoundTripProperty) {
  // Random entries over an alphabet mixing ASCII, precomposed Latin and IPA.
  const std::vector<std::string> graphemes = {"a", "b", "z", "\xC3\xA9", "\xC5\x91", "\xD5\xA1", "\xE3\x81\x8B"};
  const std::vector<std::string> phonemes = {"a", "t\xCA\x83", "\xC9\x99", "k\xCA\xB0", "e\xCB\x90", "\xC5\x8B"};
  std::mt19937_64 rng(11);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<PronunciationEntry> es;
    const std::size_t n = rng() % 8;
    for (std::size_t i = 0; i < n; ++i) {
      PronunciationEntry e{kFre, {}, {}, Provenance::gold};
      const std::size_t ls = 1 + rng() % 10, lt = 1 + rng() % 10;
      for (std::size_t j = 0; j < ls; ++j) e.source.push_back(graphemes[rng() % graphemes.size()]);
      for (std::size_t j = 0; j < lt; ++j) e.target.push_back(phonemes[rng() % phonemes.size()]);
      es.push_back(std::move(e));
    }
    EXPECT_EQ(parse_wikipron_tsv(write_tsv(es), kFre), es);
  }
}

TEST(TokenizeGraphemes, Rules) {
  EXPECT_EQ(tokenize_graphemes("ab"), (std::vector<std::string>{"a", "b"}));
  EXPECT_THROW(tokenize_graphemes(""), DataError);
  EXPECT_THROW(tokenize_graphemes("a b"), DataError);
  // Devanagari consonant + vowel sign stays two tokens.
  EXPECT_EQ(tokenize_graphemes("\xE0\xA4\x95\xE0\xA4\xBF").size(), 2u);
}

TEST(PredictionTsv, RoundTripWithFailures) {
  std::vector<PredictionRow> rows = {{"abc", {"a", "b"}, 0.12345}, {"zz", {}, std::nullopt}};
  const auto text = write_prediction_tsv(rows);
  EXPECT_EQ(text, "abc\ta b\t0.1235\nzz\t\tNA\n");
  const auto back = parse_prediction_tsv(text);
  ASSERT_EQ(back.size(), 2u);
  EXPECT_EQ(back[0].segments, rows[0].segments);
  EXPECT_NEAR(*back[0].confidence, 0.1235, 1e-12);
  EXPECT_FALSE(back[1].confidence.has_value());
  EXPECT_TRUE(back[1].segments.empty());
}

TEST(Dataset, ProvenanceCounts) {
  Dataset d{{entry("fre", {"a"}, {"a"}), {kFre, {"b"}, {"b"}, Provenance::silver}}, Split::train};
  EXPECT_EQ(d.count(Provenance::gold), 1u);
  EXPECT_EQ(d.count(Provenance::silver), 1u);
  EXPECT_EQ(to_string(Split::silver), "silver");
}

TEST(Unicode, CharacterClasses) {
  EXPECT_TRUE(unicode::is_punctuation(U'«'));
  EXPECT_TRUE(unicode::is_punctuation(U','));
  EXPECT_TRUE(unicode::is_punctuation(U'$'));
  EXPECT_FALSE(unicode::is_punctuation(U'a'));
  EXPECT_TRUE(unicode::is_numeral(U'7'));
  EXPECT_TRUE(unicode::is_numeral(U'१'));  // Devanagari one
  EXPECT_TRUE(unicode::is_whitespace(U' '));
  EXPECT_EQ(unicode::lowercase("\xC3\x89t\xC3\xA9"), "\xC3\xA9t\xC3\xA9");
}
