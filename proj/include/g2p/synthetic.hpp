#pragma once

// Rule-based toy orthographies for tests and desk-scale experiments. The
// languages share an alphabet and most letter-to-sound rules and differ in a
// handful, so a multilingual model can pool evidence across them.

#include <algorithm>
#include <cstdint>
#include <random>
#include <set>
#include <string>
#include <vector>

#include "g2p/data.hpp"

namespace g2p::synthetic {

inline const std::vector<std::string>& consonants() {
  static const std::vector<std::string> c = {"p", "t", "k", "b", "d", "g", "m", "n", "s", "l", "r", "f", "v", "z", "c"};
  return c;
}

inline const std::vector<std::string>& vowels() {
  static const std::vector<std::string> v = {"a", "e", "i", "o", "u"};
  return v;
}

inline bool is_vowel(const std::string& g) {
  const auto& v = vowels();
  return std::find(v.begin(), v.end(), g) != v.end();
}

inline bool is_voiced_stop(const std::string& g) { return g == "b" || g == "d" || g == "g" || g == "z" || g == "v"; }

inline std::string devoice(const std::string& g) {
  if (g == "b") return "p";
  if (g == "d") return "t";
  if (g == "g") return "k";
  if (g == "z") return "s";
  if (g == "v") return "f";
  return g;
}

// Codes understood by `transcribe`.
inline const std::vector<std::string>& language_codes() {
  static const std::vector<std::string> codes = {"sya", "syb", "syc"};
  return codes;
}

// Shared rules: one segment per letter, "c" is /k/ and "sh"-like clusters do
// not exist. Per-language differences:
//   sya: "c" before e/i is /s/.
//   syb: "c" before e/i is /tʃ/; "u" is /y/.
//   syc: word-final voiced obstruents devoice; "a" is /ɑ/.
inline std::vector<std::string> transcribe(const std::string& lang, const std::vector<std::string>& letters) {
  std::vector<std::string> out;
  for (std::size_t i = 0; i < letters.size(); ++i) {
    const std::string& g = letters[i];
    const bool front_next = i + 1 < letters.size() && (letters[i + 1] == "e" || letters[i + 1] == "i");
    const bool last = i + 1 == letters.size();
    if (g == "c") {
      if (front_next && lang == "sya") {
        out.emplace_back("s");
      } else if (front_next && lang == "syb") {
        out.emplace_back("tʃ");
      } else {
        out.emplace_back("k");
      }
    } else if (g == "u" && lang == "syb") {
      out.emplace_back("y");
    } else if (g == "a" && lang == "syc") {
      out.emplace_back("ɑ");
    } else if (last && lang == "syc" && is_voiced_stop(g)) {
      out.push_back(devoice(g));
    } else {
      out.push_back(g);
    }
  }
  return out;
}

// Random (C)V(C) syllables, 1-3 of them.
template <class Rng>
std::vector<std::string> random_word(Rng& rng, std::size_t max_syllables = 3) {
  const auto& c = consonants();
  const auto& v = vowels();
  std::uniform_int_distribution<std::size_t> syl(1, max_syllables);
  std::uniform_int_distribution<std::size_t> pick_c(0, c.size() - 1);
  std::uniform_int_distribution<std::size_t> pick_v(0, v.size() - 1);
  std::bernoulli_distribution onset(0.85), coda(0.3);
  std::vector<std::string> w;
  const std::size_t n = syl(rng);
  for (std::size_t s = 0; s < n; ++s) {
    if (onset(rng)) w.push_back(c[pick_c(rng)]);
    w.push_back(v[pick_v(rng)]);
    if (coda(rng)) w.push_back(c[pick_c(rng)]);
  }
  return w;
}

// `count` distinct words with gold transcriptions for `lang`. Words in
// `exclude` are skipped so train/dev sets can be made disjoint.
inline std::vector<PronunciationEntry> make_entries(const std::string& lang, std::size_t count, std::uint64_t seed,
                                                    std::set<std::string>* exclude = nullptr) {
  std::mt19937_64 rng(seed);
  std::set<std::string> local;
  std::set<std::string>& seen = exclude ? *exclude : local;
  std::vector<PronunciationEntry> out;
  const LanguageCode code(lang);
  std::size_t attempts = 0;
  while (out.size() < count) {
    if (++attempts > count * 1000 + 10000) throw DataError("synthetic word space exhausted");
    auto w = random_word(rng);
    const std::string word = detail::join(w, "");
    if (!seen.insert(word).second) continue;
    out.push_back({code, w, transcribe(lang, w), Provenance::gold});
  }
  return out;
}

struct Split3 {
  std::vector<PronunciationEntry> train, dev;
};

// Disjoint train/dev sets for one language.
inline Split3 make_split(const std::string& lang, std::size_t n_train, std::size_t n_dev, std::uint64_t seed) {
  std::set<std::string> seen;
  Split3 s;
  s.train = make_entries(lang, n_train, seed, &seen);
  s.dev = make_entries(lang, n_dev, seed ^ 0x5bd1e995u, &seen);
  return s;
}

// Running text with punctuation, numerals, markup and repeats, built from
// random words of the shared alphabet.
inline std::string make_corpus(std::size_t n_tokens, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> kind(0, 99);
  std::vector<std::string> recent;
  std::string text;
  for (std::size_t i = 0; i < n_tokens; ++i) {
    const int k = kind(rng);
    std::string tok;
    if (k < 4) {
      tok = std::to_string(rng() % 3000);  // bare numeral, dropped by the cleaner
    } else if (k < 6) {
      tok = "<ref name=\"x" + std::to_string(rng() % 50) + "\">";
    } else if (k < 8) {
      tok = detail::join(random_word(rng, 2), "") + std::to_string(rng() % 10) + detail::join(random_word(rng, 1), "");
    } else if (k < 20 && !recent.empty()) {
      tok = recent[rng() % recent.size()];
    } else {
      tok = detail::join(random_word(rng), "");
      recent.push_back(tok);
      if (recent.size() > 200) recent.erase(recent.begin());
    }
    const int p = kind(rng);
    if (p < 8) {
      tok += ",";
    } else if (p < 12) {
      tok = "«" + tok + "»";
    } else if (p < 15) {
      tok = "(" + tok + ").";
    } else if (p < 17) {
      tok += "'s";  // internal punctuation: dropped
    }
    text += tok;
    text += (i % 17 == 16) ? "\n" : " ";
  }
  return text;
}

}  // namespace g2p::synthetic
