#pragma once

// Thin UTF-8 helpers over ICU: NFC normalization, codepoint splitting and the
// character classes needed by the corpus cleaner.

#include <unicode/normalizer2.h>
#include <unicode/uchar.h>
#include <unicode/unistr.h>
#include <unicode/utf8.h>

#include <cstdint>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace g2p::unicode {

class UnicodeError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline bool is_valid_utf8(std::string_view text) {
  const auto* s = reinterpret_cast<const std::uint8_t*>(text.data());
  const auto length = static_cast<std::int32_t>(text.size());
  std::int32_t i = 0;
  while (i < length) {
    UChar32 c;
    U8_NEXT(s, i, length, c);
    if (c < 0) return false;
  }
  return true;
}

inline std::string nfc(std::string_view text) {
  UErrorCode status = U_ZERO_ERROR;
  const icu::Normalizer2* normalizer = icu::Normalizer2::getNFCInstance(status);
  if (U_FAILURE(status)) throw UnicodeError("ICU NFC normalizer unavailable");
  icu::UnicodeString in = icu::UnicodeString::fromUTF8(
      icu::StringPiece(text.data(), static_cast<std::int32_t>(text.size())));
  if (normalizer->isNormalized(in, status) && U_SUCCESS(status)) return std::string(text);
  status = U_ZERO_ERROR;
  icu::UnicodeString out = normalizer->normalize(in, status);
  if (U_FAILURE(status)) throw UnicodeError("NFC normalization failed");
  std::string result;
  out.toUTF8String(result);
  return result;
}

inline std::vector<char32_t> decode(std::string_view text) {
  const auto* s = reinterpret_cast<const std::uint8_t*>(text.data());
  const auto length = static_cast<std::int32_t>(text.size());
  std::vector<char32_t> out;
  out.reserve(text.size());
  std::int32_t i = 0;
  while (i < length) {
    UChar32 c;
    U8_NEXT(s, i, length, c);
    if (c < 0) throw UnicodeError("invalid UTF-8 sequence");
    out.push_back(static_cast<char32_t>(c));
  }
  return out;
}

inline void append(std::string& out, char32_t cp) {
  std::uint8_t buf[U8_MAX_LENGTH];
  std::int32_t n = 0;
  UBool error = false;
  U8_APPEND(buf, n, U8_MAX_LENGTH, static_cast<UChar32>(cp), error);
  if (error) throw UnicodeError("codepoint not encodable as UTF-8");
  out.append(reinterpret_cast<const char*>(buf), static_cast<std::size_t>(n));
}

inline std::string encode(std::u32string_view cps) {
  std::string out;
  for (char32_t c : cps) append(out, c);
  return out;
}

// Splits into one UTF-8 string per codepoint. Input is not normalized here.
inline std::vector<std::string> codepoints(std::string_view text) {
  std::vector<std::string> out;
  for (char32_t c : decode(text)) {
    std::string token;
    append(token, c);
    out.push_back(std::move(token));
  }
  return out;
}

inline std::string lowercase(std::string_view text) {
  icu::UnicodeString u = icu::UnicodeString::fromUTF8(
      icu::StringPiece(text.data(), static_cast<std::int32_t>(text.size())));
  u.toLower();
  std::string out;
  u.toUTF8String(out);
  return out;
}

inline bool is_whitespace(char32_t c) { return u_isUWhiteSpace(static_cast<UChar32>(c)) != 0; }

// Any general category P* (Pc Pd Ps Pe Pi Pf Po) plus symbols (S*), which the
// cleaner treats as punctuation as well.
inline bool is_punctuation(char32_t c) {
  const auto mask = U_GET_GC_MASK(static_cast<UChar32>(c));
  return (mask & (U_GC_P_MASK | U_GC_S_MASK)) != 0;
}

// Decimal digits, letter-like numbers (roman numerals) and other numerics.
inline bool is_numeral(char32_t c) {
  const auto mask = U_GET_GC_MASK(static_cast<UChar32>(c));
  return (mask & U_GC_N_MASK) != 0;
}

}  // namespace g2p::unicode
