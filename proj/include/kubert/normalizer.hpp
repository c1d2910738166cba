#pragma once

// Character-level cleaning of Central Kurdish (Sorani) text in Arabic script.
//
// One pass is: NFC -> char_map / strip_set / digit policy -> optional
// word-final Heh rewrite -> NFC -> whitespace collapse. The pass is repeated
// until the output stops changing, which makes normalize_text idempotent even
// when stripping a starter leaves a composable base+mark pair behind.

#include <unicode/normalizer2.h>
#include <unicode/unistr.h>

#include <cstdio>
#include <istream>
#include <map>
#include <ostream>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "kubert/io.hpp"
#include "kubert/utf8.hpp"

namespace kubert {

enum class DigitPolicy { kUnifyToAscii, kUnifyToArabicIndic, kKeep };

struct NormalizationRules {
  int version = kRulesFormatVersion;
  std::map<char32_t, std::u32string> char_map;
  std::set<char32_t> strip_set;
  DigitPolicy digits = DigitPolicy::kUnifyToAscii;
  // Word-final U+0647 -> U+06D5. Context-sensitive, so off unless asked for.
  bool heh_final_to_ae = false;

  static NormalizationRules defaults();
  static NormalizationRules parse(std::string_view text);
  static NormalizationRules load(const std::filesystem::path& path) {
    return parse(io::read_file(path));
  }
  std::string serialize() const;

  // Throws std::invalid_argument when a replacement would need a second pass.
  void validate() const;

  bool operator==(const NormalizationRules&) const = default;
};

struct NormalizedText {
  std::string text;
  std::string source_hash;
};

namespace detail {

inline std::string hex(char32_t cp) {
  char buf[16];
  std::snprintf(buf, sizeof(buf), "%04X", static_cast<unsigned>(cp));
  return buf;
}

inline char32_t parse_hex(std::string_view tok, size_t line_no) {
  if (tok.starts_with("U+") || tok.starts_with("u+")) tok.remove_prefix(2);
  if (tok.empty() || tok.size() > 6) {
    throw std::invalid_argument("rules line " + std::to_string(line_no) + ": bad code point '" +
                                std::string(tok) + "'");
  }
  char32_t cp = 0;
  for (char c : tok) {
    int d;
    if (c >= '0' && c <= '9') d = c - '0';
    else if (c >= 'a' && c <= 'f') d = c - 'a' + 10;
    else if (c >= 'A' && c <= 'F') d = c - 'A' + 10;
    else
      throw std::invalid_argument("rules line " + std::to_string(line_no) + ": bad code point '" +
                                  std::string(tok) + "'");
    cp = cp * 16 + static_cast<char32_t>(d);
  }
  if (cp > 0x10FFFF || (cp >= 0xD800 && cp <= 0xDFFF)) {
    throw std::invalid_argument("rules line " + std::to_string(line_no) +
                                ": code point out of range '" + std::string(tok) + "'");
  }
  return cp;
}

inline std::string nfc(const std::string& s) {
  UErrorCode status = U_ZERO_ERROR;
  const icu::Normalizer2* norm = icu::Normalizer2::getNFCInstance(status);
  if (U_FAILURE(status)) throw std::runtime_error("ICU NFC unavailable");
  icu::UnicodeString src = icu::UnicodeString::fromUTF8(s);
  if (norm->isNormalized(src, status) && U_SUCCESS(status)) return s;
  status = U_ZERO_ERROR;
  icu::UnicodeString dst = norm->normalize(src, status);
  if (U_FAILURE(status)) throw std::runtime_error("ICU NFC failed");
  std::string out;
  dst.toUTF8String(out);
  return out;
}

inline std::optional<char32_t> convert_digit(char32_t cp, DigitPolicy policy) {
  int value = -1;
  if (cp >= 0x0660 && cp <= 0x0669) value = static_cast<int>(cp - 0x0660);
  else if (cp >= 0x06F0 && cp <= 0x06F9) value = static_cast<int>(cp - 0x06F0);
  else if (cp >= U'0' && cp <= U'9') value = static_cast<int>(cp - U'0');
  if (value < 0) return std::nullopt;
  switch (policy) {
    case DigitPolicy::kUnifyToAscii:
      return U'0' + value;
    case DigitPolicy::kUnifyToArabicIndic:
      return 0x0660 + value;
    case DigitPolicy::kKeep:
      return cp;
  }
  return cp;
}

inline std::string apply_rules(std::string_view s, const NormalizationRules& rules) {
  std::u32string out;
  out.reserve(s.size());
  size_t pos = 0;
  while (pos < s.size()) {
    auto cp = utf8::next(s, pos);
    if (!cp) throw std::invalid_argument("invalid UTF-8 at byte " + std::to_string(pos));
    if (rules.strip_set.count(*cp)) continue;
    if (auto it = rules.char_map.find(*cp); it != rules.char_map.end()) {
      out += it->second;
      continue;
    }
    if (auto d = convert_digit(*cp, rules.digits)) {
      out.push_back(*d);
      continue;
    }
    out.push_back(*cp);
  }
  if (rules.heh_final_to_ae) {
    for (size_t i = 0; i < out.size(); ++i) {
      if (out[i] == 0x0647 && (i + 1 == out.size() || utf8::is_space(out[i + 1]))) out[i] = 0x06D5;
    }
  }
  return utf8::encode(out);
}

inline std::string collapse_whitespace(std::string_view s) {
  std::string out;
  out.reserve(s.size());
  bool pending_space = false;
  size_t pos = 0;
  while (pos < s.size()) {
    const size_t start = pos;
    auto cp = utf8::next(s, pos);
    if (!cp) throw std::invalid_argument("invalid UTF-8 at byte " + std::to_string(start));
    if (utf8::is_space(*cp)) {
      pending_space = !out.empty();
      continue;
    }
    if (pending_space) out.push_back(' ');
    pending_space = false;
    out.append(s.substr(start, pos - start));
  }
  return out;
}

inline std::string normalize_once(const std::string& s, const NormalizationRules& rules) {
  return collapse_whitespace(nfc(apply_rules(nfc(s), rules)));
}

}  // namespace detail

inline NormalizationRules NormalizationRules::defaults() {
  NormalizationRules r;
  r.char_map[0x064A] = U"ی";  // Arabic Yeh -> Farsi Yeh
  r.char_map[0x0643] = U"ک";  // Arabic Kaf -> Keheh
  r.strip_set.insert(0x0640);      // tatweel
  r.strip_set.insert(0x200C);      // ZWNJ
  r.strip_set.insert(0x200B);
  r.strip_set.insert(0xFEFF);
  for (char32_t cp = 0x064B; cp <= 0x0652; ++cp) r.strip_set.insert(cp);
  for (char32_t cp = 0x00; cp <= 0x1F; ++cp) {
    if (!utf8::is_space(cp)) r.strip_set.insert(cp);
  }
  r.strip_set.insert(0x7F);
  r.digits = DigitPolicy::kUnifyToAscii;
  return r;
}

inline void NormalizationRules::validate() const {
  for (const auto& [src, repl] : char_map) {
    if (strip_set.count(src)) {
      throw std::invalid_argument("code point " + detail::hex(src) + " is both mapped and stripped");
    }
    for (char32_t cp : repl) {
      if (char_map.count(cp) || strip_set.count(cp)) {
        throw std::invalid_argument("replacement for " + detail::hex(src) + " contains " +
                                    detail::hex(cp) + ", which is itself rewritten");
      }
    }
  }
  if (heh_final_to_ae && (char_map.count(0x06D5) || strip_set.count(0x06D5))) {
    throw std::invalid_argument("heh_final target 06D5 is itself rewritten");
  }
}

inline NormalizationRules NormalizationRules::parse(std::string_view text) {
  NormalizationRules r;
  r.char_map.clear();
  r.strip_set.clear();
  size_t line_no = 0;
  for (const auto& raw : io::split_lines(text)) {
    ++line_no;
    std::string_view line = raw;
    if (auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
    std::istringstream ss{std::string(line)};
    std::string directive;
    if (!(ss >> directive)) continue;
    std::vector<std::string> args;
    for (std::string a; ss >> a;) args.push_back(a);
    auto fail = [&](const std::string& what) {
      throw std::invalid_argument("rules line " + std::to_string(line_no) + ": " + what);
    };
    if (directive == "map") {
      if (args.size() < 2) fail("map needs a source and at least one replacement code point");
      char32_t src = detail::parse_hex(args[0], line_no);
      std::u32string repl;
      for (size_t i = 1; i < args.size(); ++i) repl.push_back(detail::parse_hex(args[i], line_no));
      if (r.char_map.count(src)) fail("duplicate map source " + detail::hex(src));
      r.char_map.emplace(src, std::move(repl));
    } else if (directive == "strip") {
      if (args.size() != 1) fail("strip takes exactly one code point");
      r.strip_set.insert(detail::parse_hex(args[0], line_no));
    } else if (directive == "digits") {
      if (args.size() != 1) fail("digits takes one of ascii|arabic|keep");
      if (args[0] == "ascii") r.digits = DigitPolicy::kUnifyToAscii;
      else if (args[0] == "arabic") r.digits = DigitPolicy::kUnifyToArabicIndic;
      else if (args[0] == "keep") r.digits = DigitPolicy::kKeep;
      else fail("unknown digit policy '" + args[0] + "'");
    } else if (directive == "heh_final") {
      if (args.size() != 1 || (args[0] != "on" && args[0] != "off")) fail("heh_final takes on|off");
      r.heh_final_to_ae = args[0] == "on";
    } else if (directive == "version") {
      if (args.size() != 1) fail("version takes one integer");
      int v = 0;
      try {
        v = std::stoi(args[0]);
      } catch (const std::exception&) {
        fail("bad version '" + args[0] + "'");
      }
      if (v != kRulesFormatVersion) fail("unsupported rules version " + args[0]);
      r.version = v;
    } else {
      fail("unknown directive '" + directive + "'");
    }
  }
  r.validate();
  return r;
}

inline std::string NormalizationRules::serialize() const {
  std::string out = "version " + std::to_string(version) + "\n";
  for (const auto& [src, repl] : char_map) {
    out += "map " + detail::hex(src);
    for (char32_t cp : repl) out += " " + detail::hex(cp);
    out += "\n";
  }
  for (char32_t cp : strip_set) out += "strip " + detail::hex(cp) + "\n";
  out += "digits ";
  out += digits == DigitPolicy::kUnifyToAscii ? "ascii"
         : digits == DigitPolicy::kUnifyToArabicIndic ? "arabic"
                                                       : "keep";
  out += "\n";
  out += heh_final_to_ae ? "heh_final on\n" : "heh_final off\n";
  return out;
}

inline NormalizedText normalize_text(std::string_view raw, const NormalizationRules& rules) {
  NormalizedText result{std::string(raw), fnv1a_hex(raw)};
  for (int pass = 0; pass < 4; ++pass) {
    std::string next = detail::normalize_once(result.text, rules);
    if (next == result.text) break;
    result.text = std::move(next);
  }
  return result;
}

// Each line normalized independently; lines that normalize to "" are dropped.
inline std::vector<std::string> normalize_stream(const std::vector<std::string>& lines,
                                                 const NormalizationRules& rules) {
  std::vector<std::string> out;
  out.reserve(lines.size());
  for (size_t i = 0; i < lines.size(); ++i) {
    if (!utf8::valid(lines[i])) {
      throw std::invalid_argument("invalid UTF-8 at line " + std::to_string(i + 1));
    }
    auto norm = normalize_text(lines[i], rules);
    if (!norm.text.empty()) out.push_back(std::move(norm.text));
  }
  return out;
}

// Streaming form; returns the number of lines written.
inline size_t normalize_stream(std::istream& in, std::ostream& out, const NormalizationRules& rules) {
  size_t line_no = 0;
  size_t written = 0;
  for (std::string line; std::getline(in, line);) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (!utf8::valid(line)) {
      throw std::invalid_argument("invalid UTF-8 at line " + std::to_string(line_no));
    }
    auto norm = normalize_text(line, rules);
    if (norm.text.empty()) continue;
    out << norm.text << '\n';
    if (!out) throw std::runtime_error("write failure at line " + std::to_string(line_no));
    ++written;
  }
  if (in.bad()) throw std::runtime_error("read failure after line " + std::to_string(line_no));
  return written;
}

}  // namespace kubert
