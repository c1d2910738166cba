#pragma once

// WordPiece vocabulary training (likelihood-ratio pair merges) and greedy
// longest-match-first encoding with "##" continuation pieces.

#include <algorithm>
#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "kubert/io.hpp"
#include "kubert/utf8.hpp"

namespace kubert {

class Vocab {
 public:
  static constexpr int32_t kPad = 0;
  static constexpr int32_t kUnk = 1;
  static constexpr int32_t kCls = 2;
  static constexpr int32_t kSep = 3;
  static constexpr int32_t kMask = 4;
  static constexpr int32_t kNumSpecials = 5;
  static constexpr std::array<std::string_view, 5> kSpecialTokens = {"[PAD]", "[UNK]", "[CLS]",
                                                                     "[SEP]", "[MASK]"};
  static constexpr std::string_view kContinuation = "##";
  static constexpr size_t kMaxWordChars = 100;

  Vocab() : Vocab(std::vector<std::string>(kSpecialTokens.begin(), kSpecialTokens.end())) {}

  explicit Vocab(std::vector<std::string> pieces) : pieces_(std::move(pieces)) {
    if (pieces_.size() < kNumSpecials) {
      throw std::invalid_argument("vocabulary must start with the 5 special tokens");
    }
    for (int32_t i = 0; i < kNumSpecials; ++i) {
      if (pieces_[i] != kSpecialTokens[i]) {
        throw std::invalid_argument("id " + std::to_string(i) + " must be " +
                                    std::string(kSpecialTokens[i]) + ", found '" + pieces_[i] + "'");
      }
    }
    for (size_t i = 0; i < pieces_.size(); ++i) {
      const std::string& p = pieces_[i];
      if (i >= kNumSpecials) {
        if (p.empty() || p == kContinuation) {
          throw std::invalid_argument("empty piece at id " + std::to_string(i));
        }
        max_piece_chars_ = std::max(max_piece_chars_, utf8::length(p));
      }
      if (!index_.emplace(p, static_cast<int32_t>(i)).second) {
        throw std::invalid_argument("duplicate piece '" + p + "' at id " + std::to_string(i));
      }
    }
  }

  size_t size() const { return pieces_.size(); }
  const std::string& piece(int32_t id) const { return pieces_.at(static_cast<size_t>(id)); }
  const std::vector<std::string>& pieces() const { return pieces_; }

  std::optional<int32_t> find(std::string_view piece) const {
    auto it = index_.find(std::string(piece));
    if (it == index_.end()) return std::nullopt;
    return it->second;
  }

  // Lookup restricted to ordinary pieces; special-token strings in text never
  // match.
  std::optional<int32_t> find_piece(std::string_view piece) const {
    auto id = find(piece);
    if (id && *id < kNumSpecials) return std::nullopt;
    return id;
  }

  static bool is_special(int32_t id) { return id >= 0 && id < kNumSpecials; }
  size_t max_piece_chars() const { return max_piece_chars_; }

  void save(const std::filesystem::path& path) const {
    io::write_file_atomic(path, io::join_lines(pieces_));
  }

  static Vocab load(const std::filesystem::path& path) {
    auto lines = io::read_lines(path);
    if (lines.empty()) throw std::invalid_argument("vocab file '" + path.string() + "' is empty");
    std::unordered_map<std::string, size_t> seen;
    for (size_t i = 0; i < lines.size(); ++i) {
      auto [it, fresh] = seen.emplace(lines[i], i + 1);
      if (!fresh) {
        throw std::invalid_argument("duplicate piece '" + lines[i] + "' at line " +
                                    std::to_string(i + 1) + " (first seen at line " +
                                    std::to_string(it->second) + ")");
      }
    }
    return Vocab(std::move(lines));
  }

  bool operator==(const Vocab& o) const { return pieces_ == o.pieces_; }

 private:
  std::vector<std::string> pieces_;
  std::unordered_map<std::string, int32_t> index_;
  size_t max_piece_chars_ = 0;
};

struct Encoding {
  std::vector<int32_t> ids;
  std::vector<int32_t> attention_mask;
  std::vector<int32_t> segment_ids;
  bool overflow = false;

  size_t length() const {
    return static_cast<size_t>(std::count(attention_mask.begin(), attention_mask.end(), 1));
  }
};

// Greedy longest-match-first segmentation of one word. Returns {kUnk} when
// some position has no matching piece or the word is too long.
inline std::vector<int32_t> tokenize_word(std::u32string_view word, const Vocab& vocab) {
  if (word.empty()) return {};
  if (word.size() > Vocab::kMaxWordChars) return {Vocab::kUnk};
  std::vector<int32_t> out;
  size_t start = 0;
  while (start < word.size()) {
    const size_t longest = std::min(word.size(), start + vocab.max_piece_chars());
    std::optional<int32_t> match;
    size_t end = longest;
    for (; end > start; --end) {
      std::string candidate = start > 0 ? std::string(Vocab::kContinuation) : std::string();
      candidate += utf8::encode(word.substr(start, end - start));
      match = vocab.find_piece(candidate);
      if (match) break;
    }
    if (!match) return {Vocab::kUnk};
    out.push_back(*match);
    start = end;
  }
  return out;
}

// Piece ids for a whole text, without specials.
inline std::vector<int32_t> tokenize(std::string_view text, const Vocab& vocab) {
  std::vector<int32_t> ids;
  for (const auto& w : utf8::split_words(text)) {
    auto piece_ids = tokenize_word(utf8::decode(w), vocab);
    ids.insert(ids.end(), piece_ids.begin(), piece_ids.end());
  }
  return ids;
}

inline Encoding encode(std::string_view text, const Vocab& vocab, size_t max_len) {
  if (max_len < 3) throw std::invalid_argument("max_len must be at least 3, got " + std::to_string(max_len));
  auto pieces = tokenize(text, vocab);
  Encoding enc;
  if (pieces.size() > max_len - 2) {
    pieces.resize(max_len - 2);
    enc.overflow = true;
  }
  enc.ids.reserve(max_len);
  enc.ids.push_back(Vocab::kCls);
  enc.ids.insert(enc.ids.end(), pieces.begin(), pieces.end());
  enc.ids.push_back(Vocab::kSep);
  enc.attention_mask.assign(enc.ids.size(), 1);
  enc.ids.resize(max_len, Vocab::kPad);
  enc.attention_mask.resize(max_len, 0);
  enc.segment_ids.assign(max_len, 0);
  return enc;
}

inline std::string decode(const std::vector<int32_t>& ids, const Vocab& vocab) {
  std::string out;
  for (int32_t id : ids) {
    if (id < 0 || static_cast<size_t>(id) >= vocab.size()) {
      throw std::out_of_range("token id " + std::to_string(id) + " out of range (vocab size " +
                              std::to_string(vocab.size()) + ")");
    }
    if (Vocab::is_special(id)) continue;
    std::string_view p = vocab.piece(id);
    if (p.starts_with(Vocab::kContinuation)) {
      out.append(p.substr(Vocab::kContinuation.size()));
    } else {
      if (!out.empty()) out.push_back(' ');
      out.append(p);
    }
  }
  return out;
}

namespace detail {

struct PairStat {
  uint64_t count = 0;
  std::set<uint32_t> words;
};

inline uint64_t pair_key(uint32_t l, uint32_t r) { return (uint64_t{l} << 32) | r; }

}  // namespace detail

// Trains a WordPiece vocabulary. Pieces: specials, the sorted seed alphabet
// (each character in the positions it was observed: word-initial and/or
// "##"), then merged pieces in merge order. Each round merges the adjacent
// pair maximising freq(pair) / (freq(left) * freq(right)); ties go to the
// lexicographically smaller merged string. Only word types occurring at least
// min_freq times take part in merges.
inline Vocab train_wordpiece(const std::vector<std::string>& corpus, size_t vocab_size,
                             uint64_t min_freq) {
  if (min_freq < 1) throw std::invalid_argument("min_freq must be at least 1");
  std::map<std::string, uint64_t> word_counts;
  for (const auto& line : corpus) {
    for (auto& w : utf8::split_words(line)) ++word_counts[std::move(w)];
  }
  if (word_counts.empty()) throw std::invalid_argument("cannot train a tokenizer on an empty corpus");

  std::set<std::string> alphabet;
  std::vector<std::pair<std::u32string, uint64_t>> words;
  for (const auto& [w, c] : word_counts) {
    auto cps = utf8::decode(w);
    for (size_t i = 0; i < cps.size(); ++i) {
      std::string piece = i == 0 ? std::string() : std::string(Vocab::kContinuation);
      alphabet.insert(piece + utf8::encode(cps.substr(i, 1)));
    }
    if (cps.size() <= Vocab::kMaxWordChars) words.emplace_back(std::move(cps), c);
  }
  const size_t minimum = Vocab::kNumSpecials + alphabet.size();
  if (vocab_size <= minimum) {
    throw std::invalid_argument("vocab_size " + std::to_string(vocab_size) +
                                " too small: specials plus alphabet need " + std::to_string(minimum) +
                                ", so vocab_size must be at least " + std::to_string(minimum + 1));
  }

  std::vector<std::string> vocab(Vocab::kSpecialTokens.begin(), Vocab::kSpecialTokens.end());
  vocab.insert(vocab.end(), alphabet.begin(), alphabet.end());
  std::set<std::string> in_vocab(vocab.begin(), vocab.end());

  // Working symbol table (alphabet plus every merge product).
  std::vector<std::string> symbols;
  std::unordered_map<std::string, uint32_t> symbol_id;
  auto intern = [&](const std::string& s) {
    auto [it, fresh] = symbol_id.emplace(s, static_cast<uint32_t>(symbols.size()));
    if (fresh) symbols.push_back(s);
    return it->second;
  };

  struct Word {
    std::vector<uint32_t> syms;
    uint64_t count;
  };
  std::vector<Word> segs;
  for (const auto& [cps, c] : words) {
    if (c < min_freq) continue;
    Word w{{}, c};
    for (size_t i = 0; i < cps.size(); ++i) {
      std::string piece = i == 0 ? std::string() : std::string(Vocab::kContinuation);
      w.syms.push_back(intern(piece + utf8::encode(cps.substr(i, 1))));
    }
    segs.push_back(std::move(w));
  }

  std::vector<uint64_t> sym_freq(symbols.size(), 0);
  std::unordered_map<uint64_t, detail::PairStat> pairs;
  auto account = [&](uint32_t wi, int sign) {
    const Word& w = segs[wi];
    for (size_t i = 0; i < w.syms.size(); ++i) {
      if (w.syms[i] >= sym_freq.size()) sym_freq.resize(w.syms[i] + 1, 0);
      if (sign > 0) sym_freq[w.syms[i]] += w.count;
      else sym_freq[w.syms[i]] -= w.count;
      if (i + 1 < w.syms.size()) {
        auto key = detail::pair_key(w.syms[i], w.syms[i + 1]);
        auto& st = pairs[key];
        if (sign > 0) {
          st.count += w.count;
          st.words.insert(wi);
        } else {
          // Word sets may keep stale members; re-merging those is a no-op.
          st.count -= w.count;
          if (st.count == 0) pairs.erase(key);
        }
      }
    }
  };
  for (uint32_t wi = 0; wi < segs.size(); ++wi) account(wi, +1);

  auto merged_string = [&](uint32_t l, uint32_t r) {
    std::string_view rs = symbols[r];
    if (rs.starts_with(Vocab::kContinuation)) rs.remove_prefix(Vocab::kContinuation.size());
    return symbols[l] + std::string(rs);
  };

  while (vocab.size() < vocab_size) {
    if (pairs.empty()) {
      warn("wordpiece training exhausted all merges at " + std::to_string(vocab.size()) +
           " pieces (requested " + std::to_string(vocab_size) + ")");
      break;
    }
    // score(a) > score(b)  <=>  fa * lb * rb > fb * la * ra
    const detail::PairStat* best = nullptr;
    uint64_t best_key = 0;
    std::string best_str;
    for (const auto& [key, st] : pairs) {
      const auto l = static_cast<uint32_t>(key >> 32);
      const auto r = static_cast<uint32_t>(key & 0xffffffffu);
      if (best != nullptr) {
        const auto bl = static_cast<uint32_t>(best_key >> 32);
        const auto br = static_cast<uint32_t>(best_key & 0xffffffffu);
        const unsigned __int128 lhs =
            static_cast<unsigned __int128>(st.count) * sym_freq[bl] * sym_freq[br];
        const unsigned __int128 rhs =
            static_cast<unsigned __int128>(best->count) * sym_freq[l] * sym_freq[r];
        if (lhs < rhs) continue;
        if (lhs == rhs) {
          std::string s = merged_string(l, r);
          if (s > best_str || (s == best_str && key > best_key)) continue;
          best_str = std::move(s);
          best = &st;
          best_key = key;
          continue;
        }
      }
      best = &st;
      best_key = key;
      best_str = merged_string(l, r);
    }
    const auto l = static_cast<uint32_t>(best_key >> 32);
    const auto r = static_cast<uint32_t>(best_key & 0xffffffffu);
    const uint32_t m = intern(best_str);
    if (in_vocab.insert(best_str).second) vocab.push_back(best_str);

    const std::set<uint32_t> affected = best->words;
    for (uint32_t wi : affected) {
      account(wi, -1);
      auto& syms = segs[wi].syms;
      std::vector<uint32_t> next;
      next.reserve(syms.size());
      for (size_t i = 0; i < syms.size(); ++i) {
        if (i + 1 < syms.size() && syms[i] == l && syms[i + 1] == r) {
          next.push_back(m);
          ++i;
        } else {
          next.push_back(syms[i]);
        }
      }
      syms = std::move(next);
      account(wi, +1);
    }
  }
  return Vocab(std::move(vocab));
}

}  // namespace kubert
