#pragma once

// Labeled sentiment data: TSV ingest, dataset statistics, the stratified
// train/test split, 3-class -> 2-class conversion and under-sampling.

#include <algorithm>
#include <array>
#include <cmath>
#include <functional>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"
#include "kubert/io.hpp"
#include "kubert/normalizer.hpp"
#include "kubert/random.hpp"
#include "kubert/utf8.hpp"

namespace kubert {

enum class SentimentLabel { kPositive = 0, kNegative = 1, kNeutral = 2 };

inline constexpr std::array<SentimentLabel, 3> kAllLabels = {
    SentimentLabel::kPositive, SentimentLabel::kNegative, SentimentLabel::kNeutral};

inline std::string_view to_string(SentimentLabel l) {
  switch (l) {
    case SentimentLabel::kPositive:
      return "positive";
    case SentimentLabel::kNegative:
      return "negative";
    case SentimentLabel::kNeutral:
      return "neutral";
  }
  return "?";
}

inline std::optional<SentimentLabel> parse_label(std::string_view s) {
  for (auto l : kAllLabels) {
    if (s == to_string(l)) return l;
  }
  return std::nullopt;
}

struct LabeledExample {
  NormalizedText text;
  SentimentLabel label;
  std::optional<std::string> topic;
};

struct DatasetSplit {
  std::vector<LabeledExample> train;
  std::vector<LabeledExample> test;
  uint64_t seed = 0;
  double ratio = 0.8;
};

struct CorpusStats {
  size_t longest_sentence = 0;
  double mean_sentence_length = 0.0;
  size_t total_tokens = 0;
  std::map<SentimentLabel, size_t> per_class_counts;

  nlohmann::ordered_json to_json() const {
    nlohmann::ordered_json j;
    j["longest"] = longest_sentence;
    j["mean"] = mean_sentence_length;
    j["total_tokens"] = total_tokens;
    nlohmann::ordered_json pc = nlohmann::ordered_json::object();
    for (auto l : kAllLabels) {
      auto it = per_class_counts.find(l);
      pc[std::string(to_string(l))] = it == per_class_counts.end() ? 0 : it->second;
    }
    j["per_class"] = pc;
    return j;
  }
};

inline std::vector<LabeledExample> parse_labeled(const std::vector<std::string>& lines,
                                                 const NormalizationRules& rules) {
  std::vector<LabeledExample> out;
  for (size_t i = 0; i < lines.size(); ++i) {
    const std::string& line = lines[i];
    const std::string at = " at line " + std::to_string(i + 1);
    if (line.empty()) continue;
    if (!utf8::valid(line)) throw std::invalid_argument("invalid UTF-8" + at);
    std::vector<std::string> cols;
    size_t start = 0;
    while (true) {
      size_t tab = line.find('\t', start);
      cols.push_back(line.substr(start, tab == std::string::npos ? std::string::npos : tab - start));
      if (tab == std::string::npos) break;
      start = tab + 1;
    }
    if (cols.size() < 2 || cols.size() > 3) {
      throw std::invalid_argument("malformed row" + at + ": expected text<TAB>label[<TAB>topic]");
    }
    auto label = parse_label(cols[1]);
    if (!label) throw std::invalid_argument("unknown label '" + cols[1] + "'" + at);
    LabeledExample ex{normalize_text(cols[0], rules), *label, std::nullopt};
    if (ex.text.text.empty()) throw std::invalid_argument("empty text after normalization" + at);
    if (cols.size() == 3 && !cols[2].empty()) ex.topic = cols[2];
    out.push_back(std::move(ex));
  }
  return out;
}

inline std::vector<LabeledExample> load_labeled(const std::filesystem::path& path,
                                                const NormalizationRules& rules) {
  return parse_labeled(io::read_lines(path), rules);
}

// Writes the already-normalized text back out as TSV.
inline std::string format_labeled(const std::vector<LabeledExample>& examples) {
  std::string out;
  for (const auto& ex : examples) {
    out += ex.text.text;
    out += '\t';
    out += to_string(ex.label);
    if (ex.topic) {
      out += '\t';
      out += *ex.topic;
    }
    out += '\n';
  }
  return out;
}

using TokenCounter = std::function<size_t(std::string_view)>;

inline size_t whitespace_token_count(std::string_view s) { return utf8::split_words(s).size(); }

inline CorpusStats compute_stats(const std::vector<LabeledExample>& examples,
                                 const TokenCounter& count = whitespace_token_count) {
  CorpusStats stats;
  for (const auto& ex : examples) {
    const size_t n = count(ex.text.text);
    stats.total_tokens += n;
    stats.longest_sentence = std::max(stats.longest_sentence, n);
    ++stats.per_class_counts[ex.label];
  }
  if (!examples.empty()) {
    stats.mean_sentence_length =
        static_cast<double>(stats.total_tokens) / static_cast<double>(examples.size());
  }
  return stats;
}

namespace detail {

inline std::map<SentimentLabel, std::vector<size_t>> indices_by_label(
    const std::vector<LabeledExample>& examples) {
  std::map<SentimentLabel, std::vector<size_t>> by;
  for (size_t i = 0; i < examples.size(); ++i) by[examples[i].label].push_back(i);
  return by;
}

}  // namespace detail

// Stratified: each class contributes round(ratio * n_c) examples to train,
// clamped so both sides keep at least one.
inline DatasetSplit split(const std::vector<LabeledExample>& examples, double ratio, uint64_t seed) {
  if (!(ratio > 0.0 && ratio < 1.0)) {
    throw std::invalid_argument("split ratio must be in (0,1), got " + std::to_string(ratio));
  }
  if (examples.empty()) throw std::invalid_argument("cannot split an empty dataset");
  auto by = detail::indices_by_label(examples);
  for (const auto& [label, idx] : by) {
    if (idx.size() < 2) {
      throw std::invalid_argument("class '" + std::string(to_string(label)) + "' has " +
                                  std::to_string(idx.size()) +
                                  " example(s); at least 2 are needed to stratify");
    }
  }
  Rng rng(seed);
  std::vector<size_t> train_idx, test_idx;
  for (auto& [label, idx] : by) {
    rng.shuffle(idx);
    auto n_train = static_cast<size_t>(std::llround(ratio * static_cast<double>(idx.size())));
    n_train = std::clamp<size_t>(n_train, 1, idx.size() - 1);
    train_idx.insert(train_idx.end(), idx.begin(), idx.begin() + static_cast<long>(n_train));
    test_idx.insert(test_idx.end(), idx.begin() + static_cast<long>(n_train), idx.end());
  }
  rng.shuffle(train_idx);
  rng.shuffle(test_idx);
  DatasetSplit out;
  out.seed = seed;
  out.ratio = ratio;
  for (size_t i : train_idx) out.train.push_back(examples[i]);
  for (size_t i : test_idx) out.test.push_back(examples[i]);
  return out;
}

inline std::vector<LabeledExample> to_binary(const std::vector<LabeledExample>& examples) {
  std::vector<LabeledExample> out;
  std::copy_if(examples.begin(), examples.end(), std::back_inserter(out),
               [](const LabeledExample& e) { return e.label != SentimentLabel::kNeutral; });
  return out;
}

// Seeded random deletion down to the minority-class count; survivors keep
// their input order.
inline std::vector<LabeledExample> undersample(const std::vector<LabeledExample>& examples,
                                               uint64_t seed) {
  if (examples.empty()) throw std::invalid_argument("cannot undersample an empty dataset");
  auto by = detail::indices_by_label(examples);
  size_t minority = examples.size();
  for (const auto& [label, idx] : by) minority = std::min(minority, idx.size());
  Rng rng(seed);
  std::vector<bool> keep(examples.size(), false);
  for (auto& [label, idx] : by) {
    rng.shuffle(idx);
    for (size_t k = 0; k < minority; ++k) keep[idx[k]] = true;
  }
  std::vector<LabeledExample> out;
  for (size_t i = 0; i < examples.size(); ++i) {
    if (keep[i]) out.push_back(examples[i]);
  }
  return out;
}

}  // namespace kubert
