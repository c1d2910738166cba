#pragma once

// Synthetic data shared by the unit tests and the acceptance runner.

#include <filesystem>
#include <string>
#include <vector>

#include "kubert/kubert.hpp"

namespace kubert::fixtures {

// Pronounceable ASCII pseudo-words: "ba", "bad", "bada", ... distinct for
// every index.
inline std::string pseudo_word(size_t i) {
  static const char* kOnsets[] = {"b", "d", "k", "l", "m", "n", "r", "s", "t", "z"};
  static const char* kVowels[] = {"a", "e", "i", "o", "u"};
  std::string w;
  size_t n = i;
  do {
    w += kOnsets[n % 10];
    n /= 10;
    w += kVowels[n % 5];
    n /= 5;
  } while (n > 0);
  return w + "r";
}

inline std::vector<std::string> word_list(size_t n) {
  std::vector<std::string> out;
  for (size_t i = 0; i < n; ++i) out.push_back(pseudo_word(i));
  return out;
}

// Vocabulary of specials followed by whole words.
inline Vocab word_vocab(const std::vector<std::string>& words) {
  std::vector<std::string> pieces(Vocab::kSpecialTokens.begin(), Vocab::kSpecialTokens.end());
  pieces.insert(pieces.end(), words.begin(), words.end());
  return Vocab(pieces);
}

// Low-entropy first-order Markov text over `num_words` words: each word is
// followed by one of two fixed successors (80/20), so masked words are
// largely predictable from their neighbours.
inline std::vector<std::string> markov_corpus(size_t sentences, size_t num_words, uint64_t seed) {
  const auto words = word_list(num_words);
  Rng rng(seed);
  std::vector<std::array<size_t, 2>> succ(num_words);
  for (auto& s : succ) s = {rng.index(num_words), rng.index(num_words)};
  std::vector<std::string> out;
  for (size_t k = 0; k < sentences; ++k) {
    const size_t len = 6 + rng.index(7);
    size_t w = rng.index(num_words);
    std::string line = words[w];
    for (size_t t = 1; t < len; ++t) {
      w = succ[w][rng.uniform() < 0.8 ? 0 : 1];
      line += " " + words[w];
    }
    out.push_back(line);
  }
  return out;
}

// Topic text: each sentence picks one topic (a block of `topic_size`
// consecutive words) and walks through it, usually to the next word of the
// block and otherwise to a random word of the same block.
inline std::vector<std::string> topic_corpus(size_t sentences, size_t num_words, size_t topic_size, size_t min_len,
                                             uint64_t seed) {
  const auto words = word_list(num_words);
  Rng rng(seed);
  const size_t topics = num_words / topic_size;
  std::vector<std::string> out;
  for (size_t k = 0; k < sentences; ++k) {
    const size_t topic = rng.index(topics);
    const size_t len = min_len + rng.index(7);
    size_t i = rng.index(topic_size);
    std::string line;
    for (size_t t = 0; t < len; ++t) {
      if (t) line += ' ';
      line += words[topic * topic_size + i];
      i = rng.uniform() < 0.8 ? (i + 1) % topic_size : rng.index(topic_size);
    }
    out.push_back(line);
  }
  return out;
}

// The 1,000-sentence, 200-word corpus used for the pretraining loss gate.
inline std::vector<std::string> desk_corpus() { return topic_corpus(1000, 200, 5, 20, 1); }

// Random normalizer input, weighted toward the characters the default rules
// touch, with occasional arbitrary BMP code points.
inline std::string fuzz_text(Rng& rng) {
  static const std::vector<char32_t> kPool = {
      U'a',   U' ',   U'\t',  0x00A0, 0x0643, 0x064A, 0x0640, 0x200C, 0x200B, 0x064B, 0x064E, 0x0651, 0x0652, 0x0660,
      0x0669, 0x06F5, U'7',   0x0628, 0x0647, 0x06D5, 0x0627, 0x0306, 0x030A, U'A',   0xFEFF, 0x0001, 0x06A9};
  std::u32string s;
  const size_t len = rng.index(24);
  for (size_t k = 0; k < len; ++k) {
    if (rng.uniform() < 0.1) {
      char32_t cp;
      do {
        cp = static_cast<char32_t>(1 + rng.index(0xFFFD));
      } while (cp >= 0xD800 && cp <= 0xDFFF);
      s += cp;
    } else {
      s += kPool[rng.index(kPool.size())];
    }
  }
  return utf8::encode(s);
}

// 3-class set: every sentence mixes filler words with cue words of its class.
inline std::vector<LabeledExample> synthetic_labeled(size_t n, size_t num_words, uint64_t seed) {
  const auto words = word_list(num_words);
  Rng rng(seed);
  std::vector<LabeledExample> out;
  for (size_t i = 0; i < n; ++i) {
    const auto label = kAllLabels[i % 3];
    const size_t cue_base = static_cast<size_t>(label) * 4;  // words 0..11 are cues
    const size_t len = 4 + rng.index(5);
    std::string line;
    for (size_t t = 0; t < len; ++t) {
      const bool cue = t == 0 || rng.uniform() < 0.3;
      const size_t w = cue ? cue_base + rng.index(4) : 12 + rng.index(num_words - 12);
      if (!line.empty()) line += ' ';
      line += words[w];
    }
    out.push_back({normalize_text(line, NormalizationRules::defaults()), label, std::nullopt});
  }
  return out;
}

inline BertConfig tiny_config(size_t vocab_size) {
  BertConfig c;
  c.hidden_size = 64;
  c.num_hidden_layers = 2;
  c.num_attention_heads = 4;
  c.vocab_size = vocab_size;
  c.max_position = 64;
  c.max_len = 64;
  c.batch_size = 12;
  c.epochs = 1;
  return c;
}

// Masks `sentences` Markov sentences in batches of 50 and sums the counts.
inline MaskingCounts masking_tally(size_t sentences, double rate, uint64_t seed) {
  const Vocab vocab = word_vocab(word_list(200));
  const auto corpus = markov_corpus(sentences, 200, seed);
  MaskingCounts total;
  for (size_t start = 0; start < corpus.size(); start += 50) {
    std::vector<Encoding> enc;
    for (size_t i = start; i < std::min(corpus.size(), start + 50); ++i) enc.push_back(encode(corpus[i], vocab, 64));
    MaskingCounts c;
    mask_for_mlm(collate(std::span<const Encoding>(enc)), rate, derive_seed(seed, start), vocab.size(), &c);
    total.eligible += c.eligible;
    total.selected += c.selected;
    total.to_mask += c.to_mask;
    total.to_random += c.to_random;
    total.unchanged += c.unchanged;
  }
  return total;
}

// Tiny encoder settings for the pretraining loss gate.
inline BertConfig desk_config(size_t vocab_size) {
  BertConfig c = tiny_config(vocab_size);
  c.epochs = 5;
  c.batch_size = 4;
  c.learning_rate = 1e-3;
  return c;
}

// Tiny encoder pretrained on unlabeled text from the same generator as
// synthetic_labeled, so its CLS state carries sentence content.
inline BertModel<float> classifier_encoder(const Vocab& vocab, size_t num_words) {
  std::vector<std::string> lines;
  for (const auto& ex : synthetic_labeled(1000, num_words, 99)) lines.push_back(ex.text.text);
  BertConfig c = tiny_config(vocab.size());
  c.epochs = 20;
  c.batch_size = 4;
  c.learning_rate = 1e-3;
  BertModel<float> m = build_model<float>(c, 5);
  PretrainOptions opt;
  opt.seed = 5;
  pretrain(m, lines, vocab, opt);
  return m;
}

// Head training settings for the overfitting gates.
inline TrainConfig overfit_config(size_t epochs) {
  TrainConfig c;
  c.epochs = epochs;
  c.max_len = 32;
  c.learning_rate = 1e-3;
  c.dropout_rate = 0.1;
  c.batch_size = 8;
  c.seed = 3;
  c.lstm_hidden = 32;
  return c;
}

// Fresh scratch directory under the system temp dir.
inline std::filesystem::path scratch_dir(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / ("kubert-test-" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

}  // namespace kubert::fixtures
