// Acceptance runner: one PASS/FAIL line per criterion, non-zero exit if any
// criterion fails.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <functional>
#include <map>
#include <set>
#include <sstream>
#include <string>

#include "grad_cases.hpp"
#include "kubert/kubert.hpp"
#include "oracles.hpp"
#include "support.hpp"

using namespace kubert;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof(buf), f, args...);
  return buf;
}

bool same_values(nn::ParameterSet<float>& a, nn::ParameterSet<float>& b) {
  if (a.size() != b.size()) return false;
  for (size_t i = 0; i < a.size(); ++i) {
    const auto& x = a[i].value;
    const auto& y = b[i].value;
    if (a[i].name != b[i].name || x.shape() != y.shape()) return false;
    if (std::memcmp(x.data(), y.data(), x.size() * sizeof(float)) != 0) return false;
  }
  return true;
}

Outcome gradient_checks() {
  const auto t0 = std::chrono::steady_clock::now();
  size_t failed = 0, cases = 0;
  double worst = 0;
  std::string worst_name, failures;
  for (const auto& c : fixtures::grad_cases()) {
    const auto r = c.run();
    ++cases;
    if (!r.passed) {
      ++failed;
      failures += " " + c.name;
    }
    if (r.max_rel_error > worst) {
      worst = r.max_rel_error;
      worst_name = c.name + ":" + r.worst;
    }
  }
  const double secs = seconds_since(t0);
  Outcome o;
  o.pass = failed == 0 && secs < 120.0;
  o.detail = fmt("%zu cases, %zu failed%s, max rel err %.2e (%s), %.1f s (limit 120 s)", cases, failed,
                 failures.c_str(), worst, worst_name.c_str(), secs);
  return o;
}

Outcome tokenizer_oracle() {
  Rng rng(1000);
  const std::u32string alphabet = U"abcdeیکەر";
  size_t mismatches = 0;
  for (int trial = 0; trial < 1000; ++trial) {
    std::set<std::string> pieces;
    const size_t n = 1 + rng.index(200 - Vocab::kNumSpecials);
    while (pieces.size() < n) {
      std::u32string p;
      const size_t len = 1 + rng.index(5);
      for (size_t k = 0; k < len; ++k) p += alphabet[rng.index(alphabet.size())];
      pieces.insert((rng.uniform() < 0.5 ? "##" : "") + utf8::encode(p));
    }
    const Vocab v = fixtures::word_vocab({pieces.begin(), pieces.end()});
    std::u32string word;
    const size_t wl = 1 + rng.index(20);
    for (size_t k = 0; k < wl; ++k) word += alphabet[rng.index(alphabet.size())];
    if (tokenize_word(word, v) != fixtures::oracle_word(word, v)) ++mismatches;
  }

  // Every single character is present in both positions, so any text over
  // the alphabet is fully covered.
  std::vector<std::string> covered;
  for (char32_t c : alphabet) {
    covered.push_back(utf8::encode(std::u32string(1, c)));
    covered.push_back("##" + utf8::encode(std::u32string(1, c)));
  }
  covered.push_back("ab");
  covered.push_back("##cde");
  const Vocab cv = fixtures::word_vocab(covered);
  size_t roundtrip_failures = 0;
  for (int trial = 0; trial < 1000; ++trial) {
    std::string text;
    const size_t words = 1 + rng.index(4);
    for (size_t w = 0; w < words; ++w) {
      std::u32string word;
      const size_t wl = 1 + rng.index(5);
      for (size_t k = 0; k < wl; ++k) word += alphabet[rng.index(alphabet.size())];
      text += (w ? " " : "") + utf8::encode(word);
    }
    if (decode(encode(text, cv, 64).ids, cv) != text) ++roundtrip_failures;
  }
  Outcome o;
  o.pass = mismatches == 0 && roundtrip_failures == 0;
  o.detail = fmt("1000 oracle trials, %zu mismatches; 1000 round trips, %zu failures", mismatches, roundtrip_failures);
  return o;
}

Outcome normalizer_properties() {
  const auto rules = NormalizationRules::defaults();
  auto norm = [&](std::string_view s) { return normalize_text(s, rules).text; };
  Rng rng(10000);
  size_t not_idempotent = 0, survivors = 0;
  for (int i = 0; i < 10000; ++i) {
    const std::string once = norm(fixtures::fuzz_text(rng));
    if (norm(once) != once) ++not_idempotent;
    for (char32_t cp : utf8::decode(once)) survivors += rules.strip_set.count(cp);
  }
  size_t mapping_failures = 0;
  mapping_failures += norm(utf8::encode(U"ك")) != utf8::encode(U"ک");
  mapping_failures += norm(utf8::encode(U"ي")) != utf8::encode(U"ی");
  for (char32_t d = 0; d < 10; ++d) {
    const std::string ascii(1, static_cast<char>('0' + d));
    mapping_failures += norm(utf8::encode(std::u32string(1, 0x0660 + d))) != ascii;
    mapping_failures += norm(utf8::encode(std::u32string(1, 0x06F0 + d))) != ascii;
  }
  Outcome o;
  o.pass = not_idempotent == 0 && survivors == 0 && mapping_failures == 0;
  o.detail = fmt("10000 fuzz lines: %zu not idempotent, %zu strip-set survivors; %zu mapping failures of 22",
                 not_idempotent, survivors, mapping_failures);
  return o;
}

Outcome masking_statistics() {
  const MaskingCounts c = fixtures::masking_tally(12000, 0.15, 3);
  const double sel = double(c.selected);
  const double rate = sel / double(c.eligible);
  const double m = double(c.to_mask) / sel, r = double(c.to_random) / sel, u = double(c.unchanged) / sel;
  Outcome o;
  o.pass = c.eligible >= 100000 && std::abs(rate - 0.15) <= 0.01 && std::abs(m - 0.8) <= 0.02 &&
           std::abs(r - 0.1) <= 0.02 && std::abs(u - 0.1) <= 0.02;
  o.detail = fmt("%zu eligible, selected %.4f (0.15 +/- 0.01), mask/random/keep %.4f/%.4f/%.4f (+/- 0.02)",
                 c.eligible, rate, m, r, u);
  return o;
}

Outcome desk_pretraining() {
  const auto t0 = std::chrono::steady_clock::now();
  const Vocab vocab = fixtures::word_vocab(fixtures::word_list(200));
  BertModel<float> model = build_model<float>(fixtures::desk_config(vocab.size()), 42);
  PretrainOptions opt;
  opt.seed = 42;
  const auto r = pretrain(model, fixtures::desk_corpus(), vocab, opt);
  const double secs = seconds_since(t0);
  if (r.steps.size() < 100) return {false, fmt("only %zu steps", r.steps.size())};
  double first = 0, last = 0;
  size_t n_last = 0;
  for (size_t i = 0; i < 100; ++i) first += r.steps[i].loss;
  first /= 100;
  const size_t final_epoch = r.steps.back().epoch;
  for (const auto& s : r.steps) {
    if (s.epoch == final_epoch) {
      last += s.loss;
      ++n_last;
    }
  }
  last /= double(n_last);
  Outcome o;
  o.pass = final_epoch < 5 && last <= 0.5 * first && secs < 600.0;
  o.detail = fmt("first-100 mean %.4f, epoch-%zu mean %.4f, ratio %.3f (limit 0.5), %zu steps, %.1f s (limit 600 s)",
                 first, final_epoch + 1, last, last / first, r.steps.size(), secs);
  return o;
}

Outcome overfit_gates() {
  const Vocab vocab = fixtures::word_vocab(fixtures::word_list(40));
  BertModel<float> encoder = fixtures::classifier_encoder(vocab, 40);
  BertModel<float> snapshot = clone_model<float>(encoder);
  const auto data = fixtures::synthetic_labeled(64, 40, 9);
  const auto rules = NormalizationRules::defaults();
  auto accuracy = [&](SentimentModel& m) {
    const auto cm = evaluate(m, data);
    return double(cm.trace()) / double(cm.total());
  };
  auto ft = train_classifier(HeadKind::kFinetune, encoder, vocab, rules, data, fixtures::overfit_config(50));
  auto mlp = train_classifier(HeadKind::kMlp, encoder, vocab, rules, data, fixtures::overfit_config(100));
  auto lstm = train_classifier(HeadKind::kBilstm, encoder, vocab, rules, data, fixtures::overfit_config(100));
  const double a_ft = accuracy(ft), a_mlp = accuracy(mlp), a_lstm = accuracy(lstm);
  const bool frozen = same_values(mlp.encoder.params, snapshot.params) &&
                      same_values(lstm.encoder.params, snapshot.params) &&
                      same_values(encoder.params, snapshot.params);
  Outcome o;
  o.pass = a_ft >= 0.95 && a_mlp >= 0.95 && a_lstm >= 0.90 && frozen;
  o.detail = fmt("train accuracy finetune %.3f (>= 0.95, 50 epochs), mlp %.3f (>= 0.95, 100 epochs), bilstm %.3f "
                 "(>= 0.90, 100 epochs); encoder bit-frozen for mlp/bilstm: %s",
                 a_ft, a_mlp, a_lstm, frozen ? "yes" : "no");
  return o;
}

Outcome metrics_checks() {
  const std::vector<std::string> labels = {"positive", "negative", "neutral"};
  Rng rng(7);
  std::vector<std::string> truths, preds;
  for (int i = 0; i < 1000; ++i) {
    truths.push_back(labels[rng.index(3)]);
    preds.push_back(rng.uniform() < 0.5 ? truths.back() : labels[rng.index(3)]);
  }
  const auto rep = report(confusion(truths, preds, labels));
  const auto want = fixtures::oracle_scores(truths, preds, labels);
  double diff = std::abs(rep.accuracy - want.accuracy) + std::abs(rep.weighted_f1 - want.weighted_f1);
  for (const auto& c : rep.per_class) {
    const auto& w = want.per_class.at(c.label);
    diff = std::max({diff, std::abs(c.precision - w.precision), std::abs(c.recall - w.recall), std::abs(c.f1 - w.f1)});
    if (c.support != w.support) diff = 1;
  }
  const double micro_gap = std::abs(rep.micro_f1 - rep.accuracy);

  // Binary example: TP=40, FP=10, FN=20, TN=30 with positive as the class of interest.
  std::vector<std::string> bt, bp;
  auto push = [&](int n, const char* t, const char* p) {
    for (int i = 0; i < n; ++i) {
      bt.emplace_back(t);
      bp.emplace_back(p);
    }
  };
  push(40, "positive", "positive");
  push(10, "negative", "positive");
  push(20, "positive", "negative");
  push(30, "negative", "negative");
  const auto brep = report(confusion(bt, bp, {"positive", "negative"}));
  const auto& pos = brep.per_class[0];
  const bool worked = brep.accuracy == 0.7 && pos.precision == 0.8 && pos.recall == 40.0 / 60.0 &&
                      std::abs(pos.f1 - 8.0 / 11.0) < 1e-15 && std::abs(pos.recall - 0.6667) < 5e-5 &&
                      std::abs(pos.f1 - 0.7273) < 5e-5;
  Outcome o;
  o.pass = diff <= 1e-12 && micro_gap <= 1e-12 && worked;
  o.detail = fmt("max deviation from recount %.1e; |micro_f1 - accuracy| %.1e; worked example %.4f/%.4f/%.4f/%.4f",
                 diff, micro_gap, brep.accuracy, pos.precision, pos.recall, pos.f1);
  return o;
}

Outcome configuration_fidelity() {
  const fs::path dir = KUBERT_CONFIG_DIR;
  const auto corpus = fixtures::markov_corpus(200, 300, 8);
  const Vocab vocab = train_wordpiece(corpus, 1000, 1);
  std::string detail;
  bool ok = true;
  for (const char* name : {"model1.json", "model2.json", "model3.json", "model4.json"}) {
    const auto cfg = PipelineConfig::load(dir / name);
    if (!cfg.bert) return {false, std::string(name) + " has no bert section"};
    BertConfig bc = *cfg.bert;
    bc.iterations = 10;
    size_t enumerated = 0;
    {
      const auto m = allocate_model<float>(bc);
      for (const auto& p : m.params) enumerated += p->value.size();
    }
    BertModel<float> model = build_model<float>(bc, derive_seed(cfg.seed, 0));
    PretrainOptions opt;
    opt.seed = cfg.seed;
    const auto r = pretrain(model, corpus, vocab, opt);
    bool finite = true;
    for (const auto& s : r.steps) finite = finite && std::isfinite(s.loss);
    const bool pass = count_params(bc) == enumerated && r.steps.size() == 10 && finite;
    ok = ok && pass;
    detail += fmt("%s H=%zu %zu params %s, %zu steps; ", name, bc.hidden_size, count_params(bc),
                  count_params(bc) == enumerated ? "ok" : "MISMATCH", r.steps.size());
  }
  // 3-class to 2-class path on a skewed labeled set.
  auto data = fixtures::synthetic_labeled(90, 40, 4);
  std::vector<LabeledExample> skewed;
  size_t seen_neg = 0;
  for (const auto& ex : data) {
    if (ex.label == SentimentLabel::kNegative && seen_neg++ >= 12) continue;
    skewed.push_back(ex);
  }
  const auto balanced = undersample(to_binary(skewed), 42);
  std::map<SentimentLabel, size_t> counts;
  for (const auto& ex : balanced) ++counts[ex.label];
  const bool binary_ok = counts.size() == 2 && counts.begin()->second == counts.rbegin()->second;
  ok = ok && binary_ok;
  detail += fmt("binary path: %zu classes, counts %zu/%zu", counts.size(), counts.empty() ? 0 : counts.begin()->second,
                counts.empty() ? 0 : counts.rbegin()->second);
  return {ok, detail};
}

// Normalize, tokenizer, pretrain, split, fine-tune, evaluate; every artifact
// lands under `dir`.
void desk_run(const fs::path& dir) {
  const auto rules = NormalizationRules::defaults();
  std::vector<std::string> raw;
  for (const auto& ex : fixtures::synthetic_labeled(300, 40, 99)) raw.push_back(ex.text.text + " كـ");
  const auto corpus = normalize_stream(raw, rules);
  io::write_file_atomic(dir / "corpus.txt", io::join_lines(corpus));
  const Vocab vocab = train_wordpiece(corpus, 200, 1);
  vocab.save(dir / "vocab.txt");
  BertConfig bc = fixtures::tiny_config(200);
  bc.hidden_size = 32;
  bc.num_attention_heads = 2;
  bc.num_hidden_layers = 1;
  bc.epochs = 2;
  bc.batch_size = 8;
  bc.learning_rate = 1e-3;
  BertModel<float> encoder = build_model<float>(bc, derive_seed(42, 0));
  PretrainOptions opt;
  opt.checkpoint_dir = dir / "pretrain";
  pretrain(encoder, corpus, vocab, opt);
  const auto s = split(fixtures::synthetic_labeled(80, 40, 9), 0.8, 42);
  io::write_file_atomic(dir / "train.tsv", format_labeled(s.train));
  io::write_file_atomic(dir / "test.tsv", format_labeled(s.test));
  auto loaded = load_checkpoint<float>(dir / "pretrain" / "final");
  auto model = train_classifier(HeadKind::kFinetune, loaded, vocab, rules, s.train, fixtures::overfit_config(3));
  save_sentiment_model(dir / "model", model);
  auto reloaded = load_sentiment_model(dir / "model");
  io::write_file_atomic(dir / "report.json", report(evaluate(reloaded, s.test)).to_json().dump(2) + "\n");
}

std::map<std::string, std::string> tree_contents(const fs::path& root) {
  std::map<std::string, std::string> out;
  for (const auto& e : fs::recursive_directory_iterator(root)) {
    if (e.is_regular_file()) out[fs::relative(e.path(), root).string()] = io::read_file(e.path());
  }
  return out;
}

Outcome determinism() {
  const fs::path a = fixtures::scratch_dir("acceptance-run-a"), b = fixtures::scratch_dir("acceptance-run-b");
  desk_run(a);
  desk_run(b);
  const auto ta = tree_contents(a), tb = tree_contents(b);
  size_t differing = 0;
  for (const auto& [name, bytes] : ta) {
    auto it = tb.find(name);
    if (it == tb.end() || it->second != bytes) ++differing;
  }
  differing += tb.size() > ta.size() ? tb.size() - ta.size() : 0;
  Outcome o;
  o.pass = differing == 0 && ta.count("report.json") && ta.count("pretrain/final/params.bin") &&
           ta.count("model/params.bin");
  o.detail = fmt("%zu files compared, %zu differ", ta.size(), differing);
  return o;
}

}  // namespace

int main() {
  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria = {
      {"gradient-check suite", gradient_checks},
      {"tokenizer oracle", tokenizer_oracle},
      {"normalizer properties", normalizer_properties},
      {"masking statistics", masking_statistics},
      {"desk pretraining", desk_pretraining},
      {"overfit gates", overfit_gates},
      {"metrics", metrics_checks},
      {"configuration fidelity", configuration_fidelity},
      {"determinism", determinism},
  };
  std::vector<std::string> warnings;
  warning_sink() = [&](std::string_view m) { warnings.emplace_back(m); };
  int failures = 0;
  for (size_t i = 0; i < criteria.size(); ++i) {
    Outcome o;
    const auto t0 = std::chrono::steady_clock::now();
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    failures += !o.pass;
    std::printf("%s %zu %s: %s [%.1f s]\n", o.pass ? "PASS" : "FAIL", i + 1, criteria[i].first.c_str(),
                o.detail.c_str(), seconds_since(t0));
    std::fflush(stdout);
  }
  return failures == 0 ? 0 : 1;
}
