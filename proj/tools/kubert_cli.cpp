// kubert: command-line front end for the sentiment pipeline.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "kubert/kubert.hpp"

namespace fs = std::filesystem;
using namespace kubert;

namespace {

struct Args {
  std::string config;
  std::string in, out, rules, vocab, corpus, model, data, encoder, text, resume;
  std::string train_out, test_out, task;
  std::optional<double> ratio;
  std::optional<uint64_t> seed;
  std::optional<size_t> vocab_size, min_freq, iterations, epochs;
  std::optional<double> learning_rate;
  bool table = false;
};

PipelineConfig load_config(const Args& a) {
  return a.config.empty() ? PipelineConfig::from_json(nlohmann::json::object()) : PipelineConfig::load(a.config);
}

NormalizationRules load_rules(const Args& a, const PipelineConfig& cfg) {
  if (!a.rules.empty()) return NormalizationRules::load(a.rules);
  if (cfg.rules_path) return NormalizationRules::load(*cfg.rules_path);
  return NormalizationRules::defaults();
}

// Flag wins over the config's paths section.
std::string require(const std::string& flag_value, const PipelineConfig& cfg, const std::string& key,
                    const std::string& flag) {
  if (!flag_value.empty()) return flag_value;
  if (auto p = cfg.path(key)) return *p;
  throw std::invalid_argument("missing " + flag + " (or paths." + key + " in the config)");
}

void write_output(const std::string& path, const std::string& contents) {
  if (path.empty() || path == "-") {
    std::cout << contents;
  } else {
    io::write_file_atomic(path, contents);
  }
}

int cmd_normalize(const Args& a) {
  const auto cfg = load_config(a);
  const auto rules = load_rules(a, cfg);
  const auto lines = normalize_stream(io::read_lines(require(a.in, cfg, "corpus", "--in")), rules);
  write_output(a.out, io::join_lines(lines));
  return 0;
}

int cmd_corpus_stats(const Args& a) {
  const auto cfg = load_config(a);
  const auto rules = load_rules(a, cfg);
  const auto examples = load_labeled(require(a.in, cfg, "labeled", "--in"), rules);
  CorpusStats stats;
  if (!a.vocab.empty()) {
    const Vocab vocab = Vocab::load(a.vocab);
    stats = compute_stats(examples, [&](std::string_view s) { return tokenize(s, vocab).size(); });
  } else {
    stats = compute_stats(examples);
  }
  write_output(a.out, stats.to_json().dump(2) + "\n");
  return 0;
}

int cmd_split(const Args& a) {
  const auto cfg = load_config(a);
  const auto rules = load_rules(a, cfg);
  const auto examples = load_labeled(require(a.in, cfg, "labeled", "--in"), rules);
  const auto s = split(examples, a.ratio.value_or(0.8), a.seed.value_or(cfg.seed));
  io::write_file_atomic(a.train_out, format_labeled(s.train));
  io::write_file_atomic(a.test_out, format_labeled(s.test));
  std::cout << "train\t" << s.train.size() << "\ntest\t" << s.test.size() << "\n";
  return 0;
}

int cmd_to_binary(const Args& a) {
  const auto cfg = load_config(a);
  const auto examples = load_labeled(require(a.in, cfg, "labeled", "--in"), load_rules(a, cfg));
  write_output(a.out, format_labeled(to_binary(examples)));
  return 0;
}

int cmd_undersample(const Args& a) {
  const auto cfg = load_config(a);
  const auto examples = load_labeled(require(a.in, cfg, "labeled", "--in"), load_rules(a, cfg));
  write_output(a.out, format_labeled(undersample(examples, a.seed.value_or(cfg.seed))));
  return 0;
}

int cmd_train_tokenizer(const Args& a) {
  const auto cfg = load_config(a);
  const auto lines = io::read_lines(require(a.in, cfg, "corpus", "--in"));
  const Vocab vocab = train_wordpiece(lines, a.vocab_size.value_or(cfg.vocab_size), a.min_freq.value_or(cfg.min_freq));
  vocab.save(require(a.out, cfg, "vocab", "--out"));
  std::cout << "pieces\t" << vocab.size() << "\n";
  return 0;
}

int cmd_pretrain(const Args& a) {
  auto cfg = load_config(a);
  if (!cfg.bert) throw std::invalid_argument("config has no 'bert' section");
  BertConfig bc = *cfg.bert;
  if (a.iterations) bc.iterations = *a.iterations;
  if (a.epochs) bc.epochs = *a.epochs;
  if (a.learning_rate) bc.learning_rate = *a.learning_rate;
  bc.validate();
  const uint64_t seed = a.seed.value_or(cfg.seed);
  const auto corpus = io::read_lines(require(a.corpus, cfg, "corpus", "--corpus"));
  const Vocab vocab = Vocab::load(require(a.vocab, cfg, "vocab", "--vocab"));
  PretrainOptions opt;
  opt.seed = seed;
  opt.checkpoint_dir = require(a.out, cfg, "checkpoint_dir", "--out");
  if (!a.resume.empty()) opt.resume_from = a.resume;
  opt.on_step = [](const StepLog& s) {
    if (s.step % 100 == 0) std::fprintf(stderr, "step %llu\tloss %.4f\n", static_cast<unsigned long long>(s.step), s.loss);
  };
  BertModel<float> model = build_model<float>(bc, derive_seed(seed, 0));
  const auto result = pretrain(model, corpus, vocab, opt);
  std::cout << "steps\t" << (result.steps.empty() ? 0 : result.steps.back().step) << "\nepochs\t"
            << result.epochs_completed << "\ncheckpoint\t" << result.final_checkpoint.string() << "\n";
  return 0;
}

int cmd_train(const Args& a) {
  auto cfg = load_config(a);
  const HeadKind kind = parse_head_kind(a.task);
  TrainConfig tc = cfg.train;
  if (a.epochs) tc.epochs = *a.epochs;
  if (a.learning_rate) tc.learning_rate = *a.learning_rate;
  if (a.seed) tc.seed = *a.seed;
  const auto rules = load_rules(a, cfg);
  const auto data = load_labeled(require(a.data, cfg, "labeled", "--data"), rules);
  const fs::path encoder_dir = require(a.encoder, cfg, "encoder", "--encoder");
  const BertModel<float> encoder = load_checkpoint<float>(encoder_dir);
  const Vocab vocab = Vocab::load(a.vocab.empty() ? (cfg.path("vocab") ? fs::path(*cfg.path("vocab"))
                                                                        : encoder_dir / "vocab.txt")
                                                  : fs::path(a.vocab));
  tc.max_len = std::min(tc.max_len, encoder.config.max_position);
  auto model = train_classifier(kind, encoder, vocab, rules, data, tc, [](const EpochLog& e) {
    std::fprintf(stderr, "epoch %zu\tloss %.6f\n", e.epoch + 1, e.mean_loss);
  });
  save_sentiment_model(require(a.out, cfg, "model_dir", "--out"), model);
  return 0;
}

int cmd_evaluate(const Args& a) {
  auto cfg = load_config(a);
  auto model = load_sentiment_model(require(a.model, cfg, "model_dir", "--model"));
  const auto data = load_labeled(require(a.data, cfg, "labeled", "--data"), model.rules);
  const EvalReport rep = report(evaluate(model, data));
  write_output(a.out, a.table ? rep.to_table() : rep.to_json().dump(2) + "\n");
  return 0;
}

int cmd_predict(const Args& a) {
  auto model = load_sentiment_model(a.model);
  const Prediction p = model.predict(a.text);
  std::string line(to_string(p.label));
  for (double prob : p.probabilities) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "\t%.6f", prob);
    line += buf;
  }
  std::cout << line << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"kubert: text normalization, WordPiece, BERT pretraining and sentiment heads"};
  app.require_subcommand(1);
  app.set_version_flag("--version", std::string("kubert ") + std::string(kVersion) + " (checkpoint format " +
                                        std::to_string(kCheckpointFormatVersion) + ", rules format " +
                                        std::to_string(kRulesFormatVersion) + ")");
  Args a;
  auto with_config = [&](CLI::App* sub) {
    sub->add_option("--config", a.config, "pipeline config (JSON)")->check(CLI::ExistingFile);
  };
  auto with_rules = [&](CLI::App* sub) {
    sub->add_option("--rules", a.rules, "normalization rules file")->check(CLI::ExistingFile);
  };

  auto* normalize = app.add_subcommand("normalize", "normalize a raw text file, one line per sentence");
  with_config(normalize);
  with_rules(normalize);
  normalize->add_option("--in", a.in, "input text");
  normalize->add_option("--out", a.out, "output file (stdout if omitted)");

  auto* stats = app.add_subcommand("corpus-stats", "sentence-length statistics of a labeled TSV");
  with_config(stats);
  with_rules(stats);
  stats->add_option("--in", a.in, "labeled TSV");
  stats->add_option("--vocab", a.vocab, "count WordPiece tokens instead of whitespace tokens");
  stats->add_option("--out", a.out, "output JSON (stdout if omitted)");

  auto* split_cmd = app.add_subcommand("split", "stratified train/test split");
  with_config(split_cmd);
  with_rules(split_cmd);
  split_cmd->add_option("--in", a.in, "labeled TSV");
  split_cmd->add_option("--train-out", a.train_out, "train TSV")->required();
  split_cmd->add_option("--test-out", a.test_out, "test TSV")->required();
  split_cmd->add_option("--ratio", a.ratio, "train fraction (default 0.8)");
  split_cmd->add_option("--seed", a.seed, "shuffle seed (default: config seed, 42)");

  auto* binary = app.add_subcommand("to-binary", "drop neutral examples");
  with_config(binary);
  with_rules(binary);
  binary->add_option("--in", a.in, "labeled TSV");
  binary->add_option("--out", a.out, "output TSV (stdout if omitted)");

  auto* under = app.add_subcommand("undersample", "reduce every class to the minority count");
  with_config(under);
  with_rules(under);
  under->add_option("--in", a.in, "labeled TSV");
  under->add_option("--out", a.out, "output TSV (stdout if omitted)");
  under->add_option("--seed", a.seed, "deletion seed (default: config seed, 42)");

  auto* tok = app.add_subcommand("train-tokenizer", "learn a WordPiece vocabulary from normalized text");
  with_config(tok);
  tok->add_option("--in", a.in, "normalized corpus");
  tok->add_option("--out", a.out, "vocab.txt to write");
  tok->add_option("--vocab-size", a.vocab_size, "target vocabulary size");
  tok->add_option("--min-freq", a.min_freq, "minimum word frequency");

  auto* pre = app.add_subcommand("pretrain", "masked-language-model pretraining");
  with_config(pre);
  pre->add_option("--corpus", a.corpus, "normalized corpus");
  pre->add_option("--vocab", a.vocab, "vocab.txt");
  pre->add_option("--out", a.out, "checkpoint directory");
  pre->add_option("--iterations", a.iterations, "override the step cap");
  pre->add_option("--epochs", a.epochs, "override the epoch count");
  pre->add_option("--learning-rate", a.learning_rate, "override the learning rate");
  pre->add_option("--seed", a.seed, "override the config seed");
  pre->add_option("--resume", a.resume, "resume from an epoch-N checkpoint")->check(CLI::ExistingDirectory);

  auto* train = app.add_subcommand("train", "train a sentiment head on a pretrained encoder");
  with_config(train);
  with_rules(train);
  train->add_option("--task", a.task, "finetune, bilstm or mlp")->required();
  train->add_option("--encoder", a.encoder, "encoder checkpoint directory");
  train->add_option("--vocab", a.vocab, "vocab.txt (default: paths.vocab, then <encoder>/vocab.txt)");
  train->add_option("--data", a.data, "labeled training TSV");
  train->add_option("--out", a.out, "model directory");
  train->add_option("--epochs", a.epochs, "override the epoch count");
  train->add_option("--learning-rate", a.learning_rate, "override the learning rate");
  train->add_option("--seed", a.seed, "override the training seed");

  auto* eval = app.add_subcommand("evaluate", "confusion-matrix metrics on a labeled TSV");
  with_config(eval);
  eval->add_option("--model", a.model, "model directory");
  eval->add_option("--data", a.data, "labeled TSV");
  eval->add_option("--out", a.out, "report file (stdout if omitted)");
  eval->add_flag("--table", a.table, "plain-text table instead of JSON");

  auto* predict = app.add_subcommand("predict", "classify one sentence");
  predict->add_option("--model", a.model, "model directory")->required()->check(CLI::ExistingDirectory);
  predict->add_option("--text", a.text, "input text")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }
  try {
    if (*normalize) return cmd_normalize(a);
    if (*stats) return cmd_corpus_stats(a);
    if (*split_cmd) return cmd_split(a);
    if (*binary) return cmd_to_binary(a);
    if (*under) return cmd_undersample(a);
    if (*tok) return cmd_train_tokenizer(a);
    if (*pre) return cmd_pretrain(a);
    if (*train) return cmd_train(a);
    if (*eval) return cmd_evaluate(a);
    if (*predict) return cmd_predict(a);
  } catch (const std::exception& e) {
    std::string msg = e.what();
    for (char& c : msg)
      if (c == '\n') c = ' ';
    std::cerr << "error: " << msg << "\n";
    return 1;
  }
  return 1;
}
