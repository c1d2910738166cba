#pragma once

// Sentiment heads over a pretrained encoder:
//   finetune  dropout(CLS) -> linear, encoder trained jointly
//   mlp       CLS -> [linear+ReLU, dropout]... -> linear, encoder frozen
//   bilstm    token states -> stacked BiLSTM -> [fwd_last; bwd_first] -> dropout -> linear, encoder frozen

#include <algorithm>
#include <array>
#include <cmath>
#include <filesystem>
#include <functional>
#include <optional>
#include <set>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"
#include "kubert/bert.hpp"
#include "kubert/corpus.hpp"
#include "kubert/io.hpp"
#include "kubert/metrics.hpp"
#include "kubert/nn/adam.hpp"
#include "kubert/nn/ops.hpp"
#include "kubert/nn/tensor_io.hpp"
#include "kubert/normalizer.hpp"
#include "kubert/random.hpp"
#include "kubert/tokenizer.hpp"

namespace kubert {

enum class HeadKind { kFinetune, kBilstm, kMlp };

inline std::string to_string(HeadKind k) {
  switch (k) {
    case HeadKind::kFinetune: return "finetune";
    case HeadKind::kBilstm: return "bilstm";
    case HeadKind::kMlp: return "mlp";
  }
  return "?";
}

inline HeadKind parse_head_kind(std::string_view s) {
  if (s == "finetune") return HeadKind::kFinetune;
  if (s == "bilstm") return HeadKind::kBilstm;
  if (s == "mlp") return HeadKind::kMlp;
  throw std::invalid_argument("unknown task '" + std::string(s) + "' (expected finetune, bilstm or mlp)");
}

// Epoch counts used when TrainConfig::epochs is unset.
inline size_t default_epochs(HeadKind kind, size_t hidden_size) {
  switch (kind) {
    case HeadKind::kFinetune: return 3;
    case HeadKind::kMlp: return 4;
    case HeadKind::kBilstm: return hidden_size >= 768 ? 4 : 3;
  }
  return 3;
}

struct TrainConfig {
  std::optional<size_t> epochs;
  size_t max_len = 256;
  double learning_rate = 1e-5;
  double dropout_rate = 0.3;
  size_t batch_size = 8;
  uint64_t seed = 42;
  size_t num_classes = 3;
  size_t lstm_hidden = 128;
  size_t lstm_layers = 3;
  std::vector<size_t> mlp_hidden = {256, 64};

  void validate() const {
    if (epochs && *epochs == 0) throw std::invalid_argument("train config: epochs must be at least 1");
    if (max_len < 3) throw std::invalid_argument("train config: max_len must be at least 3");
    if (batch_size == 0) throw std::invalid_argument("train config: batch_size must be positive");
    if (num_classes != 2 && num_classes != 3) throw std::invalid_argument("train config: num_classes must be 2 or 3");
    if (!(learning_rate > 0.0)) throw std::invalid_argument("train config: learning_rate must be positive");
    if (!(dropout_rate >= 0.0 && dropout_rate < 1.0)) {
      throw std::invalid_argument("train config: dropout_rate must be in [0,1)");
    }
    if (lstm_hidden == 0 || lstm_layers == 0) throw std::invalid_argument("train config: lstm sizes must be positive");
    for (size_t h : mlp_hidden) {
      if (h == 0) throw std::invalid_argument("train config: mlp_hidden sizes must be positive");
    }
  }

  nlohmann::ordered_json to_json() const {
    nlohmann::ordered_json j;
    if (epochs) j["epochs"] = *epochs;
    j["max_len"] = max_len;
    j["learning_rate"] = learning_rate;
    j["dropout_rate"] = dropout_rate;
    j["batch_size"] = batch_size;
    j["seed"] = seed;
    j["num_classes"] = num_classes;
    j["lstm_hidden"] = lstm_hidden;
    j["lstm_layers"] = lstm_layers;
    j["mlp_hidden"] = mlp_hidden;
    return j;
  }

  static TrainConfig from_json(const nlohmann::json& j) {
    if (!j.is_object()) throw std::invalid_argument("train config must be a JSON object");
    static const std::set<std::string> kKnown = {"epochs",     "max_len",     "learning_rate", "dropout_rate",
                                                 "batch_size", "seed",        "num_classes",   "lstm_hidden",
                                                 "lstm_layers", "mlp_hidden"};
    for (const auto& [k, v] : j.items()) {
      if (!kKnown.count(k)) throw std::invalid_argument("train config: unknown key '" + k + "'");
    }
    TrainConfig c;
    try {
      if (j.contains("epochs") && !j.at("epochs").is_null()) c.epochs = j.at("epochs").get<size_t>();
      c.max_len = j.value("max_len", c.max_len);
      c.learning_rate = j.value("learning_rate", c.learning_rate);
      c.dropout_rate = j.value("dropout_rate", c.dropout_rate);
      c.batch_size = j.value("batch_size", c.batch_size);
      c.seed = j.value("seed", c.seed);
      c.num_classes = j.value("num_classes", c.num_classes);
      c.lstm_hidden = j.value("lstm_hidden", c.lstm_hidden);
      c.lstm_layers = j.value("lstm_layers", c.lstm_layers);
      c.mlp_hidden = j.value("mlp_hidden", c.mlp_hidden);
    } catch (const nlohmann::json::exception& e) {
      throw std::invalid_argument(std::string("train config: ") + e.what());
    }
    c.validate();
    return c;
  }
};

inline std::vector<SentimentLabel> label_set(size_t num_classes) {
  if (num_classes == 3) return {SentimentLabel::kPositive, SentimentLabel::kNegative, SentimentLabel::kNeutral};
  if (num_classes == 2) return {SentimentLabel::kPositive, SentimentLabel::kNegative};
  throw std::invalid_argument("num_classes must be 2 or 3");
}

inline std::vector<std::string> label_names(const std::vector<SentimentLabel>& labels) {
  std::vector<std::string> out;
  for (auto l : labels) out.emplace_back(to_string(l));
  return out;
}

namespace detail {

template <typename T>
nn::Parameter<T>& uniform_param(nn::ParameterSet<T>& ps, std::string name, nn::Shape shape, double bound, Rng* rng) {
  nn::Tensor<T> t(std::move(shape));
  if (rng) {
    for (auto& v : t.values()) v = static_cast<T>((2.0 * rng->uniform() - 1.0) * bound);
  }
  return ps.add(std::move(name), std::move(t));
}

template <typename T>
nn::Var<T> blend(nn::Graph<T>& g, const nn::Var<T>& fresh, const nn::Var<T>& old, const nn::Tensor<T>& keep) {
  nn::Tensor<T> inv = keep;
  for (auto& v : inv.values()) v = T(1) - v;
  return nn::add(nn::mul(fresh, g.constant(keep)), nn::mul(old, g.constant(std::move(inv))));
}

}  // namespace detail

// Linear classifier on the CLS state (fine-tuning head).
template <typename T>
struct LinearHead {
  nn::ParameterSet<T> params;
  nn::Parameter<T>* weight = nullptr;
  nn::Parameter<T>* bias = nullptr;

  static LinearHead create(size_t in, size_t classes, Rng* rng) {
    LinearHead h;
    nn::Tensor<T> w(nn::Shape{in, classes});
    if (rng) {
      for (auto& v : w.values()) v = static_cast<T>(rng->truncated_normal(0.02));
    }
    h.weight = &h.params.add("classifier.weight", std::move(w));
    h.bias = &h.params.add("classifier.bias", nn::Tensor<T>(nn::Shape{classes}));
    return h;
  }

  nn::Var<T> forward(nn::Graph<T>& g, const nn::Var<T>& cls, double dropout_rate, Rng& rng, bool train) {
    return linear(g, nn::dropout(cls, dropout_rate, rng, train), *weight, *bias);
  }
};

template <typename T>
struct MlpHead {
  nn::ParameterSet<T> params;
  std::vector<std::pair<nn::Parameter<T>*, nn::Parameter<T>*>> layers;  // hidden layers, then output

  static MlpHead create(size_t in, const std::vector<size_t>& hidden, size_t classes, Rng* rng) {
    MlpHead h;
    size_t width = in;
    for (size_t i = 0; i <= hidden.size(); ++i) {
      const size_t out = i < hidden.size() ? hidden[i] : classes;
      const std::string p = i < hidden.size() ? "mlp." + std::to_string(i) + "." : "mlp.output.";
      const double bound = 1.0 / std::sqrt(static_cast<double>(width));
      auto& w = detail::uniform_param(h.params, p + "weight", {width, out}, bound, rng);
      auto& b = detail::uniform_param(h.params, p + "bias", {out}, bound, rng);
      h.layers.emplace_back(&w, &b);
      width = out;
    }
    return h;
  }

  // Dropout follows every hidden layer except the last one.
  nn::Var<T> forward(nn::Graph<T>& g, nn::Var<T> x, double dropout_rate, Rng& rng, bool train) {
    const size_t hidden = layers.size() - 1;
    for (size_t i = 0; i < hidden; ++i) {
      x = nn::relu(linear(g, x, *layers[i].first, *layers[i].second));
      if (i + 1 < hidden) x = nn::dropout(x, dropout_rate, rng, train);
    }
    return linear(g, x, *layers.back().first, *layers.back().second);
  }
};

// One LSTM direction. Gate blocks along the 4h axis: input, forget, cell, output.
template <typename T>
struct LstmDirection {
  nn::Parameter<T>* w_ih = nullptr;  // [D_in, 4h]
  nn::Parameter<T>* w_hh = nullptr;  // [h, 4h]
  nn::Parameter<T>* bias = nullptr;  // [4h]
  size_t hidden = 0;
};

template <typename T>
struct LstmState {
  nn::Var<T> h;
  nn::Var<T> c;
};

// gates_x is the input contribution x*W_ih + b for this step, [B, 4h].
template <typename T>
LstmState<T> lstm_cell_step(nn::Graph<T>& g, const nn::Var<T>& gates_x, const LstmState<T>& prev,
                            const LstmDirection<T>& dir) {
  const size_t h = dir.hidden;
  auto gates = nn::add(gates_x, nn::matmul(prev.h, g.param(*dir.w_hh)));
  auto i = nn::sigmoid(nn::slice(gates, 0, h));
  auto f = nn::sigmoid(nn::slice(gates, h, 2 * h));
  auto c_hat = nn::tanh(nn::slice(gates, 2 * h, 3 * h));
  auto o = nn::sigmoid(nn::slice(gates, 3 * h, 4 * h));
  auto c = nn::add(nn::mul(f, prev.c), nn::mul(i, c_hat));
  return {nn::mul(o, nn::tanh(c)), c};
}

template <typename T>
struct BiLstmHead {
  nn::ParameterSet<T> params;
  std::vector<std::array<LstmDirection<T>, 2>> layers;  // [forward, backward]
  nn::Parameter<T>* fc_w = nullptr;
  nn::Parameter<T>* fc_b = nullptr;
  size_t hidden = 0;

  static BiLstmHead create(size_t in, size_t hidden, size_t num_layers, size_t classes, Rng* rng) {
    BiLstmHead h;
    h.hidden = hidden;
    const double bound = 1.0 / std::sqrt(static_cast<double>(hidden));
    size_t width = in;
    for (size_t l = 0; l < num_layers; ++l) {
      std::array<LstmDirection<T>, 2> dirs;
      for (size_t d = 0; d < 2; ++d) {
        const std::string p = "lstm." + std::to_string(l) + (d == 0 ? ".fwd." : ".bwd.");
        dirs[d].w_ih = &detail::uniform_param(h.params, p + "w_ih", {width, 4 * hidden}, bound, rng);
        dirs[d].w_hh = &detail::uniform_param(h.params, p + "w_hh", {hidden, 4 * hidden}, bound, rng);
        dirs[d].bias = &detail::uniform_param(h.params, p + "bias", {4 * hidden}, bound, rng);
        dirs[d].hidden = hidden;
      }
      h.layers.push_back(dirs);
      width = 2 * hidden;
    }
    const double fc_bound = 1.0 / std::sqrt(static_cast<double>(2 * hidden));
    h.fc_w = &detail::uniform_param(h.params, "fc.weight", {2 * hidden, classes}, fc_bound, rng);
    h.fc_b = &detail::uniform_param(h.params, "fc.bias", {classes}, fc_bound, rng);
    return h;
  }

  // Runs one direction over x = [B*T, D] (row b*T + t). Padded steps carry
  // the previous state through unchanged, so the forward final state is the
  // one at the last real token. Returns per-step outputs and the final h.
  static std::pair<std::vector<nn::Var<T>>, nn::Var<T>> run(nn::Graph<T>& g, const nn::Var<T>& x, size_t batch,
                                                             size_t seq, std::span<const int32_t> mask,
                                                             const LstmDirection<T>& dir, bool reverse) {
    const size_t h = dir.hidden;
    auto gates_x = nn::add_bias(nn::matmul(x, g.param(*dir.w_ih)), g.param(*dir.bias));
    LstmState<T> state{g.constant(nn::Tensor<T>(nn::Shape{batch, h})), g.constant(nn::Tensor<T>(nn::Shape{batch, h}))};
    std::vector<nn::Var<T>> outputs(seq);
    std::vector<size_t> rows(batch);
    for (size_t s = 0; s < seq; ++s) {
      const size_t t = reverse ? seq - 1 - s : s;
      for (size_t b = 0; b < batch; ++b) rows[b] = b * seq + t;
      LstmState<T> next = lstm_cell_step(g, nn::gather_rows(gates_x, std::span<const size_t>(rows)), state, dir);
      bool all_real = true;
      nn::Tensor<T> keep(nn::Shape{batch, h});
      for (size_t b = 0; b < batch; ++b) {
        const T m = mask[b * seq + t] ? T(1) : T(0);
        all_real = all_real && m == T(1);
        std::fill_n(keep.data() + b * h, h, m);
      }
      if (!all_real) {
        next.h = detail::blend(g, next.h, state.h, keep);
        next.c = detail::blend(g, next.c, state.c, keep);
      }
      state = next;
      outputs[t] = state.h;
    }
    return {std::move(outputs), state.h};
  }

  nn::Var<T> forward(nn::Graph<T>& g, const nn::Var<T>& x, size_t batch, size_t seq, std::span<const int32_t> mask,
                     double dropout_rate, Rng& rng, bool train) {
    nn::Var<T> input = x;
    nn::Var<T> last_fwd, last_bwd;
    for (size_t l = 0; l < layers.size(); ++l) {
      auto [fwd, fwd_final] = run(g, input, batch, seq, mask, layers[l][0], false);
      auto [bwd, bwd_final] = run(g, input, batch, seq, mask, layers[l][1], true);
      last_fwd = fwd_final;
      last_bwd = bwd_final;
      if (l + 1 < layers.size()) {
        std::vector<nn::Var<T>> steps(seq);
        for (size_t t = 0; t < seq; ++t) steps[t] = nn::concat(fwd[t], bwd[t]);
        input = nn::interleave_steps(steps);
      }
    }
    auto summary = nn::dropout(nn::concat(last_fwd, last_bwd), dropout_rate, rng, train);
    return linear(g, summary, *fc_w, *fc_b);
  }
};

struct Prediction {
  SentimentLabel label;
  std::vector<double> probabilities;  // in label-set order
};

struct EpochLog {
  size_t epoch;  // 0-based
  double mean_loss;
};

class SentimentModel {
 public:
  HeadKind kind = HeadKind::kFinetune;
  BertModel<float> encoder;
  Vocab vocab;
  NormalizationRules rules = NormalizationRules::defaults();
  std::vector<SentimentLabel> labels;
  TrainConfig config;
  std::optional<LinearHead<float>> linear_head;
  std::optional<MlpHead<float>> mlp_head;
  std::optional<BiLstmHead<float>> bilstm_head;

  size_t num_classes() const { return labels.size(); }

  nn::ParameterSet<float>& head_params() {
    if (linear_head) return linear_head->params;
    if (mlp_head) return mlp_head->params;
    if (bilstm_head) return bilstm_head->params;
    throw std::logic_error("sentiment model has no head");
  }

  // Allocates the head for `kind`; with rng the head is initialized.
  void init_head(Rng* rng) {
    const size_t H = encoder.config.hidden_size;
    linear_head.reset();
    mlp_head.reset();
    bilstm_head.reset();
    switch (kind) {
      case HeadKind::kFinetune: linear_head = LinearHead<float>::create(H, num_classes(), rng); break;
      case HeadKind::kMlp: mlp_head = MlpHead<float>::create(H, config.mlp_hidden, num_classes(), rng); break;
      case HeadKind::kBilstm:
        bilstm_head = BiLstmHead<float>::create(H, config.lstm_hidden, config.lstm_layers, num_classes(), rng);
        break;
    }
  }

  // Frozen-encoder features for one encoding: the CLS row for mlp, every
  // token state for bilstm. Single-row batches, so no padding is involved.
  nn::Tensor<float> features(const Encoding& e) {
    nn::Graph<float> g(false);
    Rng unused(0);
    const Batch b = collate(std::span<const Encoding>(&e, 1));
    auto out = forward(g, encoder, b, false, unused);
    return kind == HeadKind::kMlp ? out.cls.value() : out.sequence.value();
  }

  // Logits for a batch given frozen features.
  nn::Var<float> head_logits(nn::Graph<float>& g, std::span<const nn::Tensor<float>* const> feats, bool train,
                             Rng& rng) {
    const size_t B = feats.size(), H = encoder.config.hidden_size;
    if (kind == HeadKind::kMlp) {
      nn::Tensor<float> x(nn::Shape{B, H});
      for (size_t b = 0; b < B; ++b) std::copy_n(feats[b]->data(), H, x.data() + b * H);
      return mlp_head->forward(g, g.constant(std::move(x)), config.dropout_rate, rng, train);
    }
    size_t T = 0;
    for (const auto* f : feats) T = std::max(T, f->rows());
    nn::Tensor<float> x(nn::Shape{B * T, H});
    std::vector<int32_t> mask(B * T, 0);
    for (size_t b = 0; b < B; ++b) {
      std::copy_n(feats[b]->data(), feats[b]->size(), x.data() + b * T * H);
      std::fill_n(mask.begin() + static_cast<std::ptrdiff_t>(b * T), feats[b]->rows(), 1);
    }
    return bilstm_head->forward(g, g.constant(std::move(x)), B, T, std::span<const int32_t>(mask),
                                config.dropout_rate, rng, train);
  }

  nn::Var<float> finetune_logits(nn::Graph<float>& g, const Batch& batch, bool train, Rng& rng) {
    auto out = forward(g, encoder, batch, train, rng);
    return linear_head->forward(g, out.cls, config.dropout_rate, rng, train);
  }

  Prediction predict_encoded(const Encoding& e) {
    nn::Graph<float> g(false);
    Rng unused(0);
    nn::Var<float> logits;
    nn::Tensor<float> feat;
    if (kind == HeadKind::kFinetune) {
      logits = finetune_logits(g, collate(std::span<const Encoding>(&e, 1)), false, unused);
    } else {
      feat = features(e);
      const nn::Tensor<float>* ptr = &feat;
      logits = head_logits(g, std::span<const nn::Tensor<float>* const>(&ptr, 1), false, unused);
    }
    const auto& lv = logits.value();
    double mx = lv[0];
    for (size_t c = 1; c < lv.size(); ++c) mx = std::max<double>(mx, lv[c]);
    Prediction p;
    double sum = 0;
    for (size_t c = 0; c < lv.size(); ++c) sum += p.probabilities.emplace_back(std::exp(lv[c] - mx));
    size_t best = 0;
    for (size_t c = 0; c < lv.size(); ++c) {
      p.probabilities[c] /= sum;
      if (lv[c] > lv[best]) best = c;
    }
    p.label = labels[best];
    return p;
  }

  Prediction predict(std::string_view text) {
    return predict_encoded(encode(normalize_text(text, rules).text, vocab, config.max_len));
  }
};

namespace detail {

inline std::vector<int32_t> label_targets(const std::vector<LabeledExample>& data,
                                          const std::vector<SentimentLabel>& labels) {
  std::vector<int32_t> out;
  for (size_t i = 0; i < data.size(); ++i) {
    auto it = std::find(labels.begin(), labels.end(), data[i].label);
    if (it == labels.end()) {
      if (data[i].label == SentimentLabel::kNeutral && labels.size() == 2) {
        throw std::invalid_argument("example " + std::to_string(i + 1) +
                                    " is neutral but num_classes is 2; apply to-binary to the dataset first");
      }
      throw std::invalid_argument("example " + std::to_string(i + 1) + " has label '" +
                                  std::string(to_string(data[i].label)) + "' outside the label set");
    }
    out.push_back(static_cast<int32_t>(it - labels.begin()));
  }
  return out;
}

// Cache frozen features when they fit in this many floats.
inline constexpr size_t kFeatureCacheFloats = size_t{1} << 26;

}  // namespace detail

// Trains a head of `kind` on `data` (already normalized). The encoder is
// copied; for bilstm/mlp the copy is never updated.
inline SentimentModel train_classifier(HeadKind kind, const BertModel<float>& encoder, const Vocab& vocab,
                                       const NormalizationRules& rules, const std::vector<LabeledExample>& data,
                                       const TrainConfig& cfg, const std::function<void(const EpochLog&)>& on_epoch = {}) {
  cfg.validate();
  if (data.empty()) throw std::invalid_argument("cannot train on an empty dataset");
  if (cfg.max_len > encoder.config.max_position) {
    throw std::invalid_argument("train config: max_len " + std::to_string(cfg.max_len) +
                                " exceeds encoder max_position " + std::to_string(encoder.config.max_position));
  }
  SentimentModel m;
  m.kind = kind;
  m.encoder = clone_model<float>(encoder);
  m.vocab = vocab;
  m.rules = rules;
  m.labels = label_set(cfg.num_classes);
  m.config = cfg;
  if (!m.config.epochs) m.config.epochs = default_epochs(kind, encoder.config.hidden_size);
  const std::vector<int32_t> targets = detail::label_targets(data, m.labels);

  Rng init_rng(derive_seed(cfg.seed, 11));
  m.init_head(&init_rng);
  const bool finetune = kind == HeadKind::kFinetune;
  m.encoder.params.set_trainable(finetune);

  std::vector<Encoding> encoded;
  for (const auto& ex : data) encoded.push_back(encode(ex.text.text, vocab, cfg.max_len));

  std::vector<nn::Tensor<float>> cache;
  if (!finetune) {
    size_t floats = 0;
    for (const auto& e : encoded) floats += (kind == HeadKind::kMlp ? 1 : e.length()) * encoder.config.hidden_size;
    if (floats <= detail::kFeatureCacheFloats) {
      for (const auto& e : encoded) cache.push_back(m.features(e));
    }
  }

  nn::AdamState<float> head_adam, encoder_adam;
  head_adam.lr = encoder_adam.lr = cfg.learning_rate;
  const uint64_t shuffle_base = derive_seed(cfg.seed, 12);
  const uint64_t dropout_base = derive_seed(cfg.seed, 13);
  uint64_t step = 0;
  for (size_t epoch = 0; epoch < *m.config.epochs; ++epoch) {
    std::vector<size_t> order(data.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = i;
    Rng(derive_seed(shuffle_base, epoch)).shuffle(order);
    double loss_sum = 0;
    size_t batches = 0;
    for (size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const size_t end = std::min(order.size(), start + cfg.batch_size);
      std::vector<int32_t> tgt;
      for (size_t i = start; i < end; ++i) tgt.push_back(targets[order[i]]);
      Rng dropout_rng(derive_seed(dropout_base, step));
      nn::Graph<float> g;
      nn::Var<float> logits;
      std::vector<nn::Tensor<float>> fresh;
      if (finetune) {
        std::vector<Encoding> chunk;
        for (size_t i = start; i < end; ++i) chunk.push_back(encoded[order[i]]);
        logits = m.finetune_logits(g, collate(std::span<const Encoding>(chunk)), true, dropout_rng);
      } else {
        std::vector<const nn::Tensor<float>*> feats;
        if (cache.empty()) {
          for (size_t i = start; i < end; ++i) fresh.push_back(m.features(encoded[order[i]]));
          for (const auto& f : fresh) feats.push_back(&f);
        } else {
          for (size_t i = start; i < end; ++i) feats.push_back(&cache[order[i]]);
        }
        logits = m.head_logits(g, std::span<const nn::Tensor<float>* const>(feats), true, dropout_rng);
      }
      auto loss = nn::cross_entropy(logits, std::span<const int32_t>(tgt));
      const double lv = loss.value()[0];
      if (!std::isfinite(lv)) {
        throw std::runtime_error("non-finite training loss at epoch " + std::to_string(epoch + 1));
      }
      g.backward(loss);
      nn::adam_step(m.head_params(), head_adam);
      if (finetune) nn::adam_step(m.encoder.params, encoder_adam);
      loss_sum += lv;
      ++batches;
      ++step;
    }
    if (on_epoch) on_epoch({epoch, loss_sum / static_cast<double>(batches)});
  }
  m.encoder.params.set_trainable(true);
  return m;
}

inline ConfusionMatrix evaluate(SentimentModel& model, const std::vector<LabeledExample>& data) {
  ConfusionMatrix cm(label_names(model.labels));
  const std::vector<int32_t> targets = detail::label_targets(data, model.labels);
  for (size_t i = 0; i < data.size(); ++i) {
    const Prediction p = model.predict_encoded(encode(data[i].text.text, model.vocab, model.config.max_len));
    const auto pred = std::find(model.labels.begin(), model.labels.end(), p.label) - model.labels.begin();
    cm.add(static_cast<size_t>(targets[i]), static_cast<size_t>(pred));
  }
  return cm;
}

// Model directory: model.json, labels.json, params.bin + manifest.json (head),
// vocab.txt, rules.txt and encoder/ (an encoder checkpoint).
inline void save_sentiment_model(const std::filesystem::path& dir, SentimentModel& m) {
  io::publish_directory(dir, [&](const std::filesystem::path& staging) {
    std::filesystem::create_directories(staging / "encoder");
    write_encoder_files(staging / "encoder", m.encoder);
    nlohmann::ordered_json j;
    j["format_version"] = kCheckpointFormatVersion;
    j["head"] = to_string(m.kind);
    j["input_width"] = m.encoder.config.hidden_size;
    j["encoder"] = {{"path", "encoder"},
                    {"frozen", m.kind != HeadKind::kFinetune},
                    {"params_fnv1a", fnv1a_hex(io::read_file(staging / "encoder" / "params.bin"))}};
    j["train"] = m.config.to_json();
    io::write_file_atomic(staging / "model.json", j.dump(2) + "\n");
    io::write_file_atomic(staging / "labels.json", nlohmann::json(label_names(m.labels)).dump() + "\n");
    nn::write_tensors(staging, "params.bin", "manifest.json", nn::named_values(m.head_params()));
    m.vocab.save(staging / "vocab.txt");
    io::write_file_atomic(staging / "rules.txt", m.rules.serialize());
  });
}

inline SentimentModel load_sentiment_model(const std::filesystem::path& dir) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(io::read_file(dir / "model.json"));
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error("bad model.json in '" + dir.string() + "': " + e.what());
  }
  if (j.value("format_version", 0) != kCheckpointFormatVersion) {
    throw std::runtime_error("unsupported model format in '" + dir.string() + "'");
  }
  SentimentModel m;
  m.kind = parse_head_kind(j.at("head").get<std::string>());
  m.encoder = load_checkpoint<float>(dir / j.at("encoder").at("path").get<std::string>());
  const size_t width = j.at("input_width").get<size_t>();
  if (width != m.encoder.config.hidden_size) {
    throw std::runtime_error("head input width " + std::to_string(width) + " does not match encoder hidden size " +
                             std::to_string(m.encoder.config.hidden_size));
  }
  m.config = TrainConfig::from_json(j.at("train"));
  for (const auto& name : nlohmann::json::parse(io::read_file(dir / "labels.json"))) {
    auto l = parse_label(name.get<std::string>());
    if (!l) throw std::runtime_error("labels.json: unknown label '" + name.get<std::string>() + "'");
    m.labels.push_back(*l);
  }
  if (m.labels != label_set(m.labels.size())) throw std::runtime_error("labels.json: unexpected class order");
  m.vocab = Vocab::load(dir / "vocab.txt");
  m.rules = NormalizationRules::load(dir / "rules.txt");
  m.init_head(nullptr);
  nn::read_tensors(dir, "params.bin", "manifest.json", nn::named_values(m.head_params()));
  return m;
}

}  // namespace kubert
