#pragma once

// BERT-style post-LayerNorm transformer encoder with a tied MLM head.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <set>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"
#include "kubert/io.hpp"
#include "kubert/nn/graph.hpp"
#include "kubert/nn/ops.hpp"
#include "kubert/nn/tensor_io.hpp"
#include "kubert/random.hpp"
#include "kubert/tokenizer.hpp"

namespace kubert {

struct BertConfig {
  size_t hidden_size = 0;
  size_t num_hidden_layers = 0;
  size_t num_attention_heads = 0;
  size_t vocab_size = 0;
  size_t max_position = 512;
  size_t intermediate_size = 0;  // 0 means 4 * hidden_size
  double dropout_rate = 0.1;
  size_t epochs = 1;
  size_t iterations = 1000000;
  size_t batch_size = 12;
  // Pretraining knobs that the model tables leave open.
  double learning_rate = 1e-4;
  size_t max_len = 128;
  double mlm_probability = 0.15;
  size_t warmup_steps = 0;  // linear learning-rate warmup; 0 keeps it constant
  bool gpu = false;  // accepted for compatibility; execution is CPU only

  size_t ffn_size() const { return intermediate_size ? intermediate_size : 4 * hidden_size; }

  void validate() const {
    if (hidden_size == 0 || num_hidden_layers == 0 || num_attention_heads == 0 || batch_size == 0 ||
        epochs == 0) {
      throw std::invalid_argument("bert config: sizes, epochs and batch_size must be positive");
    }
    if (hidden_size % num_attention_heads != 0) {
      throw std::invalid_argument("bert config: hidden_size " + std::to_string(hidden_size) +
                                  " is not divisible by num_attention_heads " +
                                  std::to_string(num_attention_heads));
    }
    if (vocab_size < 6) throw std::invalid_argument("bert config: vocab_size must be at least 6");
    if (max_position < 3) throw std::invalid_argument("bert config: max_position must be at least 3");
    if (max_len < 3 || max_len > max_position) {
      throw std::invalid_argument("bert config: max_len must be in [3, max_position]");
    }
    if (!(dropout_rate >= 0.0 && dropout_rate < 1.0)) {
      throw std::invalid_argument("bert config: dropout_rate must be in [0,1)");
    }
    if (!(mlm_probability > 0.0 && mlm_probability < 1.0)) {
      throw std::invalid_argument("bert config: mlm_probability must be in (0,1)");
    }
    if (!(learning_rate > 0.0)) throw std::invalid_argument("bert config: learning_rate must be positive");
  }

  nlohmann::ordered_json to_json() const {
    nlohmann::ordered_json j;
    j["epochs"] = epochs;
    j["iterations"] = iterations;
    j["hidden_size"] = hidden_size;
    j["vocab_size"] = vocab_size;
    j["num_attention_heads"] = num_attention_heads;
    j["num_hidden_layers"] = num_hidden_layers;
    j["batch_size"] = batch_size;
    j["gpu"] = gpu;
    j["max_position"] = max_position;
    j["intermediate_size"] = ffn_size();
    j["dropout_rate"] = dropout_rate;
    j["learning_rate"] = learning_rate;
    j["max_len"] = max_len;
    j["mlm_probability"] = mlm_probability;
    j["warmup_steps"] = warmup_steps;
    return j;
  }

  // Strict: unknown keys are rejected and required keys are named.
  static BertConfig from_json(const nlohmann::json& j) {
    if (!j.is_object()) throw std::invalid_argument("bert config must be a JSON object");
    static const std::set<std::string> kKnown = {
        "epochs",   "iterations",   "hidden_size", "vocab_size",       "num_attention_heads",
        "num_hidden_layers", "batch_size", "gpu",  "max_position",     "intermediate_size",
        "dropout_rate", "learning_rate", "max_len", "mlm_probability", "warmup_steps"};
    for (const auto& [k, v] : j.items()) {
      if (!kKnown.count(k)) throw std::invalid_argument("bert config: unknown key '" + k + "'");
    }
    for (const char* req : {"hidden_size", "num_hidden_layers", "num_attention_heads", "vocab_size"}) {
      if (!j.contains(req)) throw std::invalid_argument(std::string("bert config: missing required key '") + req + "'");
    }
    BertConfig c;
    try {
      c.hidden_size = j.at("hidden_size").get<size_t>();
      c.num_hidden_layers = j.at("num_hidden_layers").get<size_t>();
      c.num_attention_heads = j.at("num_attention_heads").get<size_t>();
      c.vocab_size = j.at("vocab_size").get<size_t>();
      c.epochs = j.value("epochs", c.epochs);
      c.iterations = j.value("iterations", c.iterations);
      c.batch_size = j.value("batch_size", c.batch_size);
      c.gpu = j.value("gpu", c.gpu);
      c.max_position = j.value("max_position", c.max_position);
      c.intermediate_size = j.value("intermediate_size", c.intermediate_size);
      c.dropout_rate = j.value("dropout_rate", c.dropout_rate);
      c.learning_rate = j.value("learning_rate", c.learning_rate);
      c.max_len = j.value("max_len", std::min(c.max_len, c.max_position));
      c.mlm_probability = j.value("mlm_probability", c.mlm_probability);
      c.warmup_steps = j.value("warmup_steps", c.warmup_steps);
    } catch (const nlohmann::json::exception& e) {
      throw std::invalid_argument(std::string("bert config: ") + e.what());
    }
    c.validate();
    return c;
  }

  bool operator==(const BertConfig&) const = default;
};

// Closed-form parameter count. The MLM output projection is tied to the token
// embeddings, so the head only adds a transform, a layer norm and a bias.
inline size_t count_params(const BertConfig& c) {
  const size_t H = c.hidden_size, V = c.vocab_size, P = c.max_position, I = c.ffn_size();
  const size_t embeddings = V * H + P * H + 2 * H + 2 * H;
  const size_t layer = 4 * (H * H + H) + 2 * H + (H * I + I) + (I * H + H) + 2 * H;
  const size_t mlm_head = (H * H + H) + 2 * H + V;
  return embeddings + c.num_hidden_layers * layer + mlm_head;
}

template <typename T>
struct BertLayer {
  nn::Parameter<T>* query_w;
  nn::Parameter<T>* query_b;
  nn::Parameter<T>* key_w;
  nn::Parameter<T>* key_b;
  nn::Parameter<T>* value_w;
  nn::Parameter<T>* value_b;
  nn::Parameter<T>* output_w;
  nn::Parameter<T>* output_b;
  nn::Parameter<T>* attn_ln_gamma;
  nn::Parameter<T>* attn_ln_beta;
  nn::Parameter<T>* ffn_in_w;
  nn::Parameter<T>* ffn_in_b;
  nn::Parameter<T>* ffn_out_w;
  nn::Parameter<T>* ffn_out_b;
  nn::Parameter<T>* ffn_ln_gamma;
  nn::Parameter<T>* ffn_ln_beta;
};

template <typename T>
struct BertModel {
  BertConfig config;
  nn::ParameterSet<T> params;
  nn::Parameter<T>* word_embeddings = nullptr;
  nn::Parameter<T>* position_embeddings = nullptr;
  nn::Parameter<T>* segment_embeddings = nullptr;
  nn::Parameter<T>* emb_ln_gamma = nullptr;
  nn::Parameter<T>* emb_ln_beta = nullptr;
  std::vector<BertLayer<T>> layers;
  nn::Parameter<T>* mlm_transform_w = nullptr;
  nn::Parameter<T>* mlm_transform_b = nullptr;
  nn::Parameter<T>* mlm_ln_gamma = nullptr;
  nn::Parameter<T>* mlm_ln_beta = nullptr;
  nn::Parameter<T>* mlm_output_b = nullptr;
};

namespace detail {

enum class Init { kWeight, kZeros, kOnes };

template <typename T>
nn::Parameter<T>* add_param(nn::ParameterSet<T>& ps, std::string name, nn::Shape shape, Init init, Rng* rng) {
  nn::Tensor<T> t(std::move(shape), init == Init::kOnes ? T(1) : T(0));
  if (init == Init::kWeight && rng) {
    for (auto& v : t.values()) v = static_cast<T>(rng->truncated_normal(0.02));
  }
  return &ps.add(std::move(name), std::move(t));
}

}  // namespace detail

// Allocates every tensor. With a seed, weights get truncated-normal(0.02)
// values; otherwise everything is zero/one (for loading into).
template <typename T>
BertModel<T> allocate_model(const BertConfig& config, std::optional<uint64_t> seed = std::nullopt) {
  config.validate();
  using detail::Init;
  const size_t H = config.hidden_size, I = config.ffn_size();
  std::optional<Rng> rng;
  if (seed) rng.emplace(*seed);
  Rng* r = rng ? &*rng : nullptr;
  BertModel<T> m;
  m.config = config;
  auto& ps = m.params;
  m.word_embeddings = detail::add_param(ps, "embeddings.word", {config.vocab_size, H}, Init::kWeight, r);
  m.position_embeddings = detail::add_param(ps, "embeddings.position", {config.max_position, H}, Init::kWeight, r);
  m.segment_embeddings = detail::add_param(ps, "embeddings.segment", {2, H}, Init::kWeight, r);
  m.emb_ln_gamma = detail::add_param(ps, "embeddings.ln.gamma", {H}, Init::kOnes, r);
  m.emb_ln_beta = detail::add_param(ps, "embeddings.ln.beta", {H}, Init::kZeros, r);
  for (size_t l = 0; l < config.num_hidden_layers; ++l) {
    const std::string p = "layer." + std::to_string(l) + ".";
    BertLayer<T> L{};
    L.query_w = detail::add_param(ps, p + "attention.query.weight", {H, H}, Init::kWeight, r);
    L.query_b = detail::add_param(ps, p + "attention.query.bias", {H}, Init::kZeros, r);
    L.key_w = detail::add_param(ps, p + "attention.key.weight", {H, H}, Init::kWeight, r);
    L.key_b = detail::add_param(ps, p + "attention.key.bias", {H}, Init::kZeros, r);
    L.value_w = detail::add_param(ps, p + "attention.value.weight", {H, H}, Init::kWeight, r);
    L.value_b = detail::add_param(ps, p + "attention.value.bias", {H}, Init::kZeros, r);
    L.output_w = detail::add_param(ps, p + "attention.output.weight", {H, H}, Init::kWeight, r);
    L.output_b = detail::add_param(ps, p + "attention.output.bias", {H}, Init::kZeros, r);
    L.attn_ln_gamma = detail::add_param(ps, p + "attention.ln.gamma", {H}, Init::kOnes, r);
    L.attn_ln_beta = detail::add_param(ps, p + "attention.ln.beta", {H}, Init::kZeros, r);
    L.ffn_in_w = detail::add_param(ps, p + "ffn.in.weight", {H, I}, Init::kWeight, r);
    L.ffn_in_b = detail::add_param(ps, p + "ffn.in.bias", {I}, Init::kZeros, r);
    L.ffn_out_w = detail::add_param(ps, p + "ffn.out.weight", {I, H}, Init::kWeight, r);
    L.ffn_out_b = detail::add_param(ps, p + "ffn.out.bias", {H}, Init::kZeros, r);
    L.ffn_ln_gamma = detail::add_param(ps, p + "ffn.ln.gamma", {H}, Init::kOnes, r);
    L.ffn_ln_beta = detail::add_param(ps, p + "ffn.ln.beta", {H}, Init::kZeros, r);
    m.layers.push_back(L);
  }
  m.mlm_transform_w = detail::add_param(ps, "mlm.transform.weight", {H, H}, Init::kWeight, r);
  m.mlm_transform_b = detail::add_param(ps, "mlm.transform.bias", {H}, Init::kZeros, r);
  m.mlm_ln_gamma = detail::add_param(ps, "mlm.ln.gamma", {H}, Init::kOnes, r);
  m.mlm_ln_beta = detail::add_param(ps, "mlm.ln.beta", {H}, Init::kZeros, r);
  m.mlm_output_b = detail::add_param(ps, "mlm.output.bias", {config.vocab_size}, Init::kZeros, r);
  return m;
}

template <typename T>
BertModel<T> build_model(const BertConfig& config, uint64_t seed) {
  if (config.gpu) warn("bert config requests a GPU; this build runs on CPU only");
  return allocate_model<T>(config, seed);
}

// Deep copy, optionally converting the scalar type.
template <typename To, typename From>
BertModel<To> clone_model(const BertModel<From>& src) {
  BertModel<To> m = allocate_model<To>(src.config);
  for (size_t i = 0; i < src.params.size(); ++i) {
    m.params[i].value = src.params[i].value.template cast<To>();
    m.params[i].trainable = src.params[i].trainable;
  }
  return m;
}

// Padded token-id batch, row-major [batch, seq].
struct Batch {
  size_t batch = 0;
  size_t seq = 0;
  std::vector<int32_t> ids;
  std::vector<int32_t> attention_mask;
  std::vector<int32_t> segment_ids;

  size_t length(size_t b) const {
    size_t n = 0;
    for (size_t t = 0; t < seq; ++t) n += attention_mask[b * seq + t] != 0;
    return n;
  }
};

// Stacks encodings and drops trailing columns that are padding in every row.
inline Batch collate(std::span<const Encoding> encodings) {
  if (encodings.empty()) throw std::invalid_argument("collate: empty batch");
  size_t seq = 0;
  for (const auto& e : encodings) seq = std::max(seq, e.length());
  Batch b;
  b.batch = encodings.size();
  b.seq = seq;
  for (const auto& e : encodings) {
    for (size_t t = 0; t < seq; ++t) {
      const bool in = t < e.ids.size();
      b.ids.push_back(in ? e.ids[t] : Vocab::kPad);
      b.attention_mask.push_back(in ? e.attention_mask[t] : 0);
      b.segment_ids.push_back(in ? e.segment_ids[t] : 0);
    }
  }
  return b;
}

template <typename T>
struct EncoderOutput {
  nn::Var<T> sequence;  // [batch*seq, H]
  nn::Var<T> cls;       // [batch, H]
};

template <typename T>
nn::Var<T> linear(nn::Graph<T>& g, const nn::Var<T>& x, nn::Parameter<T>& w, nn::Parameter<T>& b) {
  return nn::add_bias(nn::matmul(x, g.param(w)), g.param(b));
}

// One post-LN encoder layer over [batch*seq, H] states.
template <typename T>
nn::Var<T> encoder_layer(nn::Graph<T>& g, const BertLayer<T>& L, const nn::Var<T>& x, const Batch& batch,
                         size_t heads, double dropout_rate, bool train, Rng& rng,
                         nn::AttentionProbs<T>* capture = nullptr) {
  auto q = linear(g, x, *L.query_w, *L.query_b);
  auto k = linear(g, x, *L.key_w, *L.key_b);
  auto v = linear(g, x, *L.value_w, *L.value_b);
  auto ctx = nn::attention(q, k, v, std::span<const int32_t>(batch.attention_mask), batch.batch, batch.seq,
                           heads, capture);
  auto attn_out = nn::dropout(linear(g, ctx, *L.output_w, *L.output_b), dropout_rate, rng, train);
  auto h = nn::layer_norm(nn::add(x, attn_out), g.param(*L.attn_ln_gamma), g.param(*L.attn_ln_beta));
  auto f = nn::gelu(linear(g, h, *L.ffn_in_w, *L.ffn_in_b));
  f = nn::dropout(linear(g, f, *L.ffn_out_w, *L.ffn_out_b), dropout_rate, rng, train);
  return nn::layer_norm(nn::add(h, f), g.param(*L.ffn_ln_gamma), g.param(*L.ffn_ln_beta));
}

template <typename T>
EncoderOutput<T> forward(nn::Graph<T>& g, BertModel<T>& m, const Batch& batch, bool train, Rng& rng,
                         std::vector<nn::AttentionProbs<T>>* capture = nullptr) {
  const BertConfig& c = m.config;
  if (batch.seq > c.max_position) {
    throw std::invalid_argument("sequence length " + std::to_string(batch.seq) + " exceeds max_position " +
                                std::to_string(c.max_position));
  }
  for (int32_t id : batch.ids) {
    if (id < 0 || static_cast<size_t>(id) >= c.vocab_size) {
      throw std::out_of_range("token id " + std::to_string(id) + " out of range for vocab_size " +
                              std::to_string(c.vocab_size));
    }
  }
  std::vector<int32_t> positions(batch.batch * batch.seq);
  for (size_t i = 0; i < positions.size(); ++i) positions[i] = static_cast<int32_t>(i % batch.seq);
  auto x = nn::add(nn::embedding(g.param(*m.word_embeddings), std::span<const int32_t>(batch.ids)),
                   nn::embedding(g.param(*m.position_embeddings), std::span<const int32_t>(positions)));
  x = nn::add(x, nn::embedding(g.param(*m.segment_embeddings), std::span<const int32_t>(batch.segment_ids)));
  x = nn::layer_norm(x, g.param(*m.emb_ln_gamma), g.param(*m.emb_ln_beta));
  x = nn::dropout(x, c.dropout_rate, rng, train);
  if (capture) capture->assign(m.layers.size(), {});
  for (size_t l = 0; l < m.layers.size(); ++l) {
    x = encoder_layer(g, m.layers[l], x, batch, c.num_attention_heads, c.dropout_rate, train, rng,
                      capture ? &(*capture)[l] : nullptr);
  }
  std::vector<size_t> cls_rows(batch.batch);
  for (size_t b = 0; b < batch.batch; ++b) cls_rows[b] = b * batch.seq;
  auto cls = nn::gather_rows(x, std::span<const size_t>(cls_rows));
  return {x, cls};
}

// Vocabulary logits for the selected rows of the sequence states.
template <typename T>
nn::Var<T> mlm_logits(nn::Graph<T>& g, BertModel<T>& m, const nn::Var<T>& sequence,
                      std::span<const size_t> rows) {
  auto h = nn::gather_rows(sequence, rows);
  h = nn::gelu(linear(g, h, *m.mlm_transform_w, *m.mlm_transform_b));
  h = nn::layer_norm(h, g.param(*m.mlm_ln_gamma), g.param(*m.mlm_ln_beta));
  return nn::add_bias(nn::matmul_nt(h, g.param(*m.word_embeddings)), g.param(*m.mlm_output_b));
}

// Checkpoint directory: config.json, params.bin, manifest.json.
template <typename T>
void write_encoder_files(const std::filesystem::path& dir, BertModel<T>& m) {
  io::write_file_atomic(dir / "config.json", m.config.to_json().dump(2) + "\n");
  nn::write_tensors(dir, "params.bin", "manifest.json", nn::named_values(m.params));
}

template <typename T>
void save_checkpoint(const std::filesystem::path& dir, BertModel<T>& m) {
  io::publish_directory(dir, [&](const std::filesystem::path& staging) { write_encoder_files(staging, m); });
}

inline BertConfig load_config(const std::filesystem::path& dir) {
  try {
    return BertConfig::from_json(nlohmann::json::parse(io::read_file(dir / "config.json")));
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error("bad config.json in '" + dir.string() + "': " + e.what());
  }
}

template <typename T>
BertModel<T> load_checkpoint(const std::filesystem::path& dir) {
  BertModel<T> m = allocate_model<T>(load_config(dir));
  nn::read_tensors(dir, "params.bin", "manifest.json", nn::named_values(m.params));
  return m;
}

}  // namespace kubert
