#pragma once

// Masked-language-model batches and the pretraining loop.
//
// Randomness is derived from (seed, epoch) for shuffling and (seed, step) for
// masking and dropout, so a run resumed from an epoch checkpoint replays the
// same trajectory as an uninterrupted one.

#include <cmath>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"
#include "kubert/bert.hpp"
#include "kubert/io.hpp"
#include "kubert/nn/adam.hpp"
#include "kubert/random.hpp"
#include "kubert/tokenizer.hpp"

namespace kubert {

struct MlmBatch {
  Batch inputs;                 // ids with masking applied
  std::vector<int32_t> labels;  // original id where selected, kIgnoreIndex elsewhere

  size_t num_selected() const {
    size_t n = 0;
    for (int32_t l : labels) n += l != nn::kIgnoreIndex;
    return n;
  }
};

struct MaskingCounts {
  size_t eligible = 0;
  size_t selected = 0;
  size_t to_mask = 0;
  size_t to_random = 0;
  size_t unchanged = 0;
};

// Each non-special, unpadded token is selected with probability `rate`; a
// selected token becomes [MASK] 80% of the time, a uniformly random
// non-special id 10%, and stays as is 10%.
inline MlmBatch mask_for_mlm(const Batch& batch, double rate, uint64_t seed, size_t vocab_size,
                             MaskingCounts* counts = nullptr) {
  if (!(rate > 0.0 && rate < 1.0)) {
    throw std::invalid_argument("mlm masking rate must be in (0,1), got " + std::to_string(rate));
  }
  if (vocab_size <= static_cast<size_t>(Vocab::kNumSpecials)) {
    throw std::invalid_argument("mlm masking needs at least one non-special token id");
  }
  Rng rng(seed);
  MlmBatch out{batch, std::vector<int32_t>(batch.ids.size(), nn::kIgnoreIndex)};
  MaskingCounts c;
  for (size_t i = 0; i < batch.ids.size(); ++i) {
    const int32_t id = batch.ids[i];
    if (!batch.attention_mask[i] || Vocab::is_special(id)) continue;
    ++c.eligible;
    if (rng.uniform() >= rate) continue;
    ++c.selected;
    out.labels[i] = id;
    const double r = rng.uniform();
    if (r < 0.8) {
      out.inputs.ids[i] = Vocab::kMask;
      ++c.to_mask;
    } else if (r < 0.9) {
      out.inputs.ids[i] =
          static_cast<int32_t>(Vocab::kNumSpecials + rng.index(vocab_size - Vocab::kNumSpecials));
      ++c.to_random;
    } else {
      ++c.unchanged;
    }
  }
  if (counts) *counts = c;
  return out;
}

// MLM loss over the selected positions only.
template <typename T>
nn::Var<T> mlm_loss(nn::Graph<T>& g, BertModel<T>& model, const MlmBatch& mb, bool train, Rng& dropout_rng) {
  auto enc = forward(g, model, mb.inputs, train, dropout_rng);
  std::vector<size_t> rows;
  std::vector<int32_t> targets;
  for (size_t i = 0; i < mb.labels.size(); ++i) {
    if (mb.labels[i] == nn::kIgnoreIndex) continue;
    rows.push_back(i);
    targets.push_back(mb.labels[i]);
  }
  auto logits = mlm_logits(g, model, enc.sequence, std::span<const size_t>(rows));
  return nn::cross_entropy(logits, std::span<const int32_t>(targets));
}

struct StepLog {
  uint64_t step;  // 1-based count of optimizer steps taken
  size_t epoch;   // 0-based
  double loss;
};

struct PretrainOptions {
  uint64_t seed = 42;
  std::filesystem::path checkpoint_dir;  // empty: no checkpoints
  std::optional<std::filesystem::path> resume_from;
  std::function<void(const StepLog&)> on_step;
};

struct PretrainResult {
  std::vector<StepLog> steps;
  size_t epochs_completed = 0;
  std::filesystem::path final_checkpoint;
};

namespace detail {

inline void save_trainer_state(const std::filesystem::path& dir, size_t epochs_completed, uint64_t step,
                               uint64_t seed) {
  nlohmann::ordered_json j;
  j["epochs_completed"] = epochs_completed;
  j["step"] = step;
  j["seed"] = seed;
  io::write_file_atomic(dir / "trainer_state.json", j.dump(2) + "\n");
}

template <typename T>
std::vector<nn::NamedTensor<T>> optimizer_tensors(BertModel<T>& model, nn::AdamState<T>& st) {
  std::vector<nn::NamedTensor<T>> out;
  for (size_t i = 0; i < model.params.size(); ++i) out.push_back({"m/" + model.params[i].name, &st.m[i]});
  for (size_t i = 0; i < model.params.size(); ++i) out.push_back({"v/" + model.params[i].name, &st.v[i]});
  return out;
}

}  // namespace detail

// Trains `model` in place. Stops after config.epochs epochs or
// config.iterations optimizer steps, whichever comes first. A checkpoint with
// optimizer state is written at every epoch boundary (epoch-N/) and the final
// model goes to final/. Checkpoints carry a copy of the vocab.
inline PretrainResult pretrain(BertModel<float>& model, const std::vector<std::string>& corpus, const Vocab& vocab,
                               const PretrainOptions& opt = {}) {
  const BertConfig& cfg = model.config;
  cfg.validate();
  if (corpus.empty()) throw std::invalid_argument("cannot pretrain on an empty corpus");
  if (vocab.size() > cfg.vocab_size) {
    throw std::invalid_argument("vocab has " + std::to_string(vocab.size()) + " pieces but vocab_size is " +
                                std::to_string(cfg.vocab_size));
  }
  if (vocab.size() < cfg.vocab_size) {
    warn("vocab has " + std::to_string(vocab.size()) + " pieces, model vocab_size is " +
         std::to_string(cfg.vocab_size) + "; extra embedding rows stay unused");
  }
  const bool checkpoints = !opt.checkpoint_dir.empty();
  if (checkpoints) io::ensure_writable_dir(opt.checkpoint_dir);

  std::vector<Encoding> encoded;
  encoded.reserve(corpus.size());
  for (const auto& line : corpus) encoded.push_back(encode(line, vocab, cfg.max_len));

  nn::AdamState<float> adam;
  adam.lr = cfg.learning_rate;
  for (const auto& p : model.params) {
    adam.m.emplace_back(p->value.shape());
    adam.v.emplace_back(p->value.shape());
  }
  size_t start_epoch = 0;
  uint64_t step = 0;
  if (opt.resume_from) {
    const auto& dir = *opt.resume_from;
    // The stopping bounds may change between runs; the architecture and
    // optimization settings may not.
    auto saved = load_config(dir).to_json(), current = cfg.to_json();
    for (const char* key : {"epochs", "iterations"}) {
      saved.erase(key);
      current.erase(key);
    }
    if (saved != current) {
      throw std::invalid_argument("resume checkpoint '" + dir.string() + "' has a different model config");
    }
    nn::read_tensors(dir, "params.bin", "manifest.json", nn::named_values(model.params));
    nn::read_tensors(dir, "optimizer.bin", "optimizer_manifest.json", detail::optimizer_tensors(model, adam));
    auto state = nlohmann::json::parse(io::read_file(dir / "trainer_state.json"));
    start_epoch = state.at("epochs_completed").get<size_t>();
    step = state.at("step").get<uint64_t>();
    adam.step_count = step;
  }

  PretrainResult result;
  result.epochs_completed = start_epoch;
  const uint64_t shuffle_base = derive_seed(opt.seed, 1);
  const uint64_t mask_base = derive_seed(opt.seed, 2);
  const uint64_t dropout_base = derive_seed(opt.seed, 3);
  bool capped = step >= cfg.iterations;
  for (size_t epoch = start_epoch; epoch < cfg.epochs && !capped; ++epoch) {
    std::vector<size_t> order(encoded.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = i;
    Rng(derive_seed(shuffle_base, epoch)).shuffle(order);
    for (size_t start = 0; start < order.size(); start += cfg.batch_size) {
      if (step >= cfg.iterations) {
        capped = true;
        break;
      }
      std::vector<Encoding> chunk;
      for (size_t i = start; i < std::min(order.size(), start + cfg.batch_size); ++i) chunk.push_back(encoded[order[i]]);
      const uint64_t batch_id = epoch * ((order.size() + cfg.batch_size - 1) / cfg.batch_size) + start / cfg.batch_size;
      MlmBatch mb = mask_for_mlm(collate(std::span<const Encoding>(chunk)), cfg.mlm_probability,
                                 derive_seed(mask_base, batch_id), vocab.size());
      if (mb.num_selected() == 0) continue;
      Rng dropout_rng(derive_seed(dropout_base, batch_id));
      nn::Graph<float> g;
      auto loss = mlm_loss(g, model, mb, true, dropout_rng);
      const double loss_value = loss.value()[0];
      if (!std::isfinite(loss_value)) {
        throw std::runtime_error("non-finite MLM loss at step " + std::to_string(step + 1));
      }
      g.backward(loss);
      adam.lr = cfg.learning_rate;
      if (step < cfg.warmup_steps) {
        adam.lr *= static_cast<double>(step + 1) / static_cast<double>(cfg.warmup_steps);
      }
      nn::adam_step(model.params, adam);
      ++step;
      StepLog log{step, epoch, loss_value};
      result.steps.push_back(log);
      if (opt.on_step) opt.on_step(log);
    }
    if (capped) break;
    result.epochs_completed = epoch + 1;
    if (checkpoints) {
      io::publish_directory(opt.checkpoint_dir / ("epoch-" + std::to_string(epoch + 1)), [&](const auto& dir) {
        write_encoder_files(dir, model);
        vocab.save(dir / "vocab.txt");
        nn::write_tensors(dir, "optimizer.bin", "optimizer_manifest.json", detail::optimizer_tensors(model, adam));
        detail::save_trainer_state(dir, epoch + 1, step, opt.seed);
      });
    }
  }
  if (checkpoints) {
    result.final_checkpoint = opt.checkpoint_dir / "final";
    io::publish_directory(result.final_checkpoint, [&](const auto& dir) {
      write_encoder_files(dir, model);
      vocab.save(dir / "vocab.txt");
      detail::save_trainer_state(dir, result.epochs_completed, step, opt.seed);
    });
    std::string log = "step\tepoch\tloss\n";
    for (const auto& s : result.steps) {
      char buf[64];
      std::snprintf(buf, sizeof(buf), "%.9g", s.loss);
      log += std::to_string(s.step) + "\t" + std::to_string(s.epoch) + "\t" + buf + "\n";
    }
    io::write_file_atomic(opt.checkpoint_dir / "loss.tsv", log);
  }
  return result;
}

}  // namespace kubert
