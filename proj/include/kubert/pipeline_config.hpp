#pragma once

// Pipeline configuration file (JSON):
// {
//   "seed": 42,
//   "normalizer": {"rules": "rules.txt"},
//   "tokenizer": {"vocab_size": 50000, "min_freq": 2},
//   "bert": { BertConfig fields },
//   "train": { TrainConfig fields },
//   "paths": {"corpus": ..., "labeled": ..., "vocab": ..., "checkpoint_dir": ..., "encoder": ..., "model_dir": ...}
// }
// Every section is optional; unknown keys anywhere are rejected.

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>

#include "json.hpp"
#include "kubert/bert.hpp"
#include "kubert/classifiers.hpp"
#include "kubert/io.hpp"

namespace kubert {

struct PipelineConfig {
  uint64_t seed = 42;
  std::optional<std::string> rules_path;
  size_t vocab_size = 50000;
  size_t min_freq = 2;
  std::optional<BertConfig> bert;
  TrainConfig train;
  std::map<std::string, std::string> paths;

  std::optional<std::string> path(const std::string& key) const {
    auto it = paths.find(key);
    if (it == paths.end()) return std::nullopt;
    return it->second;
  }

  static PipelineConfig from_json(const nlohmann::json& j) {
    if (!j.is_object()) throw std::invalid_argument("config must be a JSON object");
    auto check_keys = [](const nlohmann::json& obj, const std::string& section, const std::set<std::string>& known) {
      if (!obj.is_object()) throw std::invalid_argument("config: section '" + section + "' must be an object");
      for (const auto& [k, v] : obj.items()) {
        if (!known.count(k)) {
          throw std::invalid_argument("config: unknown key '" + (section.empty() ? k : section + "." + k) + "'");
        }
      }
    };
    check_keys(j, "", {"seed", "normalizer", "tokenizer", "bert", "train", "paths"});
    PipelineConfig c;
    try {
      c.seed = j.value("seed", c.seed);
      if (j.contains("normalizer")) {
        const auto& n = j.at("normalizer");
        check_keys(n, "normalizer", {"rules"});
        if (n.contains("rules")) c.rules_path = n.at("rules").get<std::string>();
      }
      if (j.contains("tokenizer")) {
        const auto& t = j.at("tokenizer");
        check_keys(t, "tokenizer", {"vocab_size", "min_freq"});
        c.vocab_size = t.value("vocab_size", c.vocab_size);
        c.min_freq = t.value("min_freq", c.min_freq);
      }
      if (j.contains("paths")) {
        const auto& p = j.at("paths");
        check_keys(p, "paths", {"corpus", "labeled", "vocab", "checkpoint_dir", "encoder", "model_dir"});
        for (const auto& [k, v] : p.items()) c.paths[k] = v.get<std::string>();
      }
    } catch (const nlohmann::json::exception& e) {
      throw std::invalid_argument(std::string("config: ") + e.what());
    }
    if (j.contains("bert")) c.bert = BertConfig::from_json(j.at("bert"));
    if (j.contains("train")) {
      c.train = TrainConfig::from_json(j.at("train"));
      if (!j.at("train").contains("seed")) c.train.seed = c.seed;
    } else {
      c.train.seed = c.seed;
    }
    if (c.min_freq == 0) throw std::invalid_argument("config: tokenizer.min_freq must be at least 1");
    return c;
  }

  static PipelineConfig load(const std::filesystem::path& path) {
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(io::read_file(path));
    } catch (const nlohmann::json::exception& e) {
      throw std::invalid_argument("config '" + path.string() + "' is not valid JSON: " + e.what());
    }
    return from_json(j);
  }
};

}  // namespace kubert
