#pragma once

#include <cstdint>
#include <cstdio>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"
#include "kubert/io.hpp"

namespace kubert {

// counts[i][j]: examples of true class i predicted as class j.
struct ConfusionMatrix {
  std::vector<std::string> labels;
  std::vector<std::vector<uint64_t>> counts;

  explicit ConfusionMatrix(std::vector<std::string> label_order = {})
      : labels(std::move(label_order)), counts(labels.size(), std::vector<uint64_t>(labels.size(), 0)) {}

  size_t num_classes() const { return labels.size(); }

  uint64_t total() const {
    uint64_t n = 0;
    for (const auto& row : counts)
      for (uint64_t c : row) n += c;
    return n;
  }

  uint64_t trace() const {
    uint64_t n = 0;
    for (size_t i = 0; i < counts.size(); ++i) n += counts[i][i];
    return n;
  }

  void add(size_t truth, size_t pred) {
    if (truth >= num_classes() || pred >= num_classes()) {
      throw std::out_of_range("confusion: class index out of range");
    }
    ++counts[truth][pred];
  }

  bool operator==(const ConfusionMatrix&) const = default;
};

inline ConfusionMatrix confusion(const std::vector<std::string>& truths, const std::vector<std::string>& preds,
                                 const std::vector<std::string>& label_order) {
  if (truths.size() != preds.size()) {
    throw std::invalid_argument("confusion: " + std::to_string(truths.size()) + " truths but " +
                                std::to_string(preds.size()) + " predictions");
  }
  ConfusionMatrix cm(label_order);
  auto index = [&](const std::string& l) {
    for (size_t i = 0; i < label_order.size(); ++i)
      if (label_order[i] == l) return i;
    throw std::invalid_argument("confusion: unknown label '" + l + "'");
  };
  for (size_t k = 0; k < truths.size(); ++k) cm.add(index(truths[k]), index(preds[k]));
  return cm;
}

struct ClassMetrics {
  std::string label;
  double precision = 0, recall = 0, f1 = 0;
  uint64_t support = 0;
  bool zero_division = false;  // precision or recall hit 0/0
};

struct EvalReport {
  double accuracy = 0;
  std::vector<ClassMetrics> per_class;
  double weighted_f1 = 0;  // support-weighted mean of per-class F1
  double micro_f1 = 0;     // F1 of pooled TP/FP/FN
  uint64_t total = 0;

  nlohmann::ordered_json to_json() const {
    nlohmann::ordered_json j;
    j["accuracy"] = accuracy;
    nlohmann::ordered_json pc = nlohmann::ordered_json::object();
    for (const auto& c : per_class) {
      pc[c.label] = {{"precision", c.precision}, {"recall", c.recall}, {"f1", c.f1}, {"support", c.support}};
    }
    j["per_class"] = pc;
    j["weighted_f1"] = weighted_f1;
    j["micro_f1"] = micro_f1;
    return j;
  }

  std::string to_table() const {
    std::string out;
    char buf[160];
    std::snprintf(buf, sizeof(buf), "%-12s %9s %9s %9s %9s\n", "label", "precision", "recall", "f1", "support");
    out += buf;
    for (const auto& c : per_class) {
      std::snprintf(buf, sizeof(buf), "%-12s %9.4f %9.4f %9.4f %9llu%s\n", c.label.c_str(), c.precision, c.recall,
                    c.f1, static_cast<unsigned long long>(c.support), c.zero_division ? "  (0/0)" : "");
      out += buf;
    }
    std::snprintf(buf, sizeof(buf), "accuracy     %9.4f\nweighted f1  %9.4f\nmicro f1     %9.4f\n", accuracy,
                  weighted_f1, micro_f1);
    return out + buf;
  }
};

namespace detail {

inline double ratio(uint64_t num, uint64_t den, bool& undefined) {
  if (den == 0) {
    undefined = true;
    return 0.0;
  }
  return static_cast<double>(num) / static_cast<double>(den);
}

inline double f1_score(double p, double r) { return p + r > 0 ? 2 * p * r / (p + r) : 0.0; }

}  // namespace detail

inline EvalReport report(const ConfusionMatrix& cm) {
  EvalReport rep;
  const size_t C = cm.num_classes();
  rep.total = cm.total();
  if (rep.total == 0) warn("evaluation set is empty; all metrics reported as 0");
  uint64_t pooled_tp = 0, pooled_fp = 0, pooled_fn = 0;
  for (size_t c = 0; c < C; ++c) {
    uint64_t row = 0, col = 0;
    for (size_t k = 0; k < C; ++k) {
      row += cm.counts[c][k];
      col += cm.counts[k][c];
    }
    const uint64_t tp = cm.counts[c][c];
    ClassMetrics m;
    m.label = cm.labels[c];
    m.support = row;
    bool undefined = false;
    m.precision = detail::ratio(tp, col, undefined);
    m.recall = detail::ratio(tp, row, undefined);
    m.zero_division = undefined;
    m.f1 = detail::f1_score(m.precision, m.recall);
    rep.per_class.push_back(m);
    pooled_tp += tp;
    pooled_fp += col - tp;
    pooled_fn += row - tp;
  }
  bool unused = false;
  rep.accuracy = detail::ratio(cm.trace(), rep.total, unused);
  for (const auto& m : rep.per_class) {
    rep.weighted_f1 += detail::ratio(m.support, rep.total, unused) * m.f1;
  }
  const double micro_p = detail::ratio(pooled_tp, pooled_tp + pooled_fp, unused);
  const double micro_r = detail::ratio(pooled_tp, pooled_tp + pooled_fn, unused);
  rep.micro_f1 = detail::f1_score(micro_p, micro_r);
  return rep;
}

}  // namespace kubert
