#pragma once

// Finite-difference cases for every op and the composed blocks, in double.

#include <functional>
#include <string>
#include <vector>

#include "kubert/kubert.hpp"
#include "kubert/nn/grad_check.hpp"

namespace kubert::fixtures {

using nn::GradCheckReport;
using DParams = nn::ParameterSet<double>;
using DGraph = nn::Graph<double>;
using DVar = nn::Var<double>;

struct GradCase {
  std::string name;
  std::function<GradCheckReport()> run;
};

inline nn::Tensor<double> random_tensor(nn::Shape shape, Rng& rng, double scale = 1.0, double min_abs = 0.0) {
  nn::Tensor<double> t(std::move(shape));
  for (auto& v : t.values()) {
    do {
      v = rng.normal() * scale;
    } while (std::abs(v) < min_abs);
  }
  return t;
}

// Scalar readout sum(y * R) with a fixed random R, so every output element
// carries a distinct upstream gradient.
inline DVar readout(DGraph& g, const DVar& y, uint64_t seed = 99) {
  Rng rng(seed);
  return nn::sum(nn::mul(y, g.constant(random_tensor(y.shape(), rng))));
}

inline GradCheckReport check(DParams& ps, const std::function<DVar(DGraph&)>& f) {
  nn::GradCheckOptions opt;
  opt.tolerance = 1e-4;
  opt.step = 1e-3;
  return nn::grad_check(ps, f, opt);
}

inline std::vector<GradCase> grad_cases() {
  std::vector<GradCase> cases;
  auto unary_case = [&](std::string name, std::function<DVar(const DVar&)> op, double min_abs = 0.0) {
    cases.push_back({name, [op, min_abs] {
                       Rng rng(1);
                       DParams ps;
                       auto& x = ps.add("x", random_tensor({3, 4}, rng, 1.0, min_abs));
                       return check(ps, [&](DGraph& g) { return readout(g, op(g.param(x))); });
                     }});
  };
  auto binary_case = [&](std::string name, nn::Shape sa, nn::Shape sb,
                         std::function<DVar(const DVar&, const DVar&)> op) {
    cases.push_back({name, [=] {
                       Rng rng(2);
                       DParams ps;
                       auto& a = ps.add("a", random_tensor(sa, rng));
                       auto& b = ps.add("b", random_tensor(sb, rng));
                       return check(ps, [&](DGraph& g) { return readout(g, op(g.param(a), g.param(b))); });
                     }});
  };

  binary_case("matmul", {3, 4}, {4, 5}, [](const DVar& a, const DVar& b) { return nn::matmul(a, b); });
  binary_case("matmul_nt", {3, 4}, {5, 4}, [](const DVar& a, const DVar& b) { return nn::matmul_nt(a, b); });
  binary_case("add", {3, 4}, {3, 4}, [](const DVar& a, const DVar& b) { return nn::add(a, b); });
  binary_case("add_bias", {3, 4}, {4}, [](const DVar& a, const DVar& b) { return nn::add_bias(a, b); });
  binary_case("mul", {3, 4}, {3, 4}, [](const DVar& a, const DVar& b) { return nn::mul(a, b); });
  binary_case("concat", {3, 2}, {3, 5}, [](const DVar& a, const DVar& b) { return nn::concat(a, b); });
  unary_case("scale", [](const DVar& x) { return nn::scale(x, 2.5); });
  unary_case("relu", [](const DVar& x) { return nn::relu(x); }, 0.05);
  unary_case("tanh", [](const DVar& x) { return nn::tanh(x); });
  unary_case("sigmoid", [](const DVar& x) { return nn::sigmoid(x); });
  unary_case("gelu", [](const DVar& x) { return nn::gelu(x); });
  unary_case("softmax", [](const DVar& x) { return nn::softmax(x); });
  unary_case("slice", [](const DVar& x) { return nn::slice(x, 1, 3); });
  unary_case("sum", [](const DVar& x) { return nn::scale(nn::sum(nn::mul(x, x)), 0.5); });
  unary_case("gather_rows", [](const DVar& x) {
    const std::vector<size_t> rows = {2, 0, 2};
    return nn::gather_rows(x, std::span<const size_t>(rows));
  });
  unary_case("dropout", [](const DVar& x) {
    Rng rng(5);
    return nn::dropout(x, 0.3, rng, true);
  });

  cases.push_back({"layer_norm", [] {
                     Rng rng(3);
                     DParams ps;
                     auto& x = ps.add("x", random_tensor({3, 6}, rng));
                     auto& gamma = ps.add("gamma", random_tensor({6}, rng));
                     auto& beta = ps.add("beta", random_tensor({6}, rng));
                     return check(ps, [&](DGraph& g) {
                       return readout(g, nn::layer_norm(g.param(x), g.param(gamma), g.param(beta)));
                     });
                   }});
  cases.push_back({"embedding", [] {
                     Rng rng(4);
                     DParams ps;
                     auto& table = ps.add("table", random_tensor({6, 3}, rng));
                     const std::vector<int32_t> ids = {1, 4, 1, 0};
                     return check(ps, [&](DGraph& g) {
                       return readout(g, nn::embedding(g.param(table), std::span<const int32_t>(ids)));
                     });
                   }});
  cases.push_back({"cross_entropy", [] {
                     Rng rng(6);
                     DParams ps;
                     auto& logits = ps.add("logits", random_tensor({4, 5}, rng));
                     const std::vector<int32_t> targets = {2, nn::kIgnoreIndex, 0, 4};
                     return check(ps, [&](DGraph& g) {
                       return nn::cross_entropy(g.param(logits), std::span<const int32_t>(targets));
                     });
                   }});
  cases.push_back({"interleave_steps", [] {
                     Rng rng(7);
                     DParams ps;
                     auto& a = ps.add("a", random_tensor({2, 3}, rng));
                     auto& b = ps.add("b", random_tensor({2, 3}, rng));
                     return check(ps, [&](DGraph& g) {
                       return readout(g, nn::interleave_steps(std::vector<DVar>{g.param(a), g.param(b)}));
                     });
                   }});
  cases.push_back({"attention", [] {
                     Rng rng(8);
                     DParams ps;
                     auto& q = ps.add("q", random_tensor({6, 4}, rng));
                     auto& k = ps.add("k", random_tensor({6, 4}, rng));
                     auto& v = ps.add("v", random_tensor({6, 4}, rng));
                     const std::vector<int32_t> mask = {1, 1, 1, 1, 1, 0};
                     return check(ps, [&](DGraph& g) {
                       return readout(g, nn::attention(g.param(q), g.param(k), g.param(v),
                                                       std::span<const int32_t>(mask), 2, 3, 2));
                     });
                   }});

  cases.push_back({"encoder_layer", [] {
                     BertConfig c;
                     c.hidden_size = 8;
                     c.num_attention_heads = 2;
                     c.num_hidden_layers = 1;
                     c.vocab_size = 10;
                     c.max_position = 4;
                     c.max_len = 4;
                     BertModel<double> m = allocate_model<double>(c, 21);
                     Rng rng(9);
                     // Larger weights than the 0.02 init so every path carries signal.
                     for (auto& p : m.params)
                       if (p->value.rank() == 2) p->value = random_tensor(p->value.shape(), rng, 0.3);
                     auto& x = m.params.add("input", random_tensor({2 * 3, 8}, rng));
                     Batch batch;
                     batch.batch = 2;
                     batch.seq = 3;
                     batch.attention_mask = {1, 1, 1, 1, 1, 0};
                     return check(m.params, [&](DGraph& g) {
                       Rng drop(11);
                       return readout(g, encoder_layer(g, m.layers[0], g.param(x), batch, 2, 0.1, true, drop));
                     });
                   }});

  cases.push_back({"bert_mlm_loss", [] {
                     BertConfig c;
                     c.hidden_size = 8;
                     c.num_attention_heads = 2;
                     c.num_hidden_layers = 2;
                     c.vocab_size = 12;
                     c.max_position = 5;
                     c.max_len = 5;
                     BertModel<double> m = allocate_model<double>(c, 22);
                     Rng rng(10);
                     for (auto& p : m.params)
                       if (p->value.rank() == 2) p->value = random_tensor(p->value.shape(), rng, 0.3);
                     Batch batch;
                     batch.batch = 2;
                     batch.seq = 4;
                     batch.ids = {2, 7, Vocab::kMask, 3, 2, 9, 3, 0};
                     batch.attention_mask = {1, 1, 1, 1, 1, 1, 1, 0};
                     batch.segment_ids.assign(8, 0);
                     const std::vector<size_t> rows = {1, 2, 5};
                     const std::vector<int32_t> targets = {7, 11, 9};
                     return check(m.params, [&](DGraph& g) {
                       Rng drop(12);
                       auto out = forward(g, m, batch, true, drop);
                       auto logits = mlm_logits(g, m, out.sequence, std::span<const size_t>(rows));
                       return nn::cross_entropy(logits, std::span<const int32_t>(targets));
                     });
                   }});

  cases.push_back({"bilstm_layer", [] {
                     Rng init(13);
                     auto head = BiLstmHead<double>::create(4, 3, 1, 3, &init);
                     Rng rng(14);
                     auto& x = head.params.add("input", random_tensor({2 * 4, 4}, rng));
                     const std::vector<int32_t> mask = {1, 1, 1, 1, 1, 1, 0, 0};
                     const std::vector<int32_t> targets = {0, 2};
                     return check(head.params, [&](DGraph& g) {
                       Rng drop(15);
                       auto logits = head.forward(g, g.param(x), 2, 4, std::span<const int32_t>(mask), 0.3, drop, true);
                       return nn::cross_entropy(logits, std::span<const int32_t>(targets));
                     });
                   }});

  cases.push_back({"mlp_head", [] {
                     Rng init(16);
                     auto head = MlpHead<double>::create(6, {5, 4}, 3, &init);
                     Rng rng(17);
                     auto& x = head.params.add("input", random_tensor({4, 6}, rng));
                     const std::vector<int32_t> targets = {0, 2, 1, 1};
                     return check(head.params, [&](DGraph& g) {
                       Rng drop(18);
                       auto logits = head.forward(g, g.param(x), 0.3, drop, true);
                       return nn::cross_entropy(logits, std::span<const int32_t>(targets));
                     });
                   }});

  cases.push_back({"finetune_head", [] {
                     Rng init(19);
                     auto head = LinearHead<double>::create(6, 3, &init);
                     Rng rng(20);
                     for (auto& p : head.params) p->value = random_tensor(p->value.shape(), rng, 0.5);
                     auto& x = head.params.add("input", random_tensor({4, 6}, rng));
                     const std::vector<int32_t> targets = {0, 2, 1, 1};
                     return check(head.params, [&](DGraph& g) {
                       Rng drop(21);
                       auto logits = head.forward(g, g.param(x), 0.3, drop, true);
                       return nn::cross_entropy(logits, std::span<const int32_t>(targets));
                     });
                   }});
  return cases;
}

}  // namespace kubert::fixtures
