#pragma once

// Central-difference gradient verification. Run with T = double.

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "kubert/nn/graph.hpp"
#include "kubert/random.hpp"

namespace kubert::nn {

struct GradCheckReport {
  double max_rel_error = 0.0;
  size_t checked = 0;
  std::string worst;  // "<param>[<index>]"
  bool passed = true;
};

struct GradCheckOptions {
  double tolerance = 1e-4;
  double step = 1e-3;
  size_t max_per_param = 64;  // 0 checks every element
  uint64_t seed = 0;
};

inline double relative_error(double analytic, double numeric) {
  return std::abs(analytic - numeric) / std::max(1e-8, std::abs(analytic) + std::abs(numeric));
}

// loss_fn(Graph<double>&) must rebuild the same computation every call and
// return a scalar Var.
template <typename LossFn>
GradCheckReport grad_check(ParameterSet<double>& params, LossFn&& loss_fn, const GradCheckOptions& opt = {}) {
  params.zero_grad();
  {
    Graph<double> g;
    auto loss = loss_fn(g);
    g.backward(loss);
  }
  std::vector<Tensor<double>> analytic;
  for (const auto& p : params) analytic.push_back(p->grad);
  params.zero_grad();

  auto eval = [&]() {
    Graph<double> g(false);
    return loss_fn(g).value()[0];
  };

  Rng rng(opt.seed);
  GradCheckReport report;
  for (size_t pi = 0; pi < params.size(); ++pi) {
    Parameter<double>& p = params[pi];
    if (!p.trainable) continue;
    std::vector<size_t> idx(p.value.size());
    for (size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    if (opt.max_per_param && idx.size() > opt.max_per_param) {
      rng.shuffle(idx);
      idx.resize(opt.max_per_param);
    }
    for (size_t i : idx) {
      const double orig = p.value[i];
      p.value[i] = orig + opt.step;
      const double up = eval();
      p.value[i] = orig - opt.step;
      const double down = eval();
      p.value[i] = orig;
      const double numeric = (up - down) / (2 * opt.step);
      const double err = relative_error(analytic[pi][i], numeric);
      ++report.checked;
      if (err > report.max_rel_error || !std::isfinite(err)) {
        report.max_rel_error = std::isfinite(err) ? err : INFINITY;
        report.worst = p.name + "[" + std::to_string(i) + "]";
      }
    }
  }
  report.passed = report.max_rel_error < opt.tolerance;
  return report;
}

}  // namespace kubert::nn
