#pragma once

// Differentiable ops over Var<T>. Shape errors throw std::invalid_argument
// naming the op and the offending shapes.

#include <Eigen/Core>

#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "kubert/nn/graph.hpp"
#include "kubert/random.hpp"

namespace kubert::nn {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<RowMat<T>>;
template <typename T>
using ConstMatMap = Eigen::Map<const RowMat<T>>;
template <typename T>
using StridedMap = Eigen::Map<RowMat<T>, 0, Eigen::OuterStride<>>;
template <typename T>
using ConstStridedMap = Eigen::Map<const RowMat<T>, 0, Eigen::OuterStride<>>;

inline constexpr int32_t kIgnoreIndex = -100;

namespace detail {

[[noreturn]] inline void shape_error(const char* op, const Shape& a, const Shape& b) {
  throw std::invalid_argument(std::string(op) + ": incompatible shapes " + shape_str(a) + " and " +
                              shape_str(b));
}

template <typename T>
MatMap<T> mat(Tensor<T>& t) {
  return MatMap<T>(t.data(), static_cast<Eigen::Index>(t.rows()), static_cast<Eigen::Index>(t.cols()));
}
template <typename T>
ConstMatMap<T> mat(const Tensor<T>& t) {
  return ConstMatMap<T>(t.data(), static_cast<Eigen::Index>(t.rows()), static_cast<Eigen::Index>(t.cols()));
}

inline Shape with_last(Shape s, size_t last) {
  if (s.empty()) s.push_back(last);
  else s.back() = last;
  return s;
}

// Elementwise unary op: out = f(x), dx += dy * df(x, y).
template <typename T, typename F, typename DF>
Var<T> unary(const Var<T>& x, F f, DF df) {
  const Tensor<T>& xv = x.value();
  Tensor<T> out(xv.shape());
  for (size_t i = 0; i < xv.size(); ++i) out[i] = f(xv[i]);
  Node<T>* xn = x.node();
  return x.graph().emit(
      std::move(out),
      [xn, df](Node<T>& self) {
        const Tensor<T>& xv = xn->value();
        const Tensor<T>& yv = self.value();
        const Tensor<T>& dy = self.grad();
        Tensor<T>& dx = xn->grad();
        for (size_t i = 0; i < dx.size(); ++i) dx[i] += dy[i] * df(xv[i], yv[i]);
      },
      x);
}

}  // namespace detail

// [.., K] x [K, N] -> [.., N]
template <typename T>
Var<T> matmul(const Var<T>& a, const Var<T>& b) {
  const Tensor<T>& av = a.value();
  const Tensor<T>& bv = b.value();
  if (bv.rank() != 2 || av.cols() != bv.dim(0)) detail::shape_error("matmul", av.shape(), bv.shape());
  Tensor<T> out(detail::with_last(av.shape(), bv.dim(1)));
  detail::mat(out).noalias() = detail::mat(av) * detail::mat(bv);
  Node<T>* an = a.node();
  Node<T>* bn = b.node();
  return a.graph().emit(
      std::move(out),
      [an, bn](Node<T>& self) {
        auto dy = detail::mat(static_cast<const Tensor<T>&>(self.grad()));
        if (an->requires_grad) detail::mat(an->grad()).noalias() += dy * detail::mat(bn->value()).transpose();
        if (bn->requires_grad) detail::mat(bn->grad()).noalias() += detail::mat(an->value()).transpose() * dy;
      },
      a, b);
}

// [.., K] x [N, K]^T -> [.., N]
template <typename T>
Var<T> matmul_nt(const Var<T>& a, const Var<T>& b) {
  const Tensor<T>& av = a.value();
  const Tensor<T>& bv = b.value();
  if (bv.rank() != 2 || av.cols() != bv.dim(1)) detail::shape_error("matmul_nt", av.shape(), bv.shape());
  Tensor<T> out(detail::with_last(av.shape(), bv.dim(0)));
  detail::mat(out).noalias() = detail::mat(av) * detail::mat(bv).transpose();
  Node<T>* an = a.node();
  Node<T>* bn = b.node();
  return a.graph().emit(
      std::move(out),
      [an, bn](Node<T>& self) {
        auto dy = detail::mat(static_cast<const Tensor<T>&>(self.grad()));
        if (an->requires_grad) detail::mat(an->grad()).noalias() += dy * detail::mat(bn->value());
        if (bn->requires_grad) detail::mat(bn->grad()).noalias() += dy.transpose() * detail::mat(an->value());
      },
      a, b);
}

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  if (a.shape() != b.shape()) detail::shape_error("add", a.shape(), b.shape());
  Tensor<T> out = a.value();
  const Tensor<T>& bv = b.value();
  for (size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
  Node<T>* an = a.node();
  Node<T>* bn = b.node();
  return a.graph().emit(
      std::move(out),
      [an, bn](Node<T>& self) {
        const Tensor<T>& dy = self.grad();
        for (Node<T>* in : {an, bn}) {
          if (!in->requires_grad) continue;
          Tensor<T>& dx = in->grad();
          for (size_t i = 0; i < dx.size(); ++i) dx[i] += dy[i];
        }
      },
      a, b);
}

// [.., N] + [N], broadcast over rows.
template <typename T>
Var<T> add_bias(const Var<T>& a, const Var<T>& bias) {
  const Tensor<T>& av = a.value();
  const Tensor<T>& bv = bias.value();
  if (bv.rank() != 1 || bv.size() != av.cols()) detail::shape_error("add_bias", av.shape(), bv.shape());
  Tensor<T> out = av;
  const size_t rows = av.rows(), cols = av.cols();
  for (size_t r = 0; r < rows; ++r)
    for (size_t c = 0; c < cols; ++c) out[r * cols + c] += bv[c];
  Node<T>* an = a.node();
  Node<T>* bn = bias.node();
  return a.graph().emit(
      std::move(out),
      [an, bn, rows, cols](Node<T>& self) {
        const Tensor<T>& dy = self.grad();
        if (an->requires_grad) {
          Tensor<T>& da = an->grad();
          for (size_t i = 0; i < da.size(); ++i) da[i] += dy[i];
        }
        if (bn->requires_grad) {
          Tensor<T>& db = bn->grad();
          for (size_t r = 0; r < rows; ++r)
            for (size_t c = 0; c < cols; ++c) db[c] += dy[r * cols + c];
        }
      },
      a, bias);
}

template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  if (a.shape() != b.shape()) detail::shape_error("mul", a.shape(), b.shape());
  Tensor<T> out = a.value();
  const Tensor<T>& bv = b.value();
  for (size_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
  Node<T>* an = a.node();
  Node<T>* bn = b.node();
  return a.graph().emit(
      std::move(out),
      [an, bn](Node<T>& self) {
        const Tensor<T>& dy = self.grad();
        if (an->requires_grad) {
          Tensor<T>& da = an->grad();
          const Tensor<T>& bv = bn->value();
          for (size_t i = 0; i < da.size(); ++i) da[i] += dy[i] * bv[i];
        }
        if (bn->requires_grad) {
          Tensor<T>& db = bn->grad();
          const Tensor<T>& av = an->value();
          for (size_t i = 0; i < db.size(); ++i) db[i] += dy[i] * av[i];
        }
      },
      a, b);
}

template <typename T>
Var<T> scale(const Var<T>& x, T s) {
  return detail::unary(x, [s](T v) { return v * s; }, [s](T, T) { return s; });
}

template <typename T>
Var<T> relu(const Var<T>& x) {
  return detail::unary(
      x, [](T v) { return v > T(0) ? v : T(0); }, [](T v, T) { return v > T(0) ? T(1) : T(0); });
}

template <typename T>
Var<T> tanh(const Var<T>& x) {
  return detail::unary(x, [](T v) { return std::tanh(v); }, [](T, T y) { return T(1) - y * y; });
}

template <typename T>
Var<T> sigmoid(const Var<T>& x) {
  return detail::unary(
      x, [](T v) { return T(1) / (T(1) + std::exp(-v)); }, [](T, T y) { return y * (T(1) - y); });
}

// tanh approximation: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))
template <typename T>
Var<T> gelu(const Var<T>& x) {
  constexpr T kC = T(0.7978845608028654);  // sqrt(2/pi)
  constexpr T kA = T(0.044715);
  return detail::unary(
      x,
      [](T v) { return T(0.5) * v * (T(1) + std::tanh(kC * (v + kA * v * v * v))); },
      [](T v, T) {
        const T t = std::tanh(kC * (v + kA * v * v * v));
        return T(0.5) * (T(1) + t) + T(0.5) * v * (T(1) - t * t) * kC * (T(1) + T(3) * kA * v * v);
      });
}

// Softmax over the last axis.
template <typename T>
Var<T> softmax(const Var<T>& x) {
  const Tensor<T>& xv = x.value();
  Tensor<T> out(xv.shape());
  const size_t rows = xv.rows(), cols = xv.cols();
  for (size_t r = 0; r < rows; ++r) {
    const T* in = xv.data() + r * cols;
    T* o = out.data() + r * cols;
    T mx = -std::numeric_limits<T>::infinity();
    for (size_t c = 0; c < cols; ++c) mx = std::max(mx, in[c]);
    T sum = 0;
    for (size_t c = 0; c < cols; ++c) sum += (o[c] = std::exp(in[c] - mx));
    for (size_t c = 0; c < cols; ++c) o[c] /= sum;
  }
  Node<T>* xn = x.node();
  return x.graph().emit(
      std::move(out),
      [xn, rows, cols](Node<T>& self) {
        const Tensor<T>& y = self.value();
        const Tensor<T>& dy = self.grad();
        Tensor<T>& dx = xn->grad();
        for (size_t r = 0; r < rows; ++r) {
          T dot = 0;
          for (size_t c = 0; c < cols; ++c) dot += dy[r * cols + c] * y[r * cols + c];
          for (size_t c = 0; c < cols; ++c) dx[r * cols + c] += y[r * cols + c] * (dy[r * cols + c] - dot);
        }
      },
      x);
}

// Normalizes each row, then applies learned scale and shift.
template <typename T>
Var<T> layer_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, T eps = T(1e-12)) {
  const Tensor<T>& xv = x.value();
  const size_t rows = xv.rows(), cols = xv.cols();
  if (gamma.value().size() != cols || beta.value().size() != cols) {
    detail::shape_error("layer_norm", xv.shape(), gamma.shape());
  }
  Tensor<T> out(xv.shape());
  auto xhat = std::make_shared<std::vector<T>>(xv.size());
  auto rstd = std::make_shared<std::vector<T>>(rows);
  const Tensor<T>& g = gamma.value();
  const Tensor<T>& b = beta.value();
  for (size_t r = 0; r < rows; ++r) {
    const T* in = xv.data() + r * cols;
    T mean = 0;
    for (size_t c = 0; c < cols; ++c) mean += in[c];
    mean /= T(cols);
    T var = 0;
    for (size_t c = 0; c < cols; ++c) var += (in[c] - mean) * (in[c] - mean);
    var /= T(cols);
    const T rs = T(1) / std::sqrt(var + eps);
    (*rstd)[r] = rs;
    for (size_t c = 0; c < cols; ++c) {
      const T h = (in[c] - mean) * rs;
      (*xhat)[r * cols + c] = h;
      out[r * cols + c] = h * g[c] + b[c];
    }
  }
  Node<T>* xn = x.node();
  Node<T>* gn = gamma.node();
  Node<T>* bn = beta.node();
  return x.graph().emit(
      std::move(out),
      [xn, gn, bn, xhat, rstd, rows, cols](Node<T>& self) {
        const Tensor<T>& dy = self.grad();
        const Tensor<T>& g = gn->value();
        if (gn->requires_grad) {
          Tensor<T>& dg = gn->grad();
          for (size_t r = 0; r < rows; ++r)
            for (size_t c = 0; c < cols; ++c) dg[c] += dy[r * cols + c] * (*xhat)[r * cols + c];
        }
        if (bn->requires_grad) {
          Tensor<T>& db = bn->grad();
          for (size_t r = 0; r < rows; ++r)
            for (size_t c = 0; c < cols; ++c) db[c] += dy[r * cols + c];
        }
        if (xn->requires_grad) {
          Tensor<T>& dx = xn->grad();
          for (size_t r = 0; r < rows; ++r) {
            T mean_d = 0, mean_dx = 0;
            for (size_t c = 0; c < cols; ++c) {
              const T d = dy[r * cols + c] * g[c];
              mean_d += d;
              mean_dx += d * (*xhat)[r * cols + c];
            }
            mean_d /= T(cols);
            mean_dx /= T(cols);
            for (size_t c = 0; c < cols; ++c) {
              const T d = dy[r * cols + c] * g[c];
              dx[r * cols + c] += (*rstd)[r] * (d - mean_d - (*xhat)[r * cols + c] * mean_dx);
            }
          }
        }
      },
      x, gamma, beta);
}

// Inverted dropout: kept activations are scaled by 1/(1-rate). Identity when
// not training.
template <typename T>
Var<T> dropout(const Var<T>& x, double rate, Rng& rng, bool train) {
  if (!(rate >= 0.0 && rate < 1.0)) {
    throw std::invalid_argument("dropout: rate must be in [0,1), got " + std::to_string(rate));
  }
  if (!train || rate == 0.0) return x;
  const Tensor<T>& xv = x.value();
  auto keep = std::make_shared<Tensor<T>>(xv.shape());
  const T kept_scale = T(1.0 / (1.0 - rate));
  Tensor<T> out(xv.shape());
  for (size_t i = 0; i < xv.size(); ++i) {
    (*keep)[i] = rng.uniform() >= rate ? kept_scale : T(0);
    out[i] = xv[i] * (*keep)[i];
  }
  Node<T>* xn = x.node();
  return x.graph().emit(
      std::move(out),
      [xn, keep](Node<T>& self) {
        const Tensor<T>& dy = self.grad();
        Tensor<T>& dx = xn->grad();
        for (size_t i = 0; i < dx.size(); ++i) dx[i] += dy[i] * (*keep)[i];
      },
      x);
}

// Rows of table [V, H] selected by ids -> [n, H].
template <typename T>
Var<T> embedding(const Var<T>& table, std::span<const int32_t> ids) {
  const Tensor<T>& tv = table.value();
  if (tv.rank() != 2) detail::shape_error("embedding", tv.shape(), Shape{ids.size()});
  const size_t vocab = tv.dim(0), h = tv.dim(1);
  Tensor<T> out(Shape{ids.size(), h});
  for (size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<size_t>(ids[i]) >= vocab) {
      throw std::out_of_range("embedding: id " + std::to_string(ids[i]) + " out of range for table " +
                              shape_str(tv.shape()));
    }
    std::copy_n(tv.data() + static_cast<size_t>(ids[i]) * h, h, out.data() + i * h);
  }
  Node<T>* tn = table.node();
  std::vector<int32_t> idx(ids.begin(), ids.end());
  return table.graph().emit(
      std::move(out),
      [tn, idx = std::move(idx), h](Node<T>& self) {
        const Tensor<T>& dy = self.grad();
        Tensor<T>& dt = tn->grad();
        for (size_t i = 0; i < idx.size(); ++i) {
          T* row = dt.data() + static_cast<size_t>(idx[i]) * h;
          for (size_t c = 0; c < h; ++c) row[c] += dy[i * h + c];
        }
      },
      table);
}

// Mean softmax cross-entropy over rows whose target is not ignore_index.
// With no counted rows the loss is 0.
template <typename T>
Var<T> cross_entropy(const Var<T>& logits, std::span<const int32_t> targets,
                     int32_t ignore_index = kIgnoreIndex) {
  const Tensor<T>& lv = logits.value();
  const size_t rows = lv.rows(), cols = lv.cols();
  if (targets.size() != rows) detail::shape_error("cross_entropy", lv.shape(), Shape{targets.size()});
  auto probs = std::make_shared<Tensor<T>>(Shape{rows, cols});
  size_t counted = 0;
  T total = 0;
  for (size_t r = 0; r < rows; ++r) {
    const int32_t t = targets[r];
    if (t == ignore_index) continue;
    if (t < 0 || static_cast<size_t>(t) >= cols) {
      throw std::out_of_range("cross_entropy: target " + std::to_string(t) + " out of range for " +
                              std::to_string(cols) + " classes");
    }
    const T* in = lv.data() + r * cols;
    T mx = -std::numeric_limits<T>::infinity();
    for (size_t c = 0; c < cols; ++c) mx = std::max(mx, in[c]);
    T sum = 0;
    for (size_t c = 0; c < cols; ++c) sum += ((*probs)[r * cols + c] = std::exp(in[c] - mx));
    for (size_t c = 0; c < cols; ++c) (*probs)[r * cols + c] /= sum;
    total += std::log(sum) + mx - in[t];
    ++counted;
  }
  const T loss = counted ? total / T(counted) : T(0);
  Node<T>* ln = logits.node();
  std::vector<int32_t> tg(targets.begin(), targets.end());
  return logits.graph().emit(
      Tensor<T>::scalar(loss),
      [ln, probs, tg = std::move(tg), counted, cols, ignore_index](Node<T>& self) {
        if (counted == 0) return;
        const T g = self.grad()[0] / T(counted);
        Tensor<T>& dl = ln->grad();
        for (size_t r = 0; r < tg.size(); ++r) {
          if (tg[r] == ignore_index) continue;
          for (size_t c = 0; c < cols; ++c) {
            const T p = (*probs)[r * cols + c];
            dl[r * cols + c] += g * (p - (static_cast<int32_t>(c) == tg[r] ? T(1) : T(0)));
          }
        }
      },
      logits);
}

// Concatenation along the last axis; leading shapes must agree.
template <typename T>
Var<T> concat(const Var<T>& a, const Var<T>& b) {
  const Tensor<T>& av = a.value();
  const Tensor<T>& bv = b.value();
  if (av.rows() != bv.rows() || av.rank() != bv.rank()) detail::shape_error("concat", av.shape(), bv.shape());
  const size_t rows = av.rows(), ca = av.cols(), cb = bv.cols();
  Tensor<T> out(detail::with_last(av.shape(), ca + cb));
  for (size_t r = 0; r < rows; ++r) {
    std::copy_n(av.data() + r * ca, ca, out.data() + r * (ca + cb));
    std::copy_n(bv.data() + r * cb, cb, out.data() + r * (ca + cb) + ca);
  }
  Node<T>* an = a.node();
  Node<T>* bn = b.node();
  return a.graph().emit(
      std::move(out),
      [an, bn, rows, ca, cb](Node<T>& self) {
        const Tensor<T>& dy = self.grad();
        if (an->requires_grad) {
          Tensor<T>& da = an->grad();
          for (size_t r = 0; r < rows; ++r)
            for (size_t c = 0; c < ca; ++c) da[r * ca + c] += dy[r * (ca + cb) + c];
        }
        if (bn->requires_grad) {
          Tensor<T>& db = bn->grad();
          for (size_t r = 0; r < rows; ++r)
            for (size_t c = 0; c < cb; ++c) db[r * cb + c] += dy[r * (ca + cb) + ca + c];
        }
      },
      a, b);
}

// Columns [begin, end) of the last axis.
template <typename T>
Var<T> slice(const Var<T>& x, size_t begin, size_t end) {
  const Tensor<T>& xv = x.value();
  if (begin >= end || end > xv.cols()) {
    throw std::invalid_argument("slice: range [" + std::to_string(begin) + "," + std::to_string(end) +
                                ") invalid for shape " + shape_str(xv.shape()));
  }
  const size_t rows = xv.rows(), cols = xv.cols(), w = end - begin;
  Tensor<T> out(detail::with_last(xv.shape(), w));
  for (size_t r = 0; r < rows; ++r) std::copy_n(xv.data() + r * cols + begin, w, out.data() + r * w);
  Node<T>* xn = x.node();
  return x.graph().emit(
      std::move(out),
      [xn, rows, cols, begin, w](Node<T>& self) {
        const Tensor<T>& dy = self.grad();
        Tensor<T>& dx = xn->grad();
        for (size_t r = 0; r < rows; ++r)
          for (size_t c = 0; c < w; ++c) dx[r * cols + begin + c] += dy[r * w + c];
      },
      x);
}

// Selected rows of a matrix -> [n, cols].
template <typename T>
Var<T> gather_rows(const Var<T>& x, std::span<const size_t> rows_idx) {
  const Tensor<T>& xv = x.value();
  const size_t cols = xv.cols();
  Tensor<T> out(Shape{rows_idx.size(), cols});
  for (size_t i = 0; i < rows_idx.size(); ++i) {
    if (rows_idx[i] >= xv.rows()) {
      throw std::out_of_range("gather_rows: row " + std::to_string(rows_idx[i]) + " out of range for " +
                              shape_str(xv.shape()));
    }
    std::copy_n(xv.data() + rows_idx[i] * cols, cols, out.data() + i * cols);
  }
  Node<T>* xn = x.node();
  std::vector<size_t> idx(rows_idx.begin(), rows_idx.end());
  return x.graph().emit(
      std::move(out),
      [xn, idx = std::move(idx), cols](Node<T>& self) {
        const Tensor<T>& dy = self.grad();
        Tensor<T>& dx = xn->grad();
        for (size_t i = 0; i < idx.size(); ++i)
          for (size_t c = 0; c < cols; ++c) dx[idx[i] * cols + c] += dy[i * cols + c];
      },
      x);
}

// steps[t] is [B, D]; result is [B*T, D] with row b*T + t = steps[t][b].
template <typename T>
Var<T> interleave_steps(const std::vector<Var<T>>& steps) {
  if (steps.empty()) throw std::invalid_argument("interleave_steps: no steps");
  const Shape& s0 = steps[0].shape();
  const size_t batch = steps[0].value().rows(), d = steps[0].value().cols(), seq = steps.size();
  for (const auto& s : steps) {
    if (s.shape() != s0) detail::shape_error("interleave_steps", s0, s.shape());
  }
  Tensor<T> out(Shape{batch * seq, d});
  for (size_t t = 0; t < seq; ++t)
    for (size_t b = 0; b < batch; ++b)
      std::copy_n(steps[t].value().data() + b * d, d, out.data() + (b * seq + t) * d);
  std::vector<Node<T>*> ins;
  for (const auto& s : steps) ins.push_back(s.node());
  return steps[0].graph().emit_many(
      std::move(out),
      [ins, batch, seq, d](Node<T>& self) {
        const Tensor<T>& dy = self.grad();
        for (size_t t = 0; t < seq; ++t) {
          if (!ins[t]->requires_grad) continue;
          Tensor<T>& dx = ins[t]->grad();
          for (size_t b = 0; b < batch; ++b)
            for (size_t c = 0; c < d; ++c) dx[b * d + c] += dy[(b * seq + t) * d + c];
        }
      },
      steps);
}

template <typename T>
Var<T> sum(const Var<T>& x) {
  T s = 0;
  for (T v : x.value().values()) s += v;
  Node<T>* xn = x.node();
  return x.graph().emit(
      Tensor<T>::scalar(s),
      [xn](Node<T>& self) {
        const T g = self.grad()[0];
        Tensor<T>& dx = xn->grad();
        for (size_t i = 0; i < dx.size(); ++i) dx[i] += g;
      },
      x);
}

template <typename T>
struct AttentionProbs {
  size_t batch = 0, heads = 0, seq = 0;
  std::vector<T> probs;  // [(b*heads + h)*seq + query]*seq + key

  T at(size_t b, size_t h, size_t q, size_t k) const { return probs[((b * heads + h) * seq + q) * seq + k]; }
};

// Multi-head scaled dot-product attention over [B*T, H] projections. Keys
// with key_mask == 0 get an additive -inf before the softmax, so they receive
// exactly zero weight.
template <typename T>
Var<T> attention(const Var<T>& q, const Var<T>& k, const Var<T>& v, std::span<const int32_t> key_mask,
                 size_t batch, size_t seq, size_t heads, AttentionProbs<T>* capture = nullptr) {
  const Tensor<T>& qv = q.value();
  const size_t hidden = qv.cols();
  if (qv.rows() != batch * seq || k.shape() != q.shape() || v.shape() != q.shape()) {
    detail::shape_error("attention", q.shape(), k.shape());
  }
  if (heads == 0 || hidden % heads != 0) {
    throw std::invalid_argument("attention: hidden size " + std::to_string(hidden) +
                                " not divisible by heads " + std::to_string(heads));
  }
  if (key_mask.size() != batch * seq) {
    detail::shape_error("attention(mask)", q.shape(), Shape{key_mask.size()});
  }
  const size_t dh = hidden / heads;
  const T inv_sqrt = T(1) / std::sqrt(T(dh));
  const auto H = static_cast<Eigen::Index>(hidden);
  const auto Ti = static_cast<Eigen::Index>(seq);
  const auto D = static_cast<Eigen::Index>(dh);
  auto probs = std::make_shared<std::vector<T>>(batch * heads * seq * seq);
  Tensor<T> out(qv.shape());
  const Tensor<T>& kv = k.value();
  const Tensor<T>& vv = v.value();
  for (size_t b = 0; b < batch; ++b) {
    for (size_t h = 0; h < heads; ++h) {
      const size_t off = b * seq * hidden + h * dh;
      ConstStridedMap<T> Q(qv.data() + off, Ti, D, Eigen::OuterStride<>(H));
      ConstStridedMap<T> K(kv.data() + off, Ti, D, Eigen::OuterStride<>(H));
      ConstStridedMap<T> V(vv.data() + off, Ti, D, Eigen::OuterStride<>(H));
      MatMap<T> P(probs->data() + (b * heads + h) * seq * seq, Ti, Ti);
      P.noalias() = (Q * K.transpose()) * inv_sqrt;
      for (size_t i = 0; i < seq; ++i) {
        T mx = -std::numeric_limits<T>::infinity();
        for (size_t j = 0; j < seq; ++j) {
          if (!key_mask[b * seq + j]) P(i, j) = -std::numeric_limits<T>::infinity();
          mx = std::max(mx, P(i, j));
        }
        T sum = 0;
        for (size_t j = 0; j < seq; ++j) sum += (P(i, j) = std::exp(P(i, j) - mx));
        for (size_t j = 0; j < seq; ++j) P(i, j) /= sum;
      }
      StridedMap<T> O(out.data() + off, Ti, D, Eigen::OuterStride<>(H));
      O.noalias() = P * V;
    }
  }
  if (capture) *capture = AttentionProbs<T>{batch, heads, seq, *probs};
  Node<T>* qn = q.node();
  Node<T>* kn = k.node();
  Node<T>* vn = v.node();
  return q.graph().emit(
      std::move(out),
      [qn, kn, vn, probs, batch, seq, heads, dh, hidden, inv_sqrt](Node<T>& self) {
        const auto H = static_cast<Eigen::Index>(hidden);
        const auto Ti = static_cast<Eigen::Index>(seq);
        const auto D = static_cast<Eigen::Index>(dh);
        const Tensor<T>& dy = self.grad();
        Tensor<T>* dq = qn->requires_grad ? &qn->grad() : nullptr;
        Tensor<T>* dk = kn->requires_grad ? &kn->grad() : nullptr;
        Tensor<T>* dv = vn->requires_grad ? &vn->grad() : nullptr;
        RowMat<T> dP(Ti, Ti), dS(Ti, Ti);
        for (size_t b = 0; b < batch; ++b) {
          for (size_t h = 0; h < heads; ++h) {
            const size_t off = b * seq * hidden + h * dh;
            ConstStridedMap<T> Q(qn->value().data() + off, Ti, D, Eigen::OuterStride<>(H));
            ConstStridedMap<T> K(kn->value().data() + off, Ti, D, Eigen::OuterStride<>(H));
            ConstStridedMap<T> V(vn->value().data() + off, Ti, D, Eigen::OuterStride<>(H));
            ConstStridedMap<T> dO(dy.data() + off, Ti, D, Eigen::OuterStride<>(H));
            ConstMatMap<T> P(probs->data() + (b * heads + h) * seq * seq, Ti, Ti);
            if (dv) StridedMap<T>(dv->data() + off, Ti, D, Eigen::OuterStride<>(H)).noalias() += P.transpose() * dO;
            dP.noalias() = dO * V.transpose();
            for (Eigen::Index i = 0; i < Ti; ++i) {
              T dot = 0;
              for (Eigen::Index j = 0; j < Ti; ++j) dot += dP(i, j) * P(i, j);
              for (Eigen::Index j = 0; j < Ti; ++j) dS(i, j) = P(i, j) * (dP(i, j) - dot) * inv_sqrt;
            }
            if (dq) StridedMap<T>(dq->data() + off, Ti, D, Eigen::OuterStride<>(H)).noalias() += dS * K;
            if (dk) StridedMap<T>(dk->data() + off, Ti, D, Eigen::OuterStride<>(H)).noalias() += dS.transpose() * Q;
          }
        }
      },
      q, k, v);
}

}  // namespace kubert::nn
