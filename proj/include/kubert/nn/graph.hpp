#pragma once

// Tape-based reverse-mode differentiation. Nodes are appended in forward
// order, so walking the tape backwards is a valid topological order.

#include <deque>
#include <functional>
#include <memory>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "kubert/nn/tensor.hpp"

namespace kubert::nn {

template <typename T>
struct Parameter {
  std::string name;
  Tensor<T> value;
  Tensor<T> grad;
  bool trainable = true;

  void zero_grad() { grad.fill(T(0)); }
};

// Owns parameters with stable addresses, in registration order.
template <typename T>
class ParameterSet {
 public:
  ParameterSet() = default;
  ParameterSet(ParameterSet&&) noexcept = default;
  ParameterSet& operator=(ParameterSet&&) noexcept = default;

  Parameter<T>& add(std::string name, Tensor<T> value) {
    if (index_.count(name)) throw std::invalid_argument("duplicate parameter name '" + name + "'");
    auto p = std::make_unique<Parameter<T>>();
    p->name = std::move(name);
    p->grad = Tensor<T>(value.shape());
    p->value = std::move(value);
    index_[p->name] = params_.size();
    params_.push_back(std::move(p));
    return *params_.back();
  }

  Parameter<T>* find(std::string_view name) {
    auto it = index_.find(std::string(name));
    return it == index_.end() ? nullptr : params_[it->second].get();
  }
  const Parameter<T>* find(std::string_view name) const {
    auto it = index_.find(std::string(name));
    return it == index_.end() ? nullptr : params_[it->second].get();
  }
  Parameter<T>& get(std::string_view name) {
    auto* p = find(name);
    if (!p) throw std::out_of_range("no parameter named '" + std::string(name) + "'");
    return *p;
  }

  size_t size() const { return params_.size(); }
  Parameter<T>& operator[](size_t i) { return *params_[i]; }
  const Parameter<T>& operator[](size_t i) const { return *params_[i]; }

  size_t element_count() const {
    size_t n = 0;
    for (const auto& p : params_) n += p->value.size();
    return n;
  }

  void zero_grad() {
    for (auto& p : params_) p->zero_grad();
  }

  void set_trainable(bool on) {
    for (auto& p : params_) p->trainable = on;
  }

  auto begin() { return params_.begin(); }
  auto end() { return params_.end(); }
  auto begin() const { return params_.begin(); }
  auto end() const { return params_.end(); }

 private:
  std::vector<std::unique_ptr<Parameter<T>>> params_;
  std::unordered_map<std::string, size_t> index_;
};

template <typename T>
struct Node {
  Tensor<T> value_storage;
  Tensor<T> grad_storage;
  const Tensor<T>* external_value = nullptr;
  Tensor<T>* external_grad = nullptr;
  bool requires_grad = false;
  std::function<void(Node&)> backward;

  const Tensor<T>& value() const { return external_value ? *external_value : value_storage; }

  bool has_grad() const { return external_grad != nullptr || !grad_storage.empty(); }

  Tensor<T>& grad() {
    if (external_grad) return *external_grad;
    if (grad_storage.empty() && !value().empty()) grad_storage = Tensor<T>(value().shape());
    return grad_storage;
  }
};

template <typename T>
class Graph;

template <typename T>
class Var {
 public:
  Var() = default;
  Var(Graph<T>* g, Node<T>* n) : graph_(g), node_(n) {}

  const Tensor<T>& value() const { return node_->value(); }
  const Shape& shape() const { return node_->value().shape(); }
  bool requires_grad() const { return node_->requires_grad; }
  Graph<T>& graph() const { return *graph_; }
  Node<T>* node() const { return node_; }
  explicit operator bool() const { return node_ != nullptr; }

 private:
  Graph<T>* graph_ = nullptr;
  Node<T>* node_ = nullptr;
};

template <typename T>
class Graph {
 public:
  explicit Graph(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  bool grad_enabled() const { return grad_enabled_; }

  // Leaf bound to a parameter; gradients accumulate straight into p.grad.
  Var<T> param(Parameter<T>& p) {
    Node<T>& n = nodes_.emplace_back();
    n.external_value = &p.value;
    n.requires_grad = grad_enabled_ && p.trainable;
    if (n.requires_grad) n.external_grad = &p.grad;
    return {this, &n};
  }

  Var<T> constant(Tensor<T> t) {
    Node<T>& n = nodes_.emplace_back();
    n.value_storage = std::move(t);
    return {this, &n};
  }

  // Leaf whose gradient is collected on the node itself (see grad()).
  Var<T> input(Tensor<T> t) {
    Node<T>& n = nodes_.emplace_back();
    n.value_storage = std::move(t);
    n.requires_grad = grad_enabled_;
    return {this, &n};
  }

  template <typename... Vars>
  Var<T> emit(Tensor<T> value, std::function<void(Node<T>&)> backward, const Vars&... inputs) {
    Node<T>& n = nodes_.emplace_back();
    n.value_storage = std::move(value);
    n.requires_grad = grad_enabled_ && (inputs.requires_grad() || ...);
    if (n.requires_grad) n.backward = std::move(backward);
    return {this, &n};
  }

  Var<T> emit_many(Tensor<T> value, std::function<void(Node<T>&)> backward, const std::vector<Var<T>>& inputs) {
    Node<T>& n = nodes_.emplace_back();
    n.value_storage = std::move(value);
    bool any = false;
    for (const auto& v : inputs) any = any || v.requires_grad();
    n.requires_grad = grad_enabled_ && any;
    if (n.requires_grad) n.backward = std::move(backward);
    return {this, &n};
  }

  const Tensor<T>& grad(const Var<T>& v) { return v.node()->grad(); }

  void backward(const Var<T>& loss) {
    if (consumed_) {
      throw std::logic_error("backward already ran on this graph; re-run the forward pass first");
    }
    if (loss.value().size() != 1) {
      throw std::invalid_argument("backward needs a scalar loss, got shape " + shape_str(loss.shape()));
    }
    consumed_ = true;
    if (!loss.requires_grad()) return;
    loss.node()->grad().fill(T(1));
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
      Node<T>& n = *it;
      if (n.requires_grad && n.backward && n.has_grad()) n.backward(n);
    }
  }

  size_t size() const { return nodes_.size(); }

 private:
  std::deque<Node<T>> nodes_;
  bool grad_enabled_;
  bool consumed_ = false;
};

}  // namespace kubert::nn
