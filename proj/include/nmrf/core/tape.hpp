#pragma once

#include <cassert>
#include <functional>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "nmrf/core/types.hpp"

namespace nmrf {

// A learnable tensor that persists across tapes. Gradients and optimizer
// moments live here; forward graphs bind to it through Tape::use().
template <class S>
struct Parameter {
  std::string name;
  MatX<S> value;
  MatX<S> grad;
  MatX<S> adam_m, adam_v;

  void zero_grad() { grad = MatX<S>::Zero(value.rows(), value.cols()); }
};

// Reverse-mode tape over dense row-major matrices. One tape per forward pass;
// ops append nodes and capture parent ids in their backward closures.
template <class S>
class Tape {
 public:
  struct Node {
    MatX<S> value;
    MatX<S> grad;  // allocated on first touch during backward
    bool requires_grad = false;
    std::function<void(Tape&, int)> backward;
    Parameter<S>* param = nullptr;
  };

  int add(MatX<S> value, bool requires_grad, std::function<void(Tape&, int)> backward = nullptr) {
    Node n;
    n.value = std::move(value);
    n.requires_grad = requires_grad;
    n.backward = std::move(backward);
    nodes_.push_back(std::move(n));
    return static_cast<int>(nodes_.size()) - 1;
  }

  const MatX<S>& value(int id) const { return nodes_[id].value; }
  bool requires_grad(int id) const { return nodes_[id].requires_grad; }

  MatX<S>& grad(int id) {
    Node& n = nodes_[id];
    if (n.grad.size() == 0) n.grad = MatX<S>::Zero(n.value.rows(), n.value.cols());
    return n.grad;
  }
  bool has_grad(int id) const { return nodes_[id].grad.size() != 0; }

  void accumulate(int id, const MatX<S>& g) {
    if (!nodes_[id].requires_grad) return;
    grad(id) += g;
  }

  // Runs reverse accumulation from a scalar root and adds leaf gradients into
  // their bound parameters.
  void backward(int root) {
    if (value(root).size() != 1) throw std::logic_error("backward: root must be a scalar");
    grad(root).setConstant(S(1));
    for (int id = root; id >= 0; --id) {
      Node& n = nodes_[id];
      if (!n.requires_grad || n.grad.size() == 0) continue;
      if (n.backward) n.backward(*this, id);
      if (n.param) n.param->grad += n.grad;
    }
  }

  int bind_param(Parameter<S>& p) {
    auto it = param_nodes_.find(&p);
    if (it != param_nodes_.end()) return it->second;
    if (p.grad.size() == 0) p.zero_grad();
    int id = add(p.value, true);
    nodes_[id].param = &p;
    param_nodes_.emplace(&p, id);
    return id;
  }

  std::size_t size() const { return nodes_.size(); }

 private:
  std::vector<Node> nodes_;
  std::unordered_map<const Parameter<S>*, int> param_nodes_;
};

// Lightweight handle: tape pointer + node id.
template <class S>
class Var {
 public:
  Var() = default;
  Var(Tape<S>* tape, int id) : tape_(tape), id_(id) {}

  const MatX<S>& value() const { return tape_->value(id_); }
  Eigen::Index rows() const { return value().rows(); }
  Eigen::Index cols() const { return value().cols(); }
  int id() const { return id_; }
  Tape<S>& tape() const { return *tape_; }
  bool defined() const { return tape_ != nullptr; }
  bool requires_grad() const { return tape_->requires_grad(id_); }

  // Gradient accumulated for this node (valid after Tape::backward).
  const MatX<S>& grad() const { return const_cast<Tape<S>*>(tape_)->grad(id_); }

 private:
  Tape<S>* tape_ = nullptr;
  int id_ = -1;
};

template <class S>
Var<S> constant(Tape<S>& t, MatX<S> v) {
  return Var<S>(&t, t.add(std::move(v), false));
}

template <class S>
Var<S> leaf(Tape<S>& t, MatX<S> v, bool requires_grad = true) {
  return Var<S>(&t, t.add(std::move(v), requires_grad));
}

template <class S>
Var<S> use(Tape<S>& t, Parameter<S>& p) {
  return Var<S>(&t, t.bind_param(p));
}

}  // namespace nmrf
