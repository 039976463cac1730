#pragma once

// Tape-based reverse-mode differentiation over a fixed primitive set.
//
// A Tape is built by one forward pass: every primitive appends a node holding
// its output value and a closure that pushes the node's gradient back to its
// inputs. Nodes are appended in evaluation order, so the tape is already a
// topological order and backward() is a single reverse sweep.
//
// Leaves come in two flavours. constant() owns or references a value that
// receives no gradient. parameter() references an external Tensor; backward()
// accumulates into that tensor's grad buffer.

#include <cstddef>
#include <functional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "compostruct/tensor.hpp"

namespace compostruct {

class TapeError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

struct Var {
  std::size_t id = static_cast<std::size_t>(-1);
};

class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;
  Tape(Tape&&) = default;
  Tape& operator=(Tape&&) = default;

  Var constant(Tensor value);
  /// References `value` without copying; it must outlive the tape.
  Var constant_ref(const Tensor& value);
  /// Trainable leaf. Gradients are accumulated into `param.grad()`.
  Var parameter(Tensor& param);

  const Tensor& value(Var v) const;
  /// Gradient of the last backward() target with respect to `v`; empty if none flowed.
  std::span<const double> grad(Var v) const;
  bool requires_grad(Var v) const { return node(v).requires_grad; }
  std::size_t size() const { return nodes_.size(); }

  Var matmul(Var a, Var b);
  Var add(Var a, Var b);
  /// x [m, n] + b [n], broadcast over rows.
  Var add_bias(Var x, Var b);
  Var mul(Var a, Var b);
  Var scale(Var a, double c);
  Var relu(Var a);
  Var sigmoid(Var a);
  /// Rows of `table` [vocab, dim] selected by `ids`; output [ids.size(), dim].
  Var embedding(Var table, std::span<const std::size_t> ids);
  Var reshape(Var a, Shape shape);
  /// Sum of all entries, shape [1].
  Var sum(Var a);
  /// e [groups * group, d] -> logits [groups, group], logit_i = -sum_{j != i} e_i . e_j.
  Var odd_one_out_logits(Var e, std::size_t group);
  /// Mean softmax cross-entropy of logits [rows, classes] (or one row as rank 1) against targets.
  Var softmax_cross_entropy(Var logits, std::span<const std::size_t> targets);
  /// Fused w * sigmoid(beta * s), equal to mul(w, sigmoid(scale(s, beta))).
  Var soft_mask(Var w, Var s, double beta);

  /// Reverse sweep from the scalar `loss`. A tape supports exactly one backward pass.
  void backward(Var loss);

 private:
  struct Node {
    Tensor own;
    const Tensor* ext = nullptr;
    Tensor* param = nullptr;
    bool requires_grad = false;
    std::vector<double> grad;
    std::function<void(Tape&, Node&)> back;

    const Tensor& value() const { return ext ? *ext : own; }
  };

  const Node& node(Var v) const;
  Node& node(Var v);
  Var push(Tensor value, bool requires_grad, std::function<void(Tape&, Node&)> back,
           const char* primitive);
  /// Gradient buffer of an input node, allocated on first use.
  std::span<double> grad_of(Var v);

  std::vector<Node> nodes_;
  bool backward_done_ = false;
};

}  // namespace compostruct
