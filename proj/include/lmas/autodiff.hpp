#pragma once

#include <cstddef>
#include <functional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "lmas/tensor.hpp"

namespace lmas {

/// A named trainable tensor together with its accumulated gradient.
struct Parameter {
  std::string name;
  Tensor value;
  Tensor grad;

  Parameter() = default;
  Parameter(std::string name_, Tensor value_)
      : name(std::move(name_)), value(std::move(value_)), grad(value.shape(), 0.0) {}

  void zero_grad() { grad = Tensor(value.shape(), 0.0); }
};

using ParameterList = std::vector<Parameter*>;

/// Throws Contract when two parameters share a name.
void check_unique_names(const ParameterList& params);

class Tape;

/// Handle to a node recorded on a Tape. Cheap to copy; only valid while the
/// tape that produced it is alive.
class Var {
 public:
  Var() = default;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape& tape() const { return *tape_; }
  std::size_t id() const { return id_; }
  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  std::size_t rows() const { return value().rows(); }
  std::size_t cols() const { return value().cols(); }

 private:
  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

/// Define-by-run record of executed primitives. Nodes are appended in
/// execution order, so descending node id is a valid reverse topological
/// order for the backward sweep.
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, std::size_t self)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Tensor value);
  /// Leaf whose gradient can be read back with grad() after backward().
  Var variable(Tensor value);
  /// Leaf bound to a Parameter. Binding the same Parameter twice returns the
  /// same node.
  Var parameter(Parameter& p);

  Var record(Tensor value, std::span<const Var> inputs, BackwardFn backward);

  const Tensor& value(std::size_t id) const { return nodes_[id].value; }
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }

  /// Gradient accumulator of a node, allocated as zeros on first use.
  Tensor& grad_buffer(std::size_t id);
  /// Gradient of a node after backward(); zeros if the node was unreached.
  Tensor grad(Var v) const;

  /// Reverse sweep from a scalar loss. Every Parameter bound to this tape has
  /// its gradient overwritten with d(loss)/d(parameter).
  void backward(Var loss);

  std::size_t size() const { return nodes_.size(); }
  /// Node ids visited by the last backward() in visiting order.
  const std::vector<std::size_t>& backward_order() const { return backward_order_; }

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    BackwardFn backward;
    Parameter* param = nullptr;
    bool requires_grad = false;
  };

  std::vector<Node> nodes_;
  std::unordered_map<const Parameter*, std::size_t> bound_;
  std::vector<std::size_t> backward_order_;
};

inline const Tensor& Var::value() const { return tape_->value(id_); }

// Primitive operations. Binary elementwise kinds require identical shapes.

enum class Elementwise { Tanh, Sigmoid, Relu, Add, Mul };

Var elementwise_apply(Elementwise kind, std::span<const Var> args);

Var matmul(Var a, Var b);
/// a * b^T, the shape used by every weight application (W x).
Var matmul_nt(Var a, Var b);
Var transpose(Var a);
Var reshape(Var a, Shape shape);

Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var a, double factor);
/// m x n plus a 1 x n row broadcast over rows.
Var add_row(Var a, Var row);
/// m x n times a 1 x n row broadcast over rows.
Var mul_row(Var a, Var row);

Var tanh(Var a);
Var sigmoid(Var a);
Var relu(Var a);

Var sum(Var a);
Var mean(Var a);

Var softmax_rows(Var a);
/// Row-wise softmax where entries at column >= lengths[row] are treated as
/// -inf logits: they come out exactly zero and receive no gradient.
Var masked_softmax_rows(Var a, std::span<const std::size_t> lengths);

/// Mean over rows of -log softmax(logits)[target].
Var cross_entropy(Var logits, std::span<const std::size_t> targets);

Var gather_rows(Var a, std::span<const std::size_t> rows);
Var concat_rows(std::span<const Var> parts);

/// Batch normalization with batch statistics (biased variance). The batch
/// mean and biased variance are written to the optional outputs.
Var batch_norm_train(Var x, Var gamma, Var beta, double eps, Tensor* batch_mean = nullptr,
                     Tensor* batch_var = nullptr);

/// Central-difference gradient of a scalar function.
Tensor finite_diff_grad(const std::function<double(const Tensor&)>& f, const Tensor& x, double step);

/// max_i |a_i - b_i| / max(|a_i|, |b_i|, floor)
double max_relative_error(const Tensor& a, const Tensor& b, double floor = 1e-6);

}  // namespace lmas
