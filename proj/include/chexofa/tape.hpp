#pragma once

#include <cstddef>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "chexofa/tensor.hpp"

namespace cxo {

template <typename Scalar>
class BasicTape;

using NodeId = std::size_t;

/// Handle to a value recorded on a tape.
template <typename Scalar>
class BasicVar {
 public:
  using Matrix = MatrixX<Scalar>;

  BasicVar() = default;
  BasicVar(BasicTape<Scalar>* tape, NodeId id) : tape_(tape), id_(id) {}

  NodeId id() const { return id_; }
  BasicTape<Scalar>& tape() const { return *tape_; }
  const Matrix& value() const { return tape_->value(id_); }
  Eigen::Index rows() const { return value().rows(); }
  Eigen::Index cols() const { return value().cols(); }
  bool valid() const { return tape_ != nullptr; }

 private:
  BasicTape<Scalar>* tape_ = nullptr;
  NodeId id_ = 0;
};

/// Gradient buffers indexed by node id. Empty matrices mean "no gradient
/// reached this node yet".
template <typename Scalar>
class BasicGradients {
 public:
  using Matrix = MatrixX<Scalar>;

  explicit BasicGradients(std::size_t n = 0) : grads_(n), active_(n, false) {}

  template <typename Expr>
  void accumulate(NodeId id, const Eigen::MatrixBase<Expr>& g) {
    if (!active_[id]) return;
    if (grads_[id].size() == 0) {
      grads_[id] = g;
    } else {
      grads_[id] += g;
    }
  }

  Matrix& raw(NodeId id) { return grads_[id]; }
  const Matrix& operator[](NodeId id) const { return grads_[id]; }
  const Matrix& operator[](const BasicVar<Scalar>& v) const { return grads_[v.id()]; }
  std::size_t size() const { return grads_.size(); }

 private:
  template <typename>
  friend class BasicTape;
  std::vector<Matrix> grads_;
  std::vector<bool> active_;
};

enum class GradMode { kEnabled, kDisabled };

/// Ordered record of forward operations for reverse-mode differentiation.
///
/// Nodes are appended in execution order, so every operation's inputs precede
/// it and a single reverse sweep visits each node once. With GradMode::kDisabled
/// only values are kept, which is what inference uses.
template <typename Scalar>
class BasicTape {
 public:
  using Matrix = MatrixX<Scalar>;
  using Var = BasicVar<Scalar>;
  using Gradients = BasicGradients<Scalar>;
  using BackwardFn = std::function<void(const Matrix& grad_out, Gradients& grads)>;

  explicit BasicTape(GradMode mode = GradMode::kEnabled) : mode_(mode) {}

  BasicTape(const BasicTape&) = delete;
  BasicTape& operator=(const BasicTape&) = delete;

  GradMode mode() const { return mode_; }
  std::size_t size() const { return nodes_.size(); }
  const Matrix& value(NodeId id) const { return nodes_[id].value; }
  bool needs_grad(NodeId id) const { return nodes_[id].needs_grad; }

  /// Leaf node. Parameters are leaves with `requires_grad`.
  Var leaf(Matrix value, bool requires_grad = false) {
    nodes_.push_back(Node{std::move(value), {}, requires_grad && mode_ == GradMode::kEnabled, true});
    return Var(this, nodes_.size() - 1);
  }

  /// Records an operation output. `make_backward` is only invoked when some
  /// input needs a gradient.
  template <typename MakeBackward>
  Var record(const char* op, Matrix value, std::initializer_list<Var> inputs, MakeBackward&& make_backward) {
    if (!value.allFinite()) {
      throw NumericError(std::string(op) + ": non-finite value in forward pass");
    }
    bool needs = false;
    if (mode_ == GradMode::kEnabled) {
      for (const auto& in : inputs) needs = needs || nodes_[in.id()].needs_grad;
    }
    nodes_.push_back(Node{std::move(value), {}, needs, false});
    if (needs) nodes_.back().backward = make_backward();
    return Var(this, nodes_.size() - 1);
  }

  /// Variant for ops with a runtime-sized input list.
  template <typename MakeBackward>
  Var record_n(const char* op, Matrix value, const std::vector<Var>& inputs, MakeBackward&& make_backward) {
    if (!value.allFinite()) {
      throw NumericError(std::string(op) + ": non-finite value in forward pass");
    }
    bool needs = false;
    if (mode_ == GradMode::kEnabled) {
      for (const auto& in : inputs) needs = needs || nodes_[in.id()].needs_grad;
    }
    nodes_.push_back(Node{std::move(value), {}, needs, false});
    if (needs) nodes_.back().backward = make_backward();
    return Var(this, nodes_.size() - 1);
  }

  /// Reverse sweep from a scalar loss. Leaves that require a gradient but are
  /// unreachable from `loss` receive zeros. The tape is not modified, so
  /// repeated calls return identical gradients.
  Gradients backward(const Var& loss) const {
    if (loss.value().size() != 1) {
      throw ContractError("backward: loss must be scalar, got " + std::to_string(loss.rows()) + "x" +
                          std::to_string(loss.cols()));
    }
    Gradients grads(nodes_.size());
    for (std::size_t i = 0; i < nodes_.size(); ++i) grads.active_[i] = nodes_[i].needs_grad;
    if (!nodes_[loss.id()].needs_grad) {
      fill_leaf_zeros(grads);
      return grads;
    }
    grads.grads_[loss.id()] = Matrix::Ones(1, 1);
    for (std::size_t i = loss.id() + 1; i-- > 0;) {
      const Node& node = nodes_[i];
      if (!node.backward || grads.grads_[i].size() == 0) continue;
      node.backward(grads.grads_[i], grads);
    }
    fill_leaf_zeros(grads);
    return grads;
  }

 private:
  struct Node {
    Matrix value;
    BackwardFn backward;
    bool needs_grad = false;
    bool is_leaf = false;
  };

  void fill_leaf_zeros(Gradients& grads) const {
    for (std::size_t i = 0; i < nodes_.size(); ++i) {
      if (nodes_[i].is_leaf && nodes_[i].needs_grad && grads.grads_[i].size() == 0) {
        grads.grads_[i] = Matrix::Zero(nodes_[i].value.rows(), nodes_[i].value.cols());
      }
    }
  }

  GradMode mode_;
  std::vector<Node> nodes_;
};

using Tape = BasicTape<double>;
using Var = BasicVar<double>;
using Gradients = BasicGradients<double>;

}  // namespace cxo
