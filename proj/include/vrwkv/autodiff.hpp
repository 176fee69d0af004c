#pragma once

#include "vrwkv/core.hpp"

#include <cstddef>
#include <functional>
#include <map>
#include <vector>

namespace vrwkv::ad {

class GradTape;

/// Handle to a node on a GradTape. Cheap to copy; valid while the tape lives.
class Var {
 public:
  Var() = default;

  const Matrix& value() const;
  std::size_t id() const { return id_; }
  GradTape* tape() const { return tape_; }
  Index rows() const { return value().rows(); }
  Index cols() const { return value().cols(); }

 private:
  friend class GradTape;
  Var(GradTape* tape, std::size_t id) : tape_(tape), id_(id) {}

  GradTape* tape_ = nullptr;
  std::size_t id_ = 0;
};

/// Receives gradient contributions for parent nodes during backward().
class GradientSink {
 public:
  explicit GradientSink(std::vector<Matrix>& grads) : grads_(grads) {}

  template <typename Derived>
  void accumulate(std::size_t id, const Eigen::MatrixBase<Derived>& g) {
    Matrix& slot = grads_[id];
    if (slot.size() == 0) {
      slot = g;
    } else {
      slot += g;
    }
  }

 private:
  std::vector<Matrix>& grads_;
};

/// Ordered record of primitive operations.
///
/// Nodes are appended in evaluation order, so parents always precede their
/// consumers and reverse insertion order is a reverse topological order.
class GradTape {
 public:
  /// Propagates the gradient of a node to its parents.
  using BackwardFn = std::function<void(const GradTape& tape, const Matrix& grad, GradientSink& sink)>;

  GradTape() = default;
  GradTape(const GradTape&) = delete;
  GradTape& operator=(const GradTape&) = delete;

  /// A trainable input; backward() reports its gradient.
  Var leaf(Matrix value);
  /// A fixed input; no gradient flows into it.
  Var constant(Matrix value);
  /// Records the result of a custom primitive.
  Var record(Matrix value, std::vector<std::size_t> parents, BackwardFn backward);

  const Matrix& value(std::size_t id) const { return nodes_.at(id).value; }
  const std::vector<std::size_t>& parents(std::size_t id) const { return nodes_.at(id).parents; }
  bool is_leaf(std::size_t id) const { return nodes_.at(id).leaf; }
  bool requires_grad(std::size_t id) const { return nodes_.at(id).requires_grad; }
  std::size_t size() const { return nodes_.size(); }
  std::vector<std::size_t> leaves() const;

 private:
  friend std::map<std::size_t, Matrix> backward(const GradTape&, Var, std::vector<std::size_t>*);

  struct Node {
    Matrix value;
    std::vector<std::size_t> parents;
    BackwardFn backward;
    bool leaf = false;
    bool requires_grad = false;
  };
  std::vector<Node> nodes_;
};

/// Gradient of a scalar (1x1) loss with respect to every leaf on the tape.
/// Leaves the loss does not depend on get zero gradients. When `visit_order`
/// is given, it receives the ids of the nodes whose backward rule ran, in order.
std::map<std::size_t, Matrix> backward(const GradTape& tape, Var loss,
                                       std::vector<std::size_t>* visit_order = nullptr);

// Primitives. All operands must live on the same tape.

Var matmul(Var a, Var b);
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var hadamard(Var a, Var b);
Var scale(Var x, double s);
/// x + row, the 1 x cols row broadcast over every row of x.
Var add_row(Var x, Var row);
/// x ⊙ row, broadcast as in add_row.
Var mul_row(Var x, Var row);
/// μ ⊙ x + (1 - μ) ⊙ other, μ a broadcast row.
Var lerp_row(Var x, Var other, Var mu);
Var sigmoid(Var x);
Var relu_sq(Var x);
Var exp(Var x);
Var square(Var x);
Var softmax_rows(Var x);
Var sum(Var x);
Var mean(Var x);
/// Mean of the squared difference, as a 1x1 node.
Var mse(Var prediction, Var target);
/// out.row(i) = x.row(index[i]).
Var gather_rows(Var x, std::vector<Index> index);
/// Rows [begin, begin + count).
Var slice_rows(Var x, Index begin, Index count);
Var vstack(const std::vector<Var>& parts);

inline Var operator+(Var a, Var b) { return add(a, b); }
inline Var operator-(Var a, Var b) { return sub(a, b); }
inline Var operator*(double s, Var x) { return scale(x, s); }

}  // namespace vrwkv::ad
