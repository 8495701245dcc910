#pragma once

#include <cstddef>
#include <vector>

#include "oodtv/tensor.hpp"

namespace oodtv {

class Tape;
struct TapeAccess;

/// Handle to a node recorded on a Tape.
///
/// A Var is a cheap value; it refers to its tape by pointer, so the tape must
/// outlive every Var created on it.
class Var {
 public:
  Var() = default;

  Tape* tape() const noexcept { return tape_; }
  std::size_t id() const noexcept { return id_; }
  bool valid() const noexcept { return tape_ != nullptr; }

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  double item() const { return value().item(); }

 private:
  friend class Tape;
  friend struct TapeAccess;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

enum class OpKind {
  leaf,
  matmul,
  add,
  add_row,     // matrix + broadcast row vector
  add_scalar,  // tensor + broadcast one-element tensor
  sub,
  sub_scalar,
  mul,
  mul_scalar,
  div,
  div_scalar,
  scale,  // multiply by a compile-time constant
  shift,  // add a constant
  relu,
  sigmoid,
  softplus,
  softmax,
  abs,
  square,
  sum,
  mean,
  weighted_sum,
  bce_logits,
  squared_error,
  column,
  concat_flat,
  safe_div,
};

/// Gradients of a scalar with respect to the trainable leaves of a tape.
class Gradients {
 public:
  /// Gradient for a trainable leaf; a zero tensor when the output does not
  /// depend on it.
  const Tensor& operator[](const Var& leaf) const;

 private:
  friend class Tape;
  const Tape* tape_ = nullptr;
  std::vector<Tensor> grads_;
  std::vector<bool> trainable_;
};

/// Linear record of forward operations for one reverse pass.
///
/// Not thread-safe; use one tape per thread.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;
  Tape(Tape&&) = default;
  Tape& operator=(Tape&&) = default;

  Var leaf(Tensor value, bool trainable = true);
  Var constant(Tensor value) { return leaf(std::move(value), false); }
  Var scalar(double value) { return constant(Tensor::scalar(value)); }

  /// Reverse sweep from a one-element output. A tape supports a single sweep.
  Gradients backward(const Var& output);

  std::size_t size() const noexcept { return nodes_.size(); }
  bool consumed() const noexcept { return consumed_; }

  const Tensor& value(std::size_t id) const { return nodes_.at(id).value; }

 private:
  struct Node {
    OpKind op = OpKind::leaf;
    Tensor value;
    std::size_t lhs = 0;
    std::size_t rhs = 0;
    std::vector<std::size_t> inputs;  // concat_flat only
    Tensor aux;                       // targets for loss nodes
    double constant = 0.0;
    std::size_t index = 0;  // column index
    bool trainable = false;
    bool needs_grad = false;
  };

  Var push(Node node);
  void check_owner(const Var& v, const char* op) const;

  friend struct TapeAccess;
  friend class Gradients;

  std::vector<Node> nodes_;
  bool consumed_ = false;
};

// Differentiable operations. Every operand must live on the same tape.

Var matmul(const Var& a, const Var& b);
/// Same shapes, a one-element rhs, or a (1 x n) row added to every row of a.
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
/// Elementwise product; either side may be a one-element tensor.
Var mul(const Var& a, const Var& b);
Var div(const Var& a, const Var& b);
Var scale(const Var& a, double c);
Var shift(const Var& a, double c);
Var neg(const Var& a);
Var relu(const Var& a);
Var sigmoid(const Var& a);
Var softplus(const Var& a);
/// Row-wise softmax of a matrix.
Var softmax(const Var& a);
/// Absolute value; the derivative at 0 is taken as 0.
Var abs(const Var& a);
Var square(const Var& a);
Var sum(const Var& a);
Var mean(const Var& a);
/// Sum of a * w over all elements.
Var weighted_sum(const Var& a, const Var& w);
/// Elementwise softplus(f) - y f, the cross-entropy of label y under logit f.
Var bce_with_logits(const Var& logits, const Tensor& targets);
/// Elementwise (p - t)^2.
Var squared_error(const Var& pred, const Tensor& targets);
/// Column j of a matrix as an (n x 1) matrix.
Var column(const Var& a, std::size_t j);
/// All parts flattened in order into a (1 x N) row.
Var concat_flat(const std::vector<Var>& parts);
/// Scalar a / b, or 0 (with zero gradient) when b == 0.
Var safe_div(const Var& a, const Var& b);

inline Var operator+(const Var& a, const Var& b) { return add(a, b); }
inline Var operator-(const Var& a, const Var& b) { return sub(a, b); }
inline Var operator*(const Var& a, const Var& b) { return mul(a, b); }
inline Var operator/(const Var& a, const Var& b) { return div(a, b); }
inline Var operator-(const Var& a) { return neg(a); }

// Scalar kernels shared with the hand-written formulas.
double sigmoid(double x);
double softplus(double x);
/// sign(v), with 0 at v == 0.
double subgrad_abs(double v);

}  // namespace oodtv
