#include "oodtv/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace oodtv {

double sigmoid(double x) {
  if (x >= 0.0) {
    return 1.0 / (1.0 + std::exp(-x));
  }
  const double e = std::exp(x);
  return e / (1.0 + e);
}

double softplus(double x) { return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x))); }

double subgrad_abs(double v) {
  if (v > 0.0) return 1.0;
  if (v < 0.0) return -1.0;
  return 0.0;
}

const Tensor& Var::value() const {
  if (!tape_) throw Error("var: uninitialized handle");
  return tape_->value(id_);
}

const Tensor& Gradients::operator[](const Var& leaf) const {
  if (leaf.tape() != tape_) throw Error("gradients: variable belongs to another tape");
  if (leaf.id() >= grads_.size() || !trainable_[leaf.id()]) {
    throw Error("gradients: node " + std::to_string(leaf.id()) + " is not a trainable leaf");
  }
  return grads_[leaf.id()];
}

struct TapeAccess {
  using Node = Tape::Node;
  static Tape::Node& node(Tape& t, std::size_t id) { return t.nodes_[id]; }
  static Var push(Tape& t, Tape::Node n) { return t.push(std::move(n)); }
  static void check(const Var& v, const Tape& t, const char* op) { t.check_owner(v, op); }
};

Var Tape::leaf(Tensor value, bool trainable) {
  Node n;
  n.op = OpKind::leaf;
  n.value = std::move(value);
  n.trainable = trainable;
  n.needs_grad = trainable;
  return push(std::move(n));
}

Var Tape::push(Node node) {
  if (consumed_) throw Error("tape: cannot record after backward()");
  nodes_.push_back(std::move(node));
  return Var(this, nodes_.size() - 1);
}

void Tape::check_owner(const Var& v, const char* op) const {
  if (v.tape() != this) {
    throw Error(std::string(op) + ": operands live on different tapes");
  }
}

namespace {

[[noreturn]] void shape_fail(const char* op, const Shape& a, const Shape& b) {
  throw ShapeError(std::string(op) + ": incompatible shapes " + shape_string(a) + " and " +
                   shape_string(b));
}

Tape& tape_of(const Var& a, const char* op) {
  if (!a.valid()) throw Error(std::string(op) + ": uninitialized operand");
  return *a.tape();
}

Tape& tape_of(const Var& a, const Var& b, const char* op) {
  Tape& t = tape_of(a, op);
  TapeAccess::check(b, t, op);
  return t;
}

struct Spec {
  OpKind op;
  Tensor value;
  std::size_t lhs = 0;
  std::size_t rhs = 0;
  bool binary = false;
  double constant = 0.0;
  std::size_t index = 0;
  Tensor aux;
};

Var emit(Tape& t, Spec s) {
  auto& nodes_lhs = TapeAccess::node(t, s.lhs);
  bool needs = nodes_lhs.needs_grad;
  if (s.binary) needs = needs || TapeAccess::node(t, s.rhs).needs_grad;
  TapeAccess::Node n;
  n.op = s.op;
  n.value = std::move(s.value);
  n.lhs = s.lhs;
  n.rhs = s.binary ? s.rhs : s.lhs;
  n.constant = s.constant;
  n.index = s.index;
  n.aux = std::move(s.aux);
  n.needs_grad = needs;
  return TapeAccess::push(t, std::move(n));
}

Var unary(OpKind op, const Var& a, Tensor value, double constant = 0.0) {
  Spec s{op, std::move(value), a.id()};
  s.constant = constant;
  return emit(*a.tape(), std::move(s));
}

Var binary(OpKind op, const Var& a, const Var& b, Tensor value) {
  Spec s{op, std::move(value), a.id(), b.id(), true};
  return emit(*a.tape(), std::move(s));
}

template <class F>
Tensor map(const Tensor& a, F f) {
  Tensor out = Tensor::zeros_like(a);
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = f(a[i]);
  return out;
}

template <class F>
Tensor zip(const Tensor& a, const Tensor& b, F f) {
  Tensor out = Tensor::zeros_like(a);
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = f(a[i], b[i]);
  return out;
}

bool is_row_of(const Shape& matrix, const Shape& row) {
  return matrix.size() == 2 && row.size() == 2 && row[0] == 1 && row[1] == matrix[1];
}

}  // namespace

Var matmul(const Var& a, const Var& b) {
  tape_of(a, b, "matmul");
  const Tensor& A = a.value();
  const Tensor& B = b.value();
  if (A.rank() != 2 || B.rank() != 2 || A.cols() != B.rows()) {
    shape_fail("matmul", A.shape(), B.shape());
  }
  const std::size_t m = A.rows(), k = A.cols(), n = B.cols();
  Tensor C(Shape{m, n});
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = A[i * k + p];
      if (aip == 0.0) continue;
      for (std::size_t j = 0; j < n; ++j) C[i * n + j] += aip * B[p * n + j];
    }
  }
  return binary(OpKind::matmul, a, b, std::move(C));
}

Var add(const Var& a, const Var& b) {
  tape_of(a, b, "add");
  const Tensor& A = a.value();
  const Tensor& B = b.value();
  if (A.shape() == B.shape()) {
    return binary(OpKind::add, a, b, zip(A, B, [](double x, double y) { return x + y; }));
  }
  if (B.size() == 1) {
    const double s = B[0];
    return binary(OpKind::add_scalar, a, b, map(A, [s](double x) { return x + s; }));
  }
  if (A.size() == 1) return add(b, a);
  if (is_row_of(A.shape(), B.shape())) {
    Tensor out = A;
    const std::size_t n = A.cols();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += B[i % n];
    return binary(OpKind::add_row, a, b, std::move(out));
  }
  if (is_row_of(B.shape(), A.shape())) return add(b, a);
  shape_fail("add", A.shape(), B.shape());
}

Var sub(const Var& a, const Var& b) {
  tape_of(a, b, "sub");
  const Tensor& A = a.value();
  const Tensor& B = b.value();
  if (A.shape() == B.shape()) {
    return binary(OpKind::sub, a, b, zip(A, B, [](double x, double y) { return x - y; }));
  }
  if (B.size() == 1) {
    const double s = B[0];
    return binary(OpKind::sub_scalar, a, b, map(A, [s](double x) { return x - s; }));
  }
  shape_fail("sub", A.shape(), B.shape());
}

Var mul(const Var& a, const Var& b) {
  tape_of(a, b, "mul");
  const Tensor& A = a.value();
  const Tensor& B = b.value();
  if (A.shape() == B.shape()) {
    return binary(OpKind::mul, a, b, zip(A, B, [](double x, double y) { return x * y; }));
  }
  if (B.size() == 1) {
    const double s = B[0];
    return binary(OpKind::mul_scalar, a, b, map(A, [s](double x) { return x * s; }));
  }
  if (A.size() == 1) return mul(b, a);
  shape_fail("mul", A.shape(), B.shape());
}

Var div(const Var& a, const Var& b) {
  tape_of(a, b, "div");
  const Tensor& A = a.value();
  const Tensor& B = b.value();
  if (A.shape() == B.shape()) {
    return binary(OpKind::div, a, b, zip(A, B, [](double x, double y) { return x / y; }));
  }
  if (B.size() == 1) {
    const double s = B[0];
    return binary(OpKind::div_scalar, a, b, map(A, [s](double x) { return x / s; }));
  }
  shape_fail("div", A.shape(), B.shape());
}

Var safe_div(const Var& a, const Var& b) {
  tape_of(a, b, "safe_div");
  const Tensor& A = a.value();
  const Tensor& B = b.value();
  if (A.size() != 1 || B.size() != 1) shape_fail("safe_div", A.shape(), B.shape());
  const double v = B[0] == 0.0 ? 0.0 : A[0] / B[0];
  return binary(OpKind::safe_div, a, b, Tensor::scalar(v));
}

Var scale(const Var& a, double c) {
  tape_of(a, "scale");
  return unary(OpKind::scale, a, map(a.value(), [c](double x) { return c * x; }), c);
}

Var shift(const Var& a, double c) {
  tape_of(a, "shift");
  return unary(OpKind::shift, a, map(a.value(), [c](double x) { return x + c; }), c);
}

Var neg(const Var& a) { return scale(a, -1.0); }

Var relu(const Var& a) {
  tape_of(a, "relu");
  return unary(OpKind::relu, a, map(a.value(), [](double x) { return x > 0.0 ? x : 0.0; }));
}

Var sigmoid(const Var& a) {
  tape_of(a, "sigmoid");
  return unary(OpKind::sigmoid, a, map(a.value(), [](double x) { return sigmoid(x); }));
}

Var softplus(const Var& a) {
  tape_of(a, "softplus");
  return unary(OpKind::softplus, a, map(a.value(), [](double x) { return softplus(x); }));
}

Var softmax(const Var& a) {
  tape_of(a, "softmax");
  const Tensor& A = a.value();
  if (A.rank() != 2) throw ShapeError("softmax: expected a matrix, got " + shape_string(A.shape()));
  Tensor out = Tensor::zeros_like(A);
  const std::size_t n = A.cols();
  for (std::size_t r = 0; r < A.rows(); ++r) {
    double hi = A[r * n];
    for (std::size_t j = 1; j < n; ++j) hi = std::max(hi, A[r * n + j]);
    double total = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      out[r * n + j] = std::exp(A[r * n + j] - hi);
      total += out[r * n + j];
    }
    for (std::size_t j = 0; j < n; ++j) out[r * n + j] /= total;
  }
  return unary(OpKind::softmax, a, std::move(out));
}

Var abs(const Var& a) {
  tape_of(a, "abs");
  return unary(OpKind::abs, a, map(a.value(), [](double x) { return std::abs(x); }));
}

Var square(const Var& a) {
  tape_of(a, "square");
  return unary(OpKind::square, a, map(a.value(), [](double x) { return x * x; }));
}

Var sum(const Var& a) {
  tape_of(a, "sum");
  double s = 0.0;
  for (double v : a.value().data()) s += v;
  return unary(OpKind::sum, a, Tensor::scalar(s));
}

Var mean(const Var& a) {
  tape_of(a, "mean");
  const Tensor& A = a.value();
  if (A.size() == 0) throw ShapeError("mean: empty tensor");
  double s = 0.0;
  for (double v : A.data()) s += v;
  return unary(OpKind::mean, a, Tensor::scalar(s / static_cast<double>(A.size())));
}

Var weighted_sum(const Var& a, const Var& w) {
  tape_of(a, w, "weighted_sum");
  const Tensor& A = a.value();
  const Tensor& W = w.value();
  if (A.shape() != W.shape()) shape_fail("weighted_sum", A.shape(), W.shape());
  double s = 0.0;
  for (std::size_t i = 0; i < A.size(); ++i) s += A[i] * W[i];
  return binary(OpKind::weighted_sum, a, w, Tensor::scalar(s));
}

Var bce_with_logits(const Var& logits, const Tensor& targets) {
  Tape& t = tape_of(logits, "bce_with_logits");
  const Tensor& F = logits.value();
  if (F.shape() != targets.shape()) shape_fail("bce_with_logits", F.shape(), targets.shape());
  Tensor out = zip(F, targets, [](double f, double y) { return softplus(f) - y * f; });
  Spec s{OpKind::bce_logits, std::move(out), logits.id()};
  s.aux = targets;
  return emit(t, std::move(s));
}

Var squared_error(const Var& pred, const Tensor& targets) {
  Tape& t = tape_of(pred, "squared_error");
  const Tensor& P = pred.value();
  if (P.shape() != targets.shape()) shape_fail("squared_error", P.shape(), targets.shape());
  Tensor out = zip(P, targets, [](double p, double y) { return (p - y) * (p - y); });
  Spec s{OpKind::squared_error, std::move(out), pred.id()};
  s.aux = targets;
  return emit(t, std::move(s));
}

Var column(const Var& a, std::size_t j) {
  Tape& t = tape_of(a, "column");
  const Tensor& A = a.value();
  if (A.rank() != 2 || j >= A.cols()) {
    throw ShapeError("column: index " + std::to_string(j) + " out of range for shape " +
                     shape_string(A.shape()));
  }
  Tensor out(Shape{A.rows(), 1});
  for (std::size_t r = 0; r < A.rows(); ++r) out[r] = A.at(r, j);
  Spec s{OpKind::column, std::move(out), a.id()};
  s.index = j;
  return emit(t, std::move(s));
}

Var concat_flat(const std::vector<Var>& parts) {
  if (parts.empty()) throw ShapeError("concat_flat: no operands");
  Tape& t = tape_of(parts.front(), "concat_flat");
  std::vector<double> data;
  bool needs = false;
  std::vector<std::size_t> ids;
  for (const Var& p : parts) {
    TapeAccess::check(p, t, "concat_flat");
    const auto v = p.value().data();
    data.insert(data.end(), v.begin(), v.end());
    needs = needs || TapeAccess::node(t, p.id()).needs_grad;
    ids.push_back(p.id());
  }
  const std::size_t n = data.size();
  TapeAccess::Node node;
  node.op = OpKind::concat_flat;
  node.value = Tensor(Shape{1, n}, std::move(data));
  node.inputs = std::move(ids);
  node.needs_grad = needs;
  return TapeAccess::push(t, std::move(node));
}

Gradients Tape::backward(const Var& output) {
  check_owner(output, "backward");
  if (consumed_) throw Error("backward: tape already consumed by a previous backward()");
  if (!output.value().is_scalar()) {
    throw Error("backward: output must be a scalar, got shape " +
                shape_string(output.value().shape()));
  }
  consumed_ = true;

  std::vector<Tensor> grads(nodes_.size());
  auto acc = [&](std::size_t id) -> Tensor& {
    Tensor& g = grads[id];
    if (g.size() == 0 && nodes_[id].value.size() != 0) g = Tensor::zeros_like(nodes_[id].value);
    return g;
  };
  grads[output.id()] = Tensor(output.value().shape(), 1.0);

  for (std::size_t id = output.id() + 1; id-- > 0;) {
    const Node& n = nodes_[id];
    if (n.op == OpKind::leaf || !n.needs_grad || grads[id].size() == 0) continue;
    const Tensor& g = grads[id];
    const Tensor& A = nodes_[n.lhs].value;
    const Tensor& B = nodes_[n.rhs].value;
    const bool ga = nodes_[n.lhs].needs_grad;
    const bool gb = nodes_[n.rhs].needs_grad;

    switch (n.op) {
      case OpKind::leaf:
        break;
      case OpKind::matmul: {
        const std::size_t m = A.rows(), k = A.cols(), c = B.cols();
        if (ga) {
          Tensor& dA = acc(n.lhs);
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t p = 0; p < k; ++p) {
              double s = 0.0;
              for (std::size_t j = 0; j < c; ++j) s += g[i * c + j] * B[p * c + j];
              dA[i * k + p] += s;
            }
        }
        if (gb) {
          Tensor& dB = acc(n.rhs);
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t p = 0; p < k; ++p) {
              const double aip = A[i * k + p];
              if (aip == 0.0) continue;
              for (std::size_t j = 0; j < c; ++j) dB[p * c + j] += aip * g[i * c + j];
            }
        }
        break;
      }
      case OpKind::add:
      case OpKind::sub: {
        const double sign = n.op == OpKind::add ? 1.0 : -1.0;
        if (ga) {
          Tensor& dA = acc(n.lhs);
          for (std::size_t i = 0; i < g.size(); ++i) dA[i] += g[i];
        }
        if (gb) {
          Tensor& dB = acc(n.rhs);
          for (std::size_t i = 0; i < g.size(); ++i) dB[i] += sign * g[i];
        }
        break;
      }
      case OpKind::add_row: {
        if (ga) {
          Tensor& dA = acc(n.lhs);
          for (std::size_t i = 0; i < g.size(); ++i) dA[i] += g[i];
        }
        if (gb) {
          Tensor& dB = acc(n.rhs);
          const std::size_t c = B.size();
          for (std::size_t i = 0; i < g.size(); ++i) dB[i % c] += g[i];
        }
        break;
      }
      case OpKind::add_scalar:
      case OpKind::sub_scalar: {
        const double sign = n.op == OpKind::add_scalar ? 1.0 : -1.0;
        if (ga) {
          Tensor& dA = acc(n.lhs);
          for (std::size_t i = 0; i < g.size(); ++i) dA[i] += g[i];
        }
        if (gb) {
          double s = 0.0;
          for (double v : g.data()) s += v;
          acc(n.rhs)[0] += sign * s;
        }
        break;
      }
      case OpKind::mul: {
        if (ga) {
          Tensor& dA = acc(n.lhs);
          for (std::size_t i = 0; i < g.size(); ++i) dA[i] += g[i] * B[i];
        }
        if (gb) {
          Tensor& dB = acc(n.rhs);
          for (std::size_t i = 0; i < g.size(); ++i) dB[i] += g[i] * A[i];
        }
        break;
      }
      case OpKind::mul_scalar: {
        const double b = B[0];
        if (ga) {
          Tensor& dA = acc(n.lhs);
          for (std::size_t i = 0; i < g.size(); ++i) dA[i] += g[i] * b;
        }
        if (gb) {
          double s = 0.0;
          for (std::size_t i = 0; i < g.size(); ++i) s += g[i] * A[i];
          acc(n.rhs)[0] += s;
        }
        break;
      }
      case OpKind::div: {
        if (ga) {
          Tensor& dA = acc(n.lhs);
          for (std::size_t i = 0; i < g.size(); ++i) dA[i] += g[i] / B[i];
        }
        if (gb) {
          Tensor& dB = acc(n.rhs);
          for (std::size_t i = 0; i < g.size(); ++i) dB[i] -= g[i] * A[i] / (B[i] * B[i]);
        }
        break;
      }
      case OpKind::div_scalar: {
        const double b = B[0];
        if (ga) {
          Tensor& dA = acc(n.lhs);
          for (std::size_t i = 0; i < g.size(); ++i) dA[i] += g[i] / b;
        }
        if (gb) {
          double s = 0.0;
          for (std::size_t i = 0; i < g.size(); ++i) s += g[i] * A[i];
          acc(n.rhs)[0] -= s / (b * b);
        }
        break;
      }
      case OpKind::safe_div: {
        const double b = B[0];
        if (b == 0.0) break;
        if (ga) acc(n.lhs)[0] += g[0] / b;
        if (gb) acc(n.rhs)[0] -= g[0] * A[0] / (b * b);
        break;
      }
      case OpKind::scale: {
        Tensor& dA = acc(n.lhs);
        for (std::size_t i = 0; i < g.size(); ++i) dA[i] += n.constant * g[i];
        break;
      }
      case OpKind::shift: {
        Tensor& dA = acc(n.lhs);
        for (std::size_t i = 0; i < g.size(); ++i) dA[i] += g[i];
        break;
      }
      case OpKind::relu: {
        Tensor& dA = acc(n.lhs);
        for (std::size_t i = 0; i < g.size(); ++i) dA[i] += A[i] > 0.0 ? g[i] : 0.0;
        break;
      }
      case OpKind::sigmoid: {
        Tensor& dA = acc(n.lhs);
        for (std::size_t i = 0; i < g.size(); ++i) {
          const double s = n.value[i];
          dA[i] += g[i] * s * (1.0 - s);
        }
        break;
      }
      case OpKind::softplus: {
        Tensor& dA = acc(n.lhs);
        for (std::size_t i = 0; i < g.size(); ++i) dA[i] += g[i] * sigmoid(A[i]);
        break;
      }
      case OpKind::softmax: {
        Tensor& dA = acc(n.lhs);
        const std::size_t c = A.cols();
        for (std::size_t r = 0; r < A.rows(); ++r) {
          double dot = 0.0;
          for (std::size_t j = 0; j < c; ++j) dot += g[r * c + j] * n.value[r * c + j];
          for (std::size_t j = 0; j < c; ++j) {
            dA[r * c + j] += n.value[r * c + j] * (g[r * c + j] - dot);
          }
        }
        break;
      }
      case OpKind::abs: {
        Tensor& dA = acc(n.lhs);
        for (std::size_t i = 0; i < g.size(); ++i) dA[i] += g[i] * subgrad_abs(A[i]);
        break;
      }
      case OpKind::square: {
        Tensor& dA = acc(n.lhs);
        for (std::size_t i = 0; i < g.size(); ++i) dA[i] += 2.0 * A[i] * g[i];
        break;
      }
      case OpKind::sum:
      case OpKind::mean: {
        Tensor& dA = acc(n.lhs);
        const double s =
            n.op == OpKind::sum ? g[0] : g[0] / static_cast<double>(A.size());
        for (std::size_t i = 0; i < dA.size(); ++i) dA[i] += s;
        break;
      }
      case OpKind::weighted_sum: {
        if (ga) {
          Tensor& dA = acc(n.lhs);
          for (std::size_t i = 0; i < A.size(); ++i) dA[i] += g[0] * B[i];
        }
        if (gb) {
          Tensor& dB = acc(n.rhs);
          for (std::size_t i = 0; i < A.size(); ++i) dB[i] += g[0] * A[i];
        }
        break;
      }
      case OpKind::bce_logits: {
        Tensor& dA = acc(n.lhs);
        for (std::size_t i = 0; i < g.size(); ++i) dA[i] += g[i] * (sigmoid(A[i]) - n.aux[i]);
        break;
      }
      case OpKind::squared_error: {
        Tensor& dA = acc(n.lhs);
        for (std::size_t i = 0; i < g.size(); ++i) dA[i] += g[i] * 2.0 * (A[i] - n.aux[i]);
        break;
      }
      case OpKind::column: {
        Tensor& dA = acc(n.lhs);
        const std::size_t c = A.cols();
        for (std::size_t r = 0; r < g.size(); ++r) dA[r * c + n.index] += g[r];
        break;
      }
      case OpKind::concat_flat: {
        std::size_t offset = 0;
        for (std::size_t in : n.inputs) {
          const std::size_t len = nodes_[in].value.size();
          if (nodes_[in].needs_grad) {
            Tensor& d = acc(in);
            for (std::size_t i = 0; i < len; ++i) d[i] += g[offset + i];
          }
          offset += len;
        }
        break;
      }
    }
  }

  Gradients out;
  out.tape_ = this;
  out.trainable_.resize(nodes_.size());
  out.grads_.resize(nodes_.size());
  for (std::size_t id = 0; id < nodes_.size(); ++id) {
    const Node& n = nodes_[id];
    if (n.op == OpKind::leaf && n.trainable) {
      out.trainable_[id] = true;
      out.grads_[id] = grads[id].size() == n.value.size() && grads[id].size() != 0
                           ? std::move(grads[id])
                           : Tensor::zeros_like(n.value);
    }
  }
  return out;
}

}  // namespace oodtv
