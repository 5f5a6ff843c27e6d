#pragma once

// Reverse-mode differentiation over dense matrices. Every recorded operation
// carries a closure that maps the output gradient to its inputs' gradients.

#include <Eigen/Dense>

#include <concepts>
#include <deque>
#include <functional>
#include <initializer_list>
#include <string>
#include <string_view>
#include <vector>

namespace orbitall::ad {

using Matrix = Eigen::MatrixXd;

/// A named learnable tensor with its accumulated gradient.
struct Parameter {
  std::string name;
  Matrix value;
  Matrix grad;

  void zero_grad() { grad = Matrix::Zero(value.rows(), value.cols()); }
  Eigen::Index size() const { return value.size(); }
};

class Tape;

/// Handle to a tape node.
struct Var {
  Tape* tape = nullptr;
  int id = -1;

  const Matrix& value() const;
  Eigen::Index rows() const { return value().rows(); }
  Eigen::Index cols() const { return value().cols(); }
  double scalar() const { return value()(0, 0); }
};

template <class F>
concept Adjoint = std::invocable<F, const Matrix&>;

class Tape {
 public:
  Var constant(Matrix value);
  /// Leaf bound to `p`; backward() adds its gradient into p.grad.
  Var parameter(Parameter& p);

  /// Records an operation. `adjoint(g)` receives dL/d(output) and must add
  /// the input gradients through grad(). Throws UnregisteredAdjoint when an
  /// input needs a gradient and no adjoint is supplied.
  template <Adjoint F>
  Var record(std::string_view op, Matrix value, std::initializer_list<Var> inputs, F&& adjoint) {
    return record_impl(op, std::move(value), std::vector<Var>(inputs), std::function<void(const Matrix&)>(std::forward<F>(adjoint)));
  }
  template <Adjoint F>
  Var record(std::string_view op, Matrix value, const std::vector<Var>& inputs, F&& adjoint) {
    return record_impl(op, std::move(value), inputs, std::function<void(const Matrix&)>(std::forward<F>(adjoint)));
  }
  Var record_impl(std::string_view op, Matrix value, const std::vector<Var>& inputs,
                  std::function<void(const Matrix&)> adjoint);

  bool requires_grad(Var v) const { return nodes_[v.id].requires_grad; }
  const Matrix& value(Var v) const {
    const Node& n = nodes_[v.id];
    return n.parameter ? n.parameter->value : n.value;
  }
  /// Gradient accumulator of `v` (zero-initialized on first use), or nullptr
  /// when `v` does not depend on any parameter.
  Matrix* grad(Var v);

  /// Seeds d(loss)/d(loss) = 1 and sweeps the tape in reverse. `loss` must be 1x1.
  void backward(Var loss);

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Matrix value;
    Matrix grad;
    bool requires_grad = false;
    std::function<void(const Matrix&)> adjoint;
    Parameter* parameter = nullptr;
    std::string_view op;
  };
  std::deque<Node> nodes_;
};

// Generic operations. Shapes follow Eigen conventions.
Var matmul(Var a, Var b);
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);  // elementwise
Var scale(Var a, double s);
Var add_scalar(Var a, double s);
/// a (r x c) plus row vector b (1 x c) broadcast over rows.
Var add_row(Var a, Var b);
/// a (r x c) times row vector b (1 x c) broadcast over rows.
Var mul_row(Var a, Var b);
Var reciprocal(Var a);
Var swish(Var a);
Var sigmoid(Var a);
Var softplus(Var a);
Var sum(Var a);                 // 1x1
Var sum_rows(Var a);            // 1 x cols
Var concat_cols(const std::vector<Var>& parts);
Var slice_cols(Var a, int start, int count);
/// Rows of `a` picked by `index` (repeats allowed).
Var gather_rows(Var a, const std::vector<int>& index);
/// (x - mean) / sqrt(var + eps) across each row.
Var normalize_rows(Var a, double eps = 1e-5);
/// (x - mean) / sqrt(var + eps) down each column.
Var normalize_cols(Var a, double eps = 1e-5);
/// Smooth-L1 (Huber) loss summed over entries, e = pred - label.
Var smooth_l1(Var pred, const Matrix& label, double delta);

/// Scalar loss as plain double and its derivative, for tests and metrics.
double smooth_l1_value(double e, double delta);
double smooth_l1_derivative(double e, double delta);

}  // namespace orbitall::ad
