#include "orbitall/autodiff.hpp"

#include <cmath>

#include <fmt/format.h>

#include "orbitall/errors.hpp"

namespace orbitall::ad {

const Matrix& Var::value() const { return tape->value(*this); }

Var Tape::constant(Matrix value) {
  nodes_.push_back(Node{std::move(value), {}, false, {}, nullptr, "constant"});
  return {this, static_cast<int>(nodes_.size()) - 1};
}

Var Tape::parameter(Parameter& p) {
  nodes_.push_back(Node{Matrix(), {}, true, {}, &p, "parameter"});
  return {this, static_cast<int>(nodes_.size()) - 1};
}

Var Tape::record_impl(std::string_view op, Matrix value, const std::vector<Var>& inputs,
                      std::function<void(const Matrix&)> adjoint) {
  bool needs = false;
  for (const Var& v : inputs) {
    if (v.tape != this) throw InvariantViolation(fmt::format("operation {} mixes tapes", op));
    needs = needs || nodes_[v.id].requires_grad;
  }
  if (needs && !adjoint) throw UnregisteredAdjoint(fmt::format("operation {} has no adjoint", op));
  Node n{std::move(value), {}, needs, {}, nullptr, op};
  if (needs) n.adjoint = std::move(adjoint);
  nodes_.push_back(std::move(n));
  return {this, static_cast<int>(nodes_.size()) - 1};
}

Matrix* Tape::grad(Var v_) {
  Node& n = nodes_[v_.id];
  if (!n.requires_grad) return nullptr;
  const Matrix& v = value(v_);
  if (n.grad.size() == 0 && v.size() != 0) n.grad = Matrix::Zero(v.rows(), v.cols());
  return &n.grad;
}

void Tape::backward(Var loss) {
  if (loss.rows() != 1 || loss.cols() != 1) throw InvariantViolation("backward needs a scalar loss");
  if (!requires_grad(loss)) return;
  *grad(loss) = Matrix::Constant(1, 1, 1.0);
  for (int i = loss.id; i >= 0; --i) {
    Node& n = nodes_[i];
    if (!n.requires_grad || n.grad.size() == 0) continue;
    if (n.adjoint) n.adjoint(n.grad);
    if (n.parameter) {
      if (n.parameter->grad.size() != n.parameter->value.size()) n.parameter->zero_grad();
      n.parameter->grad += n.grad;
    }
  }
}

namespace {

void accumulate(Var v, const Matrix& g) {
  if (Matrix* t = v.tape->grad(v)) *t += g;
}

template <class F>
Var unary(std::string_view op, Var a, Matrix value, F&& local_derivative) {
  return a.tape->record(op, std::move(value), {a}, [a, d = std::forward<F>(local_derivative)](const Matrix& g) {
    accumulate(a, g.cwiseProduct(d(a.value())));
  });
}

double sigmoid_value(double x) { return 1.0 / (1.0 + std::exp(-x)); }

}  // namespace

Var matmul(Var a, Var b) {
  return a.tape->record("matmul", a.value() * b.value(), {a, b}, [a, b](const Matrix& g) {
    if (Matrix* ga = a.tape->grad(a)) ga->noalias() += g * b.value().transpose();
    if (Matrix* gb = b.tape->grad(b)) gb->noalias() += a.value().transpose() * g;
  });
}

Var add(Var a, Var b) {
  return a.tape->record("add", a.value() + b.value(), {a, b}, [a, b](const Matrix& g) {
    accumulate(a, g);
    accumulate(b, g);
  });
}

Var sub(Var a, Var b) {
  return a.tape->record("sub", a.value() - b.value(), {a, b}, [a, b](const Matrix& g) {
    accumulate(a, g);
    accumulate(b, -g);
  });
}

Var mul(Var a, Var b) {
  return a.tape->record("mul", a.value().cwiseProduct(b.value()), {a, b}, [a, b](const Matrix& g) {
    accumulate(a, g.cwiseProduct(b.value()));
    accumulate(b, g.cwiseProduct(a.value()));
  });
}

Var scale(Var a, double s) {
  return a.tape->record("scale", a.value() * s, {a}, [a, s](const Matrix& g) { accumulate(a, g * s); });
}

Var add_scalar(Var a, double s) {
  return a.tape->record("add_scalar", (a.value().array() + s).matrix(), {a}, [a](const Matrix& g) { accumulate(a, g); });
}

Var add_row(Var a, Var b) {
  if (b.rows() != 1 || b.cols() != a.cols()) throw InvariantViolation("add_row shape mismatch");
  return a.tape->record("add_row", a.value().rowwise() + b.value().row(0), {a, b}, [a, b](const Matrix& g) {
    accumulate(a, g);
    accumulate(b, g.colwise().sum());
  });
}

Var mul_row(Var a, Var b) {
  if (b.rows() != 1 || b.cols() != a.cols()) throw InvariantViolation("mul_row shape mismatch");
  Matrix v = a.value() * b.value().row(0).asDiagonal();
  return a.tape->record("mul_row", std::move(v), {a, b}, [a, b](const Matrix& g) {
    accumulate(a, g * b.value().row(0).asDiagonal());
    accumulate(b, g.cwiseProduct(a.value()).colwise().sum());
  });
}

Var reciprocal(Var a) {
  return unary("reciprocal", a, a.value().cwiseInverse(),
               [](const Matrix& x) { return Matrix(-x.array().square().inverse()); });
}

Var swish(Var a) {
  Matrix v = a.value().unaryExpr([](double x) { return x * sigmoid_value(x); });
  return unary("swish", a, std::move(v), [](const Matrix& x) {
    return Matrix(x.unaryExpr([](double t) {
      const double s = sigmoid_value(t);
      return s + t * s * (1.0 - s);
    }));
  });
}

Var sigmoid(Var a) {
  return unary("sigmoid", a, a.value().unaryExpr(&sigmoid_value), [](const Matrix& x) {
    return Matrix(x.unaryExpr([](double t) {
      const double s = sigmoid_value(t);
      return s * (1.0 - s);
    }));
  });
}

Var softplus(Var a) {
  Matrix v = a.value().unaryExpr([](double x) { return x > 30.0 ? x : std::log1p(std::exp(x)); });
  return unary("softplus", a, std::move(v), [](const Matrix& x) { return Matrix(x.unaryExpr(&sigmoid_value)); });
}

Var sum(Var a) {
  return a.tape->record("sum", Matrix::Constant(1, 1, a.value().sum()), {a}, [a](const Matrix& g) {
    accumulate(a, Matrix::Constant(a.rows(), a.cols(), g(0, 0)));
  });
}

Var sum_rows(Var a) {
  return a.tape->record("sum_rows", a.value().colwise().sum(), {a}, [a](const Matrix& g) {
    accumulate(a, g.replicate(a.rows(), 1));
  });
}

Var concat_cols(const std::vector<Var>& parts) {
  if (parts.empty()) throw InvariantViolation("concat_cols of nothing");
  const Eigen::Index rows = parts[0].rows();
  Eigen::Index cols = 0;
  for (const Var& p : parts) {
    if (p.rows() != rows) throw InvariantViolation("concat_cols row mismatch");
    cols += p.cols();
  }
  Matrix v(rows, cols);
  Eigen::Index c = 0;
  for (const Var& p : parts) {
    v.middleCols(c, p.cols()) = p.value();
    c += p.cols();
  }
  return parts[0].tape->record("concat_cols", std::move(v), parts, [parts](const Matrix& g) {
    Eigen::Index off = 0;
    for (const Var& p : parts) {
      accumulate(p, g.middleCols(off, p.cols()));
      off += p.cols();
    }
  });
}

Var slice_cols(Var a, int start, int count) {
  return a.tape->record("slice_cols", a.value().middleCols(start, count), {a}, [a, start, count](const Matrix& g) {
    if (Matrix* ga = a.tape->grad(a)) ga->middleCols(start, count) += g;
  });
}

Var gather_rows(Var a, const std::vector<int>& index) {
  Matrix v(static_cast<Eigen::Index>(index.size()), a.cols());
  for (std::size_t r = 0; r < index.size(); ++r) v.row(r) = a.value().row(index[r]);
  return a.tape->record("gather_rows", std::move(v), {a}, [a, index](const Matrix& g) {
    if (Matrix* ga = a.tape->grad(a))
      for (std::size_t r = 0; r < index.size(); ++r) ga->row(index[r]) += g.row(r);
  });
}

namespace {

// Standardizes the columns of x (n samples per column); returns the
// inverse standard deviations for the adjoint.
Matrix standardize_columns(const Matrix& x, double eps, Eigen::VectorXd& inv_std) {
  const Eigen::Index n = x.rows();
  Matrix y(x.rows(), x.cols());
  inv_std.resize(x.cols());
  for (Eigen::Index c = 0; c < x.cols(); ++c) {
    const double mean = x.col(c).mean();
    const double var = (x.col(c).array() - mean).square().sum() / n;
    inv_std[c] = 1.0 / std::sqrt(var + eps);
    y.col(c) = (x.col(c).array() - mean) * inv_std[c];
  }
  return y;
}

// Adjoint of column standardization given y and 1/std.
Matrix standardize_columns_adjoint(const Matrix& y, const Eigen::VectorXd& inv_std, const Matrix& g) {
  const double n = static_cast<double>(y.rows());
  Matrix out(y.rows(), y.cols());
  for (Eigen::Index c = 0; c < y.cols(); ++c) {
    const double gm = g.col(c).mean();
    const double gy = g.col(c).dot(y.col(c)) / n;
    out.col(c) = inv_std[c] * (g.col(c).array() - gm - y.col(c).array() * gy);
  }
  return out;
}

}  // namespace

Var normalize_cols(Var a, double eps) {
  Eigen::VectorXd inv_std;
  Matrix y = standardize_columns(a.value(), eps, inv_std);
  Matrix y_copy = y;
  return a.tape->record("normalize_cols", std::move(y), {a}, [a, y = std::move(y_copy), inv_std](const Matrix& g) {
    accumulate(a, standardize_columns_adjoint(y, inv_std, g));
  });
}

Var normalize_rows(Var a, double eps) {
  Eigen::VectorXd inv_std;
  Matrix yt = standardize_columns(a.value().transpose(), eps, inv_std);
  Matrix y = yt.transpose();
  return a.tape->record("normalize_rows", std::move(y), {a}, [a, yt = std::move(yt), inv_std](const Matrix& g) {
    accumulate(a, standardize_columns_adjoint(yt, inv_std, g.transpose()).transpose());
  });
}

double smooth_l1_value(double e, double delta) {
  const double a = std::abs(e);
  return a < delta ? 0.5 * e * e / delta : a - 0.5 * delta;
}

double smooth_l1_derivative(double e, double delta) {
  return std::abs(e) < delta ? e / delta : (e > 0 ? 1.0 : -1.0);
}

Var smooth_l1(Var pred, const Matrix& label, double delta) {
  if (!(delta > 0.0)) throw ConfigError("smooth-L1 threshold must be positive");
  const Matrix e = pred.value() - label;
  double total = 0.0;
  for (Eigen::Index i = 0; i < e.size(); ++i) total += smooth_l1_value(e.data()[i], delta);
  return pred.tape->record("smooth_l1", Matrix::Constant(1, 1, total), {pred}, [pred, e, delta](const Matrix& g) {
    accumulate(pred, g(0, 0) * e.unaryExpr([delta](double x) { return smooth_l1_derivative(x, delta); }));
  });
}

}  // namespace orbitall::ad
