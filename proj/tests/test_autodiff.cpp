#include <catch_amalgamated.hpp>

#include <cmath>
#include <functional>
#include <random>

#include "fixtures.hpp"
#include "orbitall/autodiff.hpp"
#include "orbitall/errors.hpp"
#include "orbitall/network.hpp"
#include "orbitall/scf.hpp"

using namespace orbitall;
using ad::Matrix;
using ad::Var;

namespace {

Matrix random_matrix(int r, int c, std::mt19937_64& rng) {
  std::normal_distribution<double> g;
  Matrix m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = g(rng);
  return m;
}

// Loss = sum(w .* f(params)) with a fixed random weighting w, so every
// output entry contributes a distinct cotangent.
using Builder = std::function<Var(ad::Tape&, std::vector<Var>&)>;

double relative_fd_error(std::vector<ad::Parameter>& params, const Builder& build, std::mt19937_64& rng) {
  Matrix weights;
  auto loss = [&](ad::Tape& tape) {
    std::vector<Var> leaves;
    for (auto& p : params) leaves.push_back(tape.parameter(p));
    Var out = build(tape, leaves);
    if (weights.size() == 0) weights = random_matrix(static_cast<int>(out.rows()), static_cast<int>(out.cols()), rng);
    return ad::sum(ad::mul(out, tape.constant(weights)));
  };
  for (auto& p : params) p.zero_grad();
  {
    ad::Tape tape;
    tape.backward(loss(tape));
  }
  double diff2 = 0.0, ref2 = 0.0;
  const double h = 1e-6;
  for (auto& p : params) {
    Matrix fd(p.value.rows(), p.value.cols());
    for (Eigen::Index i = 0; i < p.value.size(); ++i) {
      const double saved = p.value.data()[i];
      p.value.data()[i] = saved + h;
      ad::Tape t1;
      const double up = loss(t1).scalar();
      p.value.data()[i] = saved - h;
      ad::Tape t2;
      const double down = loss(t2).scalar();
      p.value.data()[i] = saved;
      fd.data()[i] = (up - down) / (2 * h);
    }
    diff2 += (fd - p.grad).squaredNorm();
    ref2 += p.grad.squaredNorm();
  }
  return std::sqrt(diff2 / ref2);
}

ad::Parameter param(const char* name, int r, int c, std::mt19937_64& rng) { return {name, random_matrix(r, c, rng), {}}; }

}  // namespace

TEST_CASE("elementwise and linear ops match finite differences") {
  std::mt19937_64 rng(11);
  std::vector<ad::Parameter> ps{param("a", 4, 3, rng), param("b", 4, 3, rng), param("w", 3, 5, rng),
                                param("r", 1, 3, rng)};
  SECTION("matmul add sub scale") {
    CHECK(relative_fd_error(ps, [](ad::Tape&, std::vector<Var>& v) {
            return ad::matmul(ad::scale(ad::sub(ad::add(v[0], v[1]), v[1]), 1.7), v[2]);
          }, rng) < 1e-7);
  }
  SECTION("mul add_row mul_row add_scalar") {
    CHECK(relative_fd_error(ps, [](ad::Tape&, std::vector<Var>& v) {
            return ad::add_scalar(ad::mul_row(ad::add_row(ad::mul(v[0], v[1]), v[3]), v[3]), 0.3);
          }, rng) < 1e-7);
  }
  SECTION("swish sigmoid softplus") {
    CHECK(relative_fd_error(ps, [](ad::Tape&, std::vector<Var>& v) {
            return ad::add(ad::swish(v[0]), ad::mul(ad::sigmoid(v[1]), ad::softplus(v[0])));
          }, rng) < 1e-7);
  }
  SECTION("reciprocal") {
    CHECK(relative_fd_error(ps, [](ad::Tape&, std::vector<Var>& v) {
            return ad::reciprocal(ad::add_scalar(ad::mul(v[0], v[0]), 0.5));
          }, rng) < 1e-7);
  }
}

TEST_CASE("structural ops match finite differences") {
  std::mt19937_64 rng(12);
  std::vector<ad::Parameter> ps{param("a", 5, 3, rng), param("b", 5, 2, rng)};
  SECTION("concat slice gather") {
    CHECK(relative_fd_error(ps, [](ad::Tape&, std::vector<Var>& v) {
            Var c = ad::concat_cols({v[0], v[1], v[0]});
            return ad::gather_rows(ad::slice_cols(c, 2, 4), {4, 0, 0, 2});
          }, rng) < 1e-7);
  }
  SECTION("sum and sum_rows") {
    CHECK(relative_fd_error(ps, [](ad::Tape&, std::vector<Var>& v) {
            return ad::add(ad::sum_rows(ad::mul(v[0], v[0])), ad::matmul(ad::sum(v[1]), ad::sum_rows(v[0])));
          }, rng) < 1e-7);
  }
  SECTION("row and column normalization") {
    CHECK(relative_fd_error(ps, [](ad::Tape&, std::vector<Var>& v) {
            return ad::concat_cols({ad::normalize_rows(v[0]), ad::normalize_cols(v[1])});
          }, rng) < 1e-6);
  }
  SECTION("smooth L1 on both branches") {
    CHECK(relative_fd_error(ps, [](ad::Tape&, std::vector<Var>& v) {
            Matrix label = Matrix::Constant(5, 3, 0.2);
            return ad::smooth_l1(v[0], label, 1.0);
          }, rng) < 1e-7);
  }
}

TEST_CASE("smooth L1 closed form") {
  CHECK(ad::smooth_l1_value(0.0, 1.0) == 0.0);
  CHECK(ad::smooth_l1_value(2.0, 1.0) == 1.5);
  CHECK(ad::smooth_l1_value(-2.0, 1.0) == 1.5);
  CHECK(ad::smooth_l1_value(0.5, 1.0) == 0.125);
  // Both branches give slope 1 at |e| = delta.
  CHECK(ad::smooth_l1_derivative(1.0, 1.0) == 1.0);
  CHECK(ad::smooth_l1_derivative(1.0 - 1e-12, 1.0) == Catch::Approx(1.0).epsilon(1e-11));
  ad::Tape tape;
  CHECK_THROWS_AS(ad::smooth_l1(tape.constant(Matrix::Zero(1, 1)), Matrix::Zero(1, 1), 0.0), ConfigError);
}

TEST_CASE("tape bookkeeping") {
  std::mt19937_64 rng(3);
  ad::Parameter used = param("used", 2, 2, rng);
  ad::Parameter unused = param("unused", 2, 2, rng);
  ad::Tape tape;
  Var u = tape.parameter(used);
  tape.parameter(unused);
  Var c = tape.constant(random_matrix(2, 2, rng));
  tape.backward(ad::sum(ad::mul(u, c)));
  CHECK(used.grad.isApprox(c.value()));
  // A parameter the loss does not touch keeps an exactly zero gradient.
  unused.zero_grad();
  CHECK(unused.grad.cwiseAbs().maxCoeff() == 0.0);
  CHECK(tape.grad(c) == nullptr);

  // Gradients accumulate across backward passes until zeroed.
  ad::Tape again;
  again.backward(ad::sum(ad::mul(again.parameter(used), again.constant(c.value()))));
  CHECK(used.grad.isApprox(2.0 * c.value()));
}

TEST_CASE("recording without an adjoint") {
  ad::Parameter p{"p", Matrix::Ones(1, 1), {}};
  ad::Tape tape;
  Var v = tape.parameter(p);
  CHECK_THROWS_AS(tape.record_impl("custom", Matrix::Ones(1, 1), {v}, nullptr), UnregisteredAdjoint);
  // Constant-only inputs need no adjoint.
  Var c = tape.constant(Matrix::Ones(1, 1));
  CHECK_NOTHROW(tape.record_impl("custom", Matrix::Ones(1, 1), {c}, nullptr));
  ad::Tape other;
  CHECK_THROWS_AS(ad::add(v, other.constant(Matrix::Ones(1, 1))), InvariantViolation);
}

TEST_CASE("energy head weight gradient is the summed atom content") {
  const auto sys = fixtures::water();
  const auto scf = run_scf(sys);
  const auto in = prepare_input(sys, scf.qmm);
  Model model(ModelConfig::scaled(32), 5, Init::random);
  ForwardOptions opts;
  opts.keep_states = true;
  model.zero_grad();
  ad::Tape tape;
  auto res = model.forward(in, tape, opts);
  tape.backward(res.output);
  const Matrix content = invariant_content(res.states.back(), model.config().evnorm_epsilon);
  const Matrix expected = content.colwise().sum().transpose();
  const auto& w_o = model.parameter("head.w_o");
  REQUIRE(w_o.grad.rows() == expected.rows());
  CHECK((w_o.grad - expected).cwiseAbs().maxCoeff() < 1e-12 * (1.0 + expected.cwiseAbs().maxCoeff()));
  // b_Z receives the element counts, b_Q a one-hot at the charge.
  const auto& b_z = model.parameter("head.b_z");
  CHECK(b_z.grad(model.element_index(8), 0) == 1.0);
  CHECK(b_z.grad(model.element_index(1), 0) == 2.0);
  CHECK(model.parameter("head.b_q").grad(2, 0) == 1.0);
}
