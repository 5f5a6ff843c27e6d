#include <catch_amalgamated.hpp>

#include <cmath>
#include <numbers>
#include <random>

#include "oracles/cg_ladder.hpp"
#include "oracles/sphere_quadrature.hpp"
#include "orbitall/errors.hpp"
#include "orbitall/so3.hpp"

using namespace orbitall;
using Catch::Matchers::WithinAbs;

namespace {

Eigen::Vector3d random_unit(std::mt19937_64& rng) {
  std::normal_distribution<double> n;
  Eigen::Vector3d v(n(rng), n(rng), n(rng));
  return v.normalized();
}

}  // namespace

TEST_CASE("real spherical harmonics closed forms") {
  const double c0 = 1.0 / std::sqrt(4.0 * std::numbers::pi);
  CHECK_THAT(so3::real_sph_harm(0, 0, Eigen::Vector3d(0.3, -0.4, std::sqrt(0.75))), WithinAbs(c0, 1e-15));
  CHECK_THAT(so3::real_sph_harm(1, 0, Eigen::Vector3d::UnitZ()), WithinAbs(std::sqrt(3.0 / (4.0 * std::numbers::pi)), 1e-15));
  // (y, z, x) ordering, no Condon-Shortley sign.
  const double c1 = std::sqrt(3.0 / (4.0 * std::numbers::pi));
  CHECK_THAT(so3::real_sph_harm(1, -1, Eigen::Vector3d::UnitY()), WithinAbs(c1, 1e-15));
  CHECK_THAT(so3::real_sph_harm(1, 1, Eigen::Vector3d::UnitX()), WithinAbs(c1, 1e-15));
}

TEST_CASE("real spherical harmonics are orthonormal on a product grid") {
  const auto grid = oracle::sphere_grid(16);
  const int lmax = 4;
  const int n = (lmax + 1) * (lmax + 1);
  Eigen::MatrixXd gram = Eigen::MatrixXd::Zero(n, n);
  for (const auto& p : grid) {
    Eigen::VectorXd y(n);
    int k = 0;
    for (int l = 0; l <= lmax; ++l)
      for (int m = -l; m <= l; ++m) y[k++] = so3::real_sph_harm(l, m, p.x);
    gram += p.w * y * y.transpose();
  }
  CHECK((gram - Eigen::MatrixXd::Identity(n, n)).cwiseAbs().maxCoeff() < 1e-8);
}

TEST_CASE("Wigner blocks: identity, l=1 form, defining property") {
  std::mt19937_64 rng(7);
  for (int l = 0; l <= 4; ++l) {
    const auto d = so3::wigner_d_real(l, Eigen::Matrix3d::Identity());
    CHECK((d - Eigen::MatrixXd::Identity(2 * l + 1, 2 * l + 1)).cwiseAbs().maxCoeff() < 1e-14);
  }
  const Eigen::Matrix3d r = so3::random_rotation(rng);
  const auto d1 = so3::wigner_d_real(1, r);
  const auto d1_oracle = oracle::sampled_wigner(1, r, rng);
  CHECK((d1 - d1_oracle).cwiseAbs().maxCoeff() < 1e-10);

  for (int trial = 0; trial < 20; ++trial) {
    const Eigen::Matrix3d rot = so3::random_rotation(rng);
    for (int l = 0; l <= 4; ++l) {
      const auto d = so3::wigner_d_real(l, rot);
      double worst = 0.0;
      for (int k = 0; k < 50; ++k) {
        const Eigen::Vector3d v = random_unit(rng);
        worst = std::max(worst, (so3::real_sph_harm_all(l, rot * v) - d * so3::real_sph_harm_all(l, v)).cwiseAbs().maxCoeff());
      }
      INFO("l=" << l);
      CHECK(worst < 1e-10);
      CHECK((d * d.transpose() - Eigen::MatrixXd::Identity(2 * l + 1, 2 * l + 1)).cwiseAbs().maxCoeff() < 1e-12);
      CHECK((d - oracle::sampled_wigner(l, rot, rng)).cwiseAbs().maxCoeff() < 1e-10);
    }
  }
}

TEST_CASE("Wigner homomorphism") {
  std::mt19937_64 rng(11);
  for (int trial = 0; trial < 20; ++trial) {
    const Eigen::Matrix3d a = so3::random_rotation(rng), b = so3::random_rotation(rng);
    for (int l = 0; l <= 4; ++l) {
      const auto lhs = so3::wigner_d_real(l, a * b);
      const Eigen::MatrixXd rhs = so3::wigner_d_real(l, a) * so3::wigner_d_real(l, b);
      CHECK((lhs - rhs).cwiseAbs().maxCoeff() < 1e-10);
    }
  }
}

TEST_CASE("Wigner rejects improper matrices") {
  Eigen::Matrix3d reflect = Eigen::Matrix3d::Identity();
  reflect(2, 2) = -1.0;
  CHECK_THROWS_AS(so3::wigner_d_real(1, reflect), InvalidRotation);
  CHECK_THROWS_AS(so3::RotationRep(2.0 * Eigen::Matrix3d::Identity(), 2), InvalidRotation);
}

TEST_CASE("RotationRep caches every block up to lmax") {
  std::mt19937_64 rng(3);
  const Eigen::Matrix3d r = so3::random_rotation(rng);
  const so3::RotationRep rep(r, 4);
  CHECK(rep.lmax() == 4);
  CHECK((rep.wigner(3) - so3::wigner_d_real(3, r)).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("CG small cases") {
  const auto& c000 = so3::cg_real(0, 0, 0);
  REQUIRE(c000.nonzeros.size() == 1);
  CHECK_THAT(c000.nonzeros[0].value, WithinAbs(1.0, 1e-15));

  // (1,1)->0 is the dot product pattern.
  const auto& c110 = so3::cg_real(1, 1, 0);
  for (int a = -1; a <= 1; ++a)
    for (int b = -1; b <= 1; ++b)
      CHECK_THAT(std::abs(c110.at(a, b, 0)), WithinAbs(a == b ? 1.0 / std::sqrt(3.0) : 0.0, 1e-14));
  CHECK(c110.at(-1, -1, 0) * c110.at(1, 1, 0) > 0.0);

  // (1,1)->1 is antisymmetric (cross product).
  const auto& c111 = so3::cg_real(1, 1, 1);
  for (int a = -1; a <= 1; ++a)
    for (int b = -1; b <= 1; ++b)
      for (int m = -1; m <= 1; ++m) CHECK_THAT(c111.at(a, b, m) + c111.at(b, a, m), WithinAbs(0.0, 1e-14));
  CHECK_THAT(std::abs(c111.at(-1, 0, 1)), WithinAbs(1.0 / std::sqrt(2.0), 1e-14));

  CHECK_THROWS_AS(so3::cg_real(1, 1, 3), SelectionRuleViolation);
  CHECK_THROWS_AS(so3::cg_real(2, 0, 1), SelectionRuleViolation);
}

TEST_CASE("CG agrees with the ladder-operator oracle") {
  double worst = 0.0;
  for (int l1 = 0; l1 <= 4; ++l1)
    for (int l2 = 0; l2 <= 4; ++l2)
      for (int l = std::abs(l1 - l2); l <= std::min(l1 + l2, 4); ++l) {
        const auto expected = oracle::ladder_real_cg(l1, l2, l);
        const auto& got = so3::cg_real(l1, l2, l).dense;
        REQUIRE(expected.size() == got.size());
        for (std::size_t i = 0; i < got.size(); ++i) worst = std::max(worst, std::abs(expected[i] - got[i]));
      }
  CHECK(worst < 1e-12);
}

TEST_CASE("CG agrees with the triple-product quadrature oracle") {
  const auto grid = oracle::sphere_grid(14);
  for (int l1 = 0; l1 <= 3; ++l1)
    for (int l2 = 0; l2 <= 3; ++l2)
      for (int l = std::abs(l1 - l2); l <= std::min(l1 + l2, 4); ++l) {
        if ((l1 + l2 + l) % 2) continue;  // Gaunt integrals vanish
        const auto& block = so3::cg_real(l1, l2, l);
        const auto cg0 = oracle::ladder_cg(l1, l2).at({0, 0, l, 0});
        const double kappa = std::sqrt((2.0 * l1 + 1) * (2.0 * l2 + 1) / (4.0 * std::numbers::pi * (2.0 * l + 1))) * cg0;
        std::vector<double> gaunt(block.dense.size(), 0.0);
        for (const auto& p : grid) {
          const auto y1 = so3::real_sph_harm_all(l1, p.x), y2 = so3::real_sph_harm_all(l2, p.x),
                     y = so3::real_sph_harm_all(l, p.x);
          for (int a = 0; a <= 2 * l1; ++a)
            for (int b = 0; b <= 2 * l2; ++b)
              for (int c = 0; c <= 2 * l; ++c) gaunt[(a * (2 * l2 + 1) + b) * (2 * l + 1) + c] += p.w * y1[a] * y2[b] * y[c];
        }
        // Same overall sign for the whole block.
        double sign = 0.0;
        for (std::size_t i = 0; i < gaunt.size(); ++i)
          if (std::abs(block.dense[i]) > 1e-3) {
            sign = (gaunt[i] / kappa) / block.dense[i] > 0 ? 1.0 : -1.0;
            break;
          }
        double worst = 0.0;
        for (std::size_t i = 0; i < gaunt.size(); ++i) worst = std::max(worst, std::abs(gaunt[i] / kappa - sign * block.dense[i]));
        INFO(l1 << " " << l2 << " " << l);
        CHECK(worst < 1e-6);
      }
}

TEST_CASE("CG orthogonality") {
  for (int l1 = 0; l1 <= 4; ++l1)
    for (int l2 = 0; l2 <= 4; ++l2) {
      for (int la = std::abs(l1 - l2); la <= std::min(l1 + l2, so3::kMaxL); ++la)
        for (int lb = std::abs(l1 - l2); lb <= std::min(l1 + l2, so3::kMaxL); ++lb) {
          const auto& a = so3::cg_real(l1, l2, la);
          const auto& b = so3::cg_real(l1, l2, lb);
          for (int ma = -la; ma <= la; ++ma)
            for (int mb = -lb; mb <= lb; ++mb) {
              double s = 0.0;
              for (int m1 = -l1; m1 <= l1; ++m1)
                for (int m2 = -l2; m2 <= l2; ++m2) s += a.at(m1, m2, ma) * b.at(m1, m2, mb);
              CHECK_THAT(s, WithinAbs(la == lb && ma == mb ? 1.0 : 0.0, 1e-12));
            }
        }
    }
}

TEST_CASE("CG coupling commutes with rotation") {
  std::mt19937_64 rng(5);
  std::normal_distribution<double> normal;
  double worst = 0.0;
  for (int trial = 0; trial < 30; ++trial) {
    const Eigen::Matrix3d r = so3::random_rotation(rng);
    for (int l1 = 0; l1 <= 2; ++l1)
      for (int l2 = 0; l2 <= 2; ++l2)
        for (int l = std::abs(l1 - l2); l <= l1 + l2; ++l) {
          Eigen::VectorXd x(2 * l1 + 1), y(2 * l2 + 1);
          for (auto& v : x) v = normal(rng);
          for (auto& v : y) v = normal(rng);
          const auto& cg = so3::cg_real(l1, l2, l);
          auto couple = [&](const Eigen::VectorXd& a, const Eigen::VectorXd& b) {
            Eigen::VectorXd out = Eigen::VectorXd::Zero(2 * l + 1);
            for (const auto& e : cg.nonzeros) out[e.m] += e.value * a[e.m1] * b[e.m2];
            return out;
          };
          const auto d1 = so3::wigner_d_real(l1, r), d2 = so3::wigner_d_real(l2, r), d = so3::wigner_d_real(l, r);
          worst = std::max(worst, (couple(d1 * x, d2 * y) - d * couple(x, y)).cwiseAbs().maxCoeff());
        }
  }
  CHECK(worst < 1e-9);
}
