#include "orbitall/so3.hpp"

#include <cmath>
#include <complex>
#include <map>
#include <mutex>
#include <numbers>
#include <ostream>
#include <tuple>

#include <fmt/format.h>
#include <fmt/ostream.h>

#include "orbitall/errors.hpp"

namespace orbitall::so3 {
namespace {

double factorial(int n) {
  static const std::array<double, 41> table = [] {
    std::array<double, 41> t{};
    t[0] = 1.0;
    for (int i = 1; i < 41; ++i) t[i] = t[i - 1] * i;
    return t;
  }();
  return table.at(n);
}

double binomial(int n, int k) {
  if (k < 0 || k > n) return 0.0;
  return factorial(n) / (factorial(k) * factorial(n - k));
}

// Cartesian expansion of the real regular solid harmonic, Racah normalized
// (S_lm = sqrt(4pi/(2l+1)) r^l Y_lm).
std::vector<Monomial> build_solid_harmonic(int l, int m) {
  const int am = std::abs(m);
  const double norm = 1.0 / (std::pow(2.0, am) * factorial(l)) *
                      std::sqrt(2.0 * factorial(l + am) * factorial(l - am) / (m == 0 ? 2.0 : 1.0));
  const int two_vm = m < 0 ? 1 : 0;
  std::map<std::tuple<int, int, int>, double> acc;
  for (int t = 0; t <= (l - am) / 2; ++t) {
    for (int u = 0; u <= t; ++u) {
      // v runs vm .. floor(|m|/2 - vm) + vm, stored as k = 2v.
      const int v_hi_twice = 2 * static_cast<int>(std::floor(am / 2.0 - two_vm / 2.0)) + two_vm;
      for (int k = two_vm; k <= v_hi_twice; k += 2) {
        const int sign_exp = t + (k - two_vm) / 2;
        const double c = (sign_exp % 2 ? -1.0 : 1.0) * std::pow(0.25, t) * binomial(l, t) *
                         binomial(l - t, am + t) * binomial(t, u) * binomial(am, k);
        const int px = 2 * t + am - 2 * u - k;
        const int py = 2 * u + k;
        const int pz = l - 2 * t - am;
        acc[{px, py, pz}] += norm * c;
      }
    }
  }
  const double to_unit = std::sqrt((2.0 * l + 1.0) / (4.0 * std::numbers::pi));
  std::vector<Monomial> out;
  for (const auto& [powers, c] : acc) {
    if (c == 0.0) continue;
    out.push_back({std::get<0>(powers), std::get<1>(powers), std::get<2>(powers), c * to_unit});
  }
  return out;
}

double ipow(double x, int n) {
  double r = 1.0;
  for (int i = 0; i < n; ++i) r *= x;
  return r;
}

}  // namespace

const std::vector<Monomial>& solid_harmonic(int l, int m) {
  static const std::vector<std::vector<std::vector<Monomial>>> cache = [] {
    std::vector<std::vector<std::vector<Monomial>>> c(kMaxL + 1);
    for (int ll = 0; ll <= kMaxL; ++ll)
      for (int mm = -ll; mm <= ll; ++mm) c[ll].push_back(build_solid_harmonic(ll, mm));
    return c;
  }();
  return cache.at(l).at(m + l);
}

double regular_solid_harmonic(int l, int m, const Eigen::Vector3d& r) {
  double v = 0.0;
  for (const auto& t : solid_harmonic(l, m)) v += t.coef * ipow(r.x(), t.px) * ipow(r.y(), t.py) * ipow(r.z(), t.pz);
  return v;
}

double real_sph_harm(int l, int m, const Eigen::Vector3d& unit) {
  return regular_solid_harmonic(l, m, unit);
}

Eigen::VectorXd real_sph_harm_all(int l, const Eigen::Vector3d& unit) {
  Eigen::VectorXd y(2 * l + 1);
  for (int m = -l; m <= l; ++m) y[m + l] = real_sph_harm(l, m, unit);
  return y;
}

Eigen::MatrixXd wigner_d_real(int l, const Eigen::Matrix3d& r) {
  if (std::abs(r.determinant() - 1.0) > 1e-8) {
    throw InvalidRotation(fmt::format("determinant {} is not +1", r.determinant()));
  }
  if ((r * r.transpose() - Eigen::Matrix3d::Identity()).cwiseAbs().maxCoeff() > 1e-8) {
    throw InvalidRotation("matrix is not orthogonal");
  }
  if (l == 0) return Eigen::MatrixXd::Identity(1, 1);

  // l = 1 block in (y, z, x) order.
  const std::array<int, 3> axis = {1, 2, 0};
  Eigen::MatrixXd d1(3, 3);
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) d1(i, j) = r(axis[i], axis[j]);
  if (l == 1) return d1;

  auto r1 = [&](int i, int j) { return d1(i + 1, j + 1); };
  Eigen::MatrixXd prev = d1;
  for (int ll = 2; ll <= l; ++ll) {
    const int lp = ll - 1;
    auto rp = [&](int a, int b) { return prev(a + lp, b + lp); };
    auto P = [&](int i, int a, int b) {
      if (b == ll) return r1(i, 1) * rp(a, lp) - r1(i, -1) * rp(a, -lp);
      if (b == -ll) return r1(i, 1) * rp(a, -lp) + r1(i, -1) * rp(a, lp);
      return r1(i, 0) * rp(a, b);
    };
    auto U = [&](int m, int n) { return P(0, m, n); };
    auto V = [&](int m, int n) {
      if (m == 0) return P(1, 1, n) + P(-1, -1, n);
      if (m > 0) {
        const double d = m == 1 ? 1.0 : 0.0;
        return P(1, m - 1, n) * std::sqrt(1.0 + d) - P(-1, -m + 1, n) * (1.0 - d);
      }
      const double d = m == -1 ? 1.0 : 0.0;
      return P(1, m + 1, n) * (1.0 - d) + P(-1, -m - 1, n) * std::sqrt(1.0 + d);
    };
    auto W = [&](int m, int n) {
      if (m > 0) return P(1, m + 1, n) + P(-1, -m - 1, n);
      return P(1, m - 1, n) - P(-1, -m + 1, n);
    };
    Eigen::MatrixXd cur(2 * ll + 1, 2 * ll + 1);
    for (int m = -ll; m <= ll; ++m) {
      for (int n = -ll; n <= ll; ++n) {
        const double d = m == 0 ? 1.0 : 0.0;
        const double denom = std::abs(n) == ll ? (2.0 * ll) * (2.0 * ll - 1.0) : double(ll + n) * (ll - n);
        const int am = std::abs(m);
        const double cu = std::sqrt(double(ll + m) * (ll - m) / denom);
        const double cv = 0.5 * std::sqrt((1.0 + d) * (ll + am - 1.0) * (ll + am) / denom) * (1.0 - 2.0 * d);
        const double cw = -0.5 * std::sqrt(std::max(0.0, (ll - am - 1.0) * (ll - am)) / denom) * (1.0 - d);
        double value = 0.0;
        if (cu != 0.0) value += cu * U(m, n);
        if (cv != 0.0) value += cv * V(m, n);
        if (cw != 0.0) value += cw * W(m, n);
        cur(m + ll, n + ll) = value;
      }
    }
    prev = std::move(cur);
  }
  return prev;
}

RotationRep::RotationRep(const Eigen::Matrix3d& rotation, int lmax) : rotation_(rotation) {
  wigner_.reserve(lmax + 1);
  for (int l = 0; l <= lmax; ++l) wigner_.push_back(wigner_d_real(l, rotation));
}

Eigen::Matrix3d random_rotation(std::mt19937_64& rng) {
  std::normal_distribution<double> normal;
  Eigen::Quaterniond q(normal(rng), normal(rng), normal(rng), normal(rng));
  q.normalize();
  return q.toRotationMatrix();
}

Eigen::Matrix3d axis_angle(const Eigen::Vector3d& axis, double angle) {
  return Eigen::AngleAxisd(angle, axis.normalized()).toRotationMatrix();
}

double cg_complex(int j1, int m1, int j2, int m2, int j, int m) {
  if (m1 + m2 != m) return 0.0;
  if (j < std::abs(j1 - j2) || j > j1 + j2) return 0.0;
  if (std::abs(m1) > j1 || std::abs(m2) > j2 || std::abs(m) > j) return 0.0;
  const double pre = std::sqrt((2.0 * j + 1.0) * factorial(j + j1 - j2) * factorial(j - j1 + j2) *
                               factorial(j1 + j2 - j) / factorial(j1 + j2 + j + 1));
  const double pre2 = std::sqrt(factorial(j + m) * factorial(j - m) * factorial(j1 - m1) * factorial(j1 + m1) *
                                factorial(j2 - m2) * factorial(j2 + m2));
  double sum = 0.0;
  for (int k = 0; k <= j1 + j2 - j; ++k) {
    const int a = j1 + j2 - j - k, b = j1 - m1 - k, c = j2 + m2 - k, d = j - j2 + m1 + k, e = j - j1 - m2 + k;
    if (a < 0 || b < 0 || c < 0 || d < 0 || e < 0) continue;
    sum += (k % 2 ? -1.0 : 1.0) /
           (factorial(k) * factorial(a) * factorial(b) * factorial(c) * factorial(d) * factorial(e));
  }
  return pre * pre2 * sum;
}

namespace {

using cplx = std::complex<double>;

// Rows: real index m=-l..l, columns: complex index mu=-l..l, so that
// Y_real = U * Y_complex.
Eigen::MatrixXcd real_from_complex(int l) {
  Eigen::MatrixXcd u = Eigen::MatrixXcd::Zero(2 * l + 1, 2 * l + 1);
  const double s = 1.0 / std::sqrt(2.0);
  for (int m = -l; m <= l; ++m) {
    const int am = std::abs(m);
    const double sign = am % 2 ? -1.0 : 1.0;
    if (m > 0) {
      u(m + l, m + l) = sign * s;
      u(m + l, -m + l) = s;
    } else if (m < 0) {
      u(m + l, -am + l) = cplx(0.0, s);
      u(m + l, am + l) = cplx(0.0, -sign * s);
    } else {
      u(l, l) = 1.0;
    }
  }
  return u;
}

CGBlock build_block(int l1, int l2, int l) {
  const int d1 = 2 * l1 + 1, d2 = 2 * l2 + 1, d = 2 * l + 1;
  const Eigen::MatrixXcd u1 = real_from_complex(l1), u2 = real_from_complex(l2), u = real_from_complex(l);
  std::vector<cplx> c(static_cast<std::size_t>(d1) * d2 * d, cplx(0.0));
  // C_real[a,b,c] = sum U_l[c,gamma] C[alpha,beta,gamma] conj(U_l1[a,alpha]) conj(U_l2[b,beta])
  for (int a = 0; a < d1; ++a)
    for (int b = 0; b < d2; ++b)
      for (int g = 0; g < d; ++g) {
        cplx s = 0.0;
        for (int ma = -l1; ma <= l1; ++ma) {
          const cplx ua = std::conj(u1(a, ma + l1));
          if (ua == cplx(0.0)) continue;
          for (int mb = -l2; mb <= l2; ++mb) {
            const cplx ub = std::conj(u2(b, mb + l2));
            if (ub == cplx(0.0)) continue;
            const int mc = ma + mb;
            if (std::abs(mc) > l) continue;
            s += u(g, mc + l) * cg_complex(l1, ma, l2, mb, l, mc) * ua * ub;
          }
        }
        c[(static_cast<std::size_t>(a) * d2 + b) * d + g] = s;
      }
  // The transformed block is purely real or purely imaginary.
  double re = 0.0, im = 0.0;
  for (const auto& v : c) {
    re += std::abs(v.real());
    im += std::abs(v.imag());
  }
  CGBlock block{l1, l2, l, std::vector<double>(c.size()), {}};
  for (std::size_t i = 0; i < c.size(); ++i) {
    double v = re >= im ? c[i].real() : c[i].imag();
    if (std::abs(v) < 1e-14) v = 0.0;
    block.dense[i] = v;
  }
  // Sign convention: first nonzero entry positive.
  for (double v : block.dense) {
    if (v != 0.0) {
      if (v < 0.0)
        for (double& x : block.dense) x = -x;
      break;
    }
  }
  for (int a = 0; a < d1; ++a)
    for (int b = 0; b < d2; ++b)
      for (int g = 0; g < d; ++g) {
        const double v = block.dense[(static_cast<std::size_t>(a) * d2 + b) * d + g];
        if (v != 0.0) block.nonzeros.push_back({a, b, g, v});
      }
  return block;
}

}  // namespace

const CGBlock& cg_real(int l1, int l2, int l) {
  if (l1 < 0 || l2 < 0 || l < std::abs(l1 - l2) || l > l1 + l2) {
    throw SelectionRuleViolation(fmt::format("({}, {}) cannot couple to {}", l1, l2, l));
  }
  if (l1 > kMaxL || l2 > kMaxL || l > kMaxL) {
    throw SelectionRuleViolation(fmt::format("degree above {} not tabulated", kMaxL));
  }
  static const std::map<std::tuple<int, int, int>, CGBlock> table = [] {
    std::map<std::tuple<int, int, int>, CGBlock> t;
    for (int a = 0; a <= kMaxL; ++a)
      for (int b = 0; b <= kMaxL; ++b)
        for (int c = std::abs(a - b); c <= std::min(a + b, kMaxL); ++c) t.emplace(std::tuple{a, b, c}, build_block(a, b, c));
    return t;
  }();
  return table.at({l1, l2, l});
}

void dump_cg_table(std::ostream& out, int lmax) {
  fmt::print(out, "# l1 l2 l m1 m2 m value\n");
  for (int l1 = 0; l1 <= lmax; ++l1)
    for (int l2 = 0; l2 <= lmax; ++l2)
      for (int l = std::abs(l1 - l2); l <= std::min(l1 + l2, lmax); ++l)
        for (const auto& e : cg_real(l1, l2, l).nonzeros)
          fmt::print(out, "{} {} {} {} {} {} {:.17g}\n", l1, l2, l, e.m1 - l1, e.m2 - l2, e.m - l, e.value);
}

}  // namespace orbitall::so3
