#include "orbitall/integrals.hpp"

#include <cmath>
#include <numbers>

#include <fmt/format.h>

#include "orbitall/errors.hpp"
#include "orbitall/so3.hpp"

namespace orbitall {
namespace {

// 1D overlap table s[i][j] = int (x-A)^i (x-B)^j exp(-a(x-A)^2 - b(x-B)^2) dx
// by the Obara-Saika recurrence.
struct Overlap1D {
  std::array<std::array<double, 5>, 5> s{};

  Overlap1D(double a, double b, double xa, double xb, int imax, int jmax) {
    const double p = a + b;
    const double xp = (a * xa + b * xb) / p;
    const double mu = a * b / p;
    const double xab = xa - xb;
    const double pa = xp - xa, pb = xp - xb, inv2p = 0.5 / p;
    s[0][0] = std::sqrt(std::numbers::pi / p) * std::exp(-mu * xab * xab);
    for (int i = 0; i <= imax; ++i) {
      if (i > 0) {
        s[i][0] = pa * s[i - 1][0] + (i > 1 ? (i - 1) * inv2p * s[i - 2][0] : 0.0);
      }
      for (int j = 1; j <= jmax; ++j) {
        s[i][j] = pb * s[i][j - 1] + (i > 0 ? i * inv2p * s[i - 1][j - 1] : 0.0) +
                  (j > 1 ? (j - 1) * inv2p * s[i][j - 2] : 0.0);
      }
    }
  }
};

// Accumulates shell-pair blocks of S and, optionally, of the three dipole
// components about `origin`.
void shell_pair(const GaussianShell& sa, const GaussianShell& sb, const Eigen::Vector3d* origin, Eigen::MatrixXd& s,
                std::array<Eigen::MatrixXd, 3>* dip) {
  const int la = sa.l, lb = sb.l;
  s = Eigen::MatrixXd::Zero(2 * la + 1, 2 * lb + 1);
  if (dip)
    for (auto& d : *dip) d = Eigen::MatrixXd::Zero(2 * la + 1, 2 * lb + 1);
  const int extra = dip ? 1 : 0;
  for (const auto& pa : sa.primitives) {
    for (const auto& pb : sb.primitives) {
      std::array<Overlap1D, 3> o = {Overlap1D(pa.exponent, pb.exponent, sa.center.x(), sb.center.x(), la + extra, lb),
                                    Overlap1D(pa.exponent, pb.exponent, sa.center.y(), sb.center.y(), la + extra, lb),
                                    Overlap1D(pa.exponent, pb.exponent, sa.center.z(), sb.center.z(), la + extra, lb)};
      const double cc = pa.coefficient * pb.coefficient;
      for (int ma = -la; ma <= la; ++ma) {
        for (int mb = -lb; mb <= lb; ++mb) {
          double ov = 0.0;
          std::array<double, 3> dv{};
          for (const auto& ta : so3::solid_harmonic(la, ma)) {
            for (const auto& tb : so3::solid_harmonic(lb, mb)) {
              const double c = ta.coef * tb.coef;
              const double sx = o[0].s[ta.px][tb.px], sy = o[1].s[ta.py][tb.py], sz = o[2].s[ta.pz][tb.pz];
              ov += c * sx * sy * sz;
              if (dip) {
                // (r - C) = (r - A) + (A - C)
                const Eigen::Vector3d ac = sa.center - *origin;
                dv[0] += c * (o[0].s[ta.px + 1][tb.px] + ac.x() * sx) * sy * sz;
                dv[1] += c * sx * (o[1].s[ta.py + 1][tb.py] + ac.y() * sy) * sz;
                dv[2] += c * sx * sy * (o[2].s[ta.pz + 1][tb.pz] + ac.z() * sz);
              }
            }
          }
          s(ma + la, mb + lb) += cc * ov;
          if (dip)
            for (int k = 0; k < 3; ++k) (*dip)[k](ma + la, mb + lb) += cc * dv[k];
        }
      }
    }
  }
}

// Integral of x^i y^j z^k exp(-p r^2) over space.
double gaussian_moment(int i, int j, int k, double p) {
  auto g = [p](int n) { return n % 2 ? 0.0 : std::tgamma(0.5 * (n + 1)) / std::pow(p, 0.5 * (n + 1)); };
  return g(i) * g(j) * g(k);
}

}  // namespace

Eigen::MatrixXd shell_overlap(const GaussianShell& a, const GaussianShell& b) {
  Eigen::MatrixXd block;
  shell_pair(a, b, nullptr, block, nullptr);
  return block;
}

Eigen::MatrixXd overlap_matrix(const AOLayout& layout, const OverlapOptions& options) {
  const int n = layout.n_ao();
  Eigen::MatrixXd s = Eigen::MatrixXd::Zero(n, n);
  Eigen::MatrixXd block;
  for (std::size_t i = 0; i < layout.shells.size(); ++i) {
    for (std::size_t j = 0; j <= i; ++j) {
      shell_pair(layout.shells[i], layout.shells[j], nullptr, block, nullptr);
      s.block(layout.shell_offset[i], layout.shell_offset[j], block.rows(), block.cols()) = block;
      s.block(layout.shell_offset[j], layout.shell_offset[i], block.cols(), block.rows()) = block.transpose();
    }
  }
  if (options.check_linear_dependence && n > 0) {
    const double smallest = Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd>(s, Eigen::EigenvaluesOnly).eigenvalues()[0];
    if (smallest < options.linear_dependence_threshold)
      throw LinearDependence(fmt::format("smallest overlap eigenvalue {:.3e} below {:.1e}", smallest,
                                         options.linear_dependence_threshold));
  }
  return s;
}

std::array<Eigen::MatrixXd, 3> dipole_integrals(const AOLayout& layout, const Eigen::Vector3d& origin) {
  const int n = layout.n_ao();
  std::array<Eigen::MatrixXd, 3> d;
  for (auto& m : d) m = Eigen::MatrixXd::Zero(n, n);
  Eigen::MatrixXd s;
  std::array<Eigen::MatrixXd, 3> blocks;
  for (std::size_t i = 0; i < layout.shells.size(); ++i) {
    for (std::size_t j = 0; j <= i; ++j) {
      shell_pair(layout.shells[i], layout.shells[j], &origin, s, &blocks);
      for (int k = 0; k < 3; ++k) {
        const auto& b = blocks[k];
        d[k].block(layout.shell_offset[i], layout.shell_offset[j], b.rows(), b.cols()) = b;
        d[k].block(layout.shell_offset[j], layout.shell_offset[i], b.cols(), b.rows()) = b.transpose();
      }
    }
  }
  return d;
}

std::vector<OnSiteOverlap> three_index_overlap(const AOLayout& layout, const AuxiliaryBasis& aux) {
  std::vector<OnSiteOverlap> out;
  out.reserve(layout.n_atoms());
  for (int a = 0; a < layout.n_atoms(); ++a) {
    OnSiteOverlap q;
    q.atom = a;
    q.n_ao = layout.atom_size(a);
    for (const auto& sh : aux.shells.at(a))
      for (int m = -sh.l; m <= sh.l; ++m) q.aux.push_back({a, 0, sh.n, sh.l, m});
    q.values.assign(static_cast<std::size_t>(q.n_ao) * q.n_ao * q.aux.size(), 0.0);
    const int base = layout.atom_begin(a);
    for (int mu = 0; mu < q.n_ao; ++mu) {
      const auto& ao_mu = layout.aos[base + mu];
      const auto& sh_mu = layout.shells[ao_mu.shell];
      for (int nu = 0; nu <= mu; ++nu) {
        const auto& ao_nu = layout.aos[base + nu];
        const auto& sh_nu = layout.shells[ao_nu.shell];
        int k = 0;
        for (const auto& sh_k : aux.shells.at(a)) {
          for (int m = -sh_k.l; m <= sh_k.l; ++m, ++k) {
            // |l_mu - l_nu| <= l <= l_mu + l_nu and even total degree,
            // otherwise the angular integral vanishes identically.
            if (sh_k.l < std::abs(ao_mu.l - ao_nu.l) || sh_k.l > ao_mu.l + ao_nu.l ||
                (ao_mu.l + ao_nu.l + sh_k.l) % 2) {
              continue;
            }
            double v = 0.0;
            for (const auto& pm : sh_mu.primitives)
              for (const auto& pn : sh_nu.primitives)
                for (const auto& pk : sh_k.primitives) {
                  const double p = pm.exponent + pn.exponent + pk.exponent;
                  double ang = 0.0;
                  for (const auto& tm : so3::solid_harmonic(ao_mu.l, ao_mu.m))
                    for (const auto& tn : so3::solid_harmonic(ao_nu.l, ao_nu.m))
                      for (const auto& tk : so3::solid_harmonic(sh_k.l, m))
                        ang += tm.coef * tn.coef * tk.coef *
                               gaussian_moment(tm.px + tn.px + tk.px, tm.py + tn.py + tk.py, tm.pz + tn.pz + tk.pz, p);
                  v += pm.coefficient * pn.coefficient * pk.coefficient * ang;
                }
            q(mu, nu, k) = v;
            q(nu, mu, k) = v;
          }
        }
      }
    }
    out.push_back(std::move(q));
  }
  return out;
}

}  // namespace orbitall
