#pragma once

#include <Eigen/Dense>

#include <array>
#include <vector>

#include "orbitall/basis.hpp"

namespace orbitall {

struct OverlapOptions {
  bool check_linear_dependence = true;
  double linear_dependence_threshold = 1e-7;
};

/// Overlap matrix S. Throws LinearDependence when the smallest eigenvalue
/// falls below the threshold (unless the check is disabled).
Eigen::MatrixXd overlap_matrix(const AOLayout& layout, const OverlapOptions& options = {});

/// Matrices <mu| r_k - origin_k |nu> for k = x, y, z.
std::array<Eigen::MatrixXd, 3> dipole_integrals(const AOLayout& layout, const Eigen::Vector3d& origin);

/// On-site three-index overlaps of one atom: entry (mu, nu, k) is
/// the integral of phi_mu phi_nu chi_k over space, with mu, nu the atom's AOs
/// (local indices) and k its auxiliary functions.
struct OnSiteOverlap {
  int atom = 0;
  int n_ao = 0;
  std::vector<AOInfo> aux;  // (n = exponent index, l, m) of every auxiliary function
  std::vector<double> values;

  double operator()(int mu, int nu, int k) const {
    return values[(static_cast<std::size_t>(mu) * n_ao + nu) * aux.size() + k];
  }
  double& operator()(int mu, int nu, int k) {
    return values[(static_cast<std::size_t>(mu) * n_ao + nu) * aux.size() + k];
  }
};

std::vector<OnSiteOverlap> three_index_overlap(const AOLayout& layout, const AuxiliaryBasis& aux);

/// Overlap of two single shells (used by tests and by the basis builder).
Eigen::MatrixXd shell_overlap(const GaussianShell& a, const GaussianShell& b);

}  // namespace orbitall
