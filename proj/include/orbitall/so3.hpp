#pragma once

#include <Eigen/Dense>

#include <array>
#include <random>
#include <span>
#include <vector>

namespace orbitall::so3 {

// Real spherical harmonics without the Condon-Shortley phase, m ordered
// -l..+l. For l = 1 the components are (y, z, x). The same convention is
// used for the angular parts of the Gaussian basis functions, so Wigner-D
// blocks built here rotate integral blocks exactly.

inline constexpr int kMaxL = 6;

/// One Cartesian monomial x^px y^py z^pz with a coefficient.
struct Monomial {
  int px = 0;
  int py = 0;
  int pz = 0;
  double coef = 0.0;
};

/// Cartesian expansion of r^l Y_lm(r/|r|), normalized so that Y_lm is
/// orthonormal on the unit sphere.
const std::vector<Monomial>& solid_harmonic(int l, int m);

/// Y_lm evaluated at a unit vector.
double real_sph_harm(int l, int m, const Eigen::Vector3d& unit);

/// All 2l+1 harmonics of degree l at a unit vector, ordered m=-l..l.
Eigen::VectorXd real_sph_harm_all(int l, const Eigen::Vector3d& unit);

/// r^l Y_lm(r) for an arbitrary (not necessarily unit) vector.
double regular_solid_harmonic(int l, int m, const Eigen::Vector3d& r);

/// Orthogonal matrix D^l(R) with Y_l(R v) = D^l(R) Y_l(v). Built with the
/// Ivanic-Ruedenberg recursion. Throws InvalidRotation when R is not a
/// proper rotation.
Eigen::MatrixXd wigner_d_real(int l, const Eigen::Matrix3d& rotation);

/// A rotation together with its cached real Wigner blocks.
class RotationRep {
 public:
  RotationRep(const Eigen::Matrix3d& rotation, int lmax);

  const Eigen::Matrix3d& matrix() const { return rotation_; }
  int lmax() const { return static_cast<int>(wigner_.size()) - 1; }
  const Eigen::MatrixXd& wigner(int l) const { return wigner_.at(l); }

 private:
  Eigen::Matrix3d rotation_;
  std::vector<Eigen::MatrixXd> wigner_;
};

/// Uniformly distributed proper rotation.
Eigen::Matrix3d random_rotation(std::mt19937_64& rng);

/// Rotation by `angle` radians about a unit axis.
Eigen::Matrix3d axis_angle(const Eigen::Vector3d& axis, double angle);

/// Complex Clebsch-Gordan coefficient <l1 m1; l2 m2 | l m> (Racah form,
/// Condon-Shortley phase).
double cg_complex(int l1, int m1, int l2, int m2, int l, int m);

/// Real-basis coupling coefficients for one (l1, l2, l) triple. Dense
/// storage indexed [m1+l1][m2+l2][m+l] plus the sparse list of nonzeros.
struct CGBlock {
  int l1 = 0;
  int l2 = 0;
  int l = 0;
  std::vector<double> dense;
  struct Entry {
    int m1, m2, m;  // offsets 0..2l+1, not signed m
    double value;
  };
  std::vector<Entry> nonzeros;

  double at(int m1, int m2, int m) const {
    return dense[(static_cast<std::size_t>(m1 + l1) * (2 * l2 + 1) + (m2 + l2)) * (2 * l + 1) + (m + l)];
  }
};

/// Cached real CG block; throws SelectionRuleViolation outside the triangle
/// |l1-l2| <= l <= l1+l2. The cache is built on first use and is immutable
/// afterwards.
const CGBlock& cg_real(int l1, int l2, int l);

/// Writes every cached CG block up to lmax as a text table.
void dump_cg_table(std::ostream& out, int lmax);

}  // namespace orbitall::so3
