#pragma once

#include <Eigen/Dense>

#include <array>
#include <optional>
#include <string_view>
#include <vector>

#include "orbitall/basis.hpp"
#include "orbitall/molecule.hpp"

namespace orbitall {

inline constexpr const char* kEngineVersion = "orbitall-scc-eht 1";

/// The six orbital-basis matrices fed to the network, plus their layout.
struct QMMSet {
  static constexpr int kCount = 6;
  static constexpr std::array<std::string_view, kCount> kNames = {"F_alpha", "F_beta", "P_alpha",
                                                                  "P_beta",  "S",      "H_core"};

  Eigen::MatrixXd f_alpha, f_beta, p_alpha, p_beta, s, h_core;
  AOLayout layout;

  const Eigen::MatrixXd& operator[](int i) const;
  Eigen::MatrixXd& operator[](int i);
  int n_ao() const { return layout.n_ao(); }
  Eigen::MatrixXd p_total() const { return p_alpha + p_beta; }
};

/// Energies in hartree.
struct LowLevelResult {
  double energy = 0.0;
  Eigen::VectorXd eps_alpha, eps_beta;
  Eigen::VectorXd occ_alpha, occ_beta;
  std::vector<double> mulliken_charges;
  std::vector<double> spin_populations;
  // (alpha HOMO, alpha LUMO, beta HOMO, beta LUMO); empty when undefined
  std::array<std::optional<double>, 4> homo_lumo;
  bool converged = false;
  int iterations = 0;
  double final_rms_change = 0.0;
  std::vector<double> energy_history;
  // Energy non-increasing after iteration 3 (up to 1e-12 relative round-off).
  bool energy_monotone = true;
};

/// Multiplicative factors on the engine constants. The defaults give the
/// reference engine; other values define a perturbed variant (used as a
/// synthetic higher-level method).
struct EngineScaling {
  double wolfsberg_helmholz = 1.0;
  double hardness = 1.0;
  double hund = 1.0;
  double ionization_p = 1.0;  // valence p levels only
};

struct ScfOptions {
  double mixing = 0.3;
  int diis_start = 5;
  int diis_history = 6;
  int max_iterations = 200;
  double tolerance = 1e-8;  // RMS density change
  double polish_tolerance = 1e-12;
  int polish_iterations = 25;
  // When false an unconverged run is returned with converged = false.
  bool throw_on_failure = true;
  EngineScaling scaling;
};

struct ScfOutput {
  QMMSet qmm;
  LowLevelResult result;
};

/// Per-element constants of the toy engine (hartree).
struct ElementParameters {
  double hardness;  // chemical hardness, sets the on-site Coulomb kernel
  double hund;      // spin-polarization constant W
};
const ElementParameters& element_parameters(int z);
/// Diagonal core-Hamiltonian value of shell (n, l) on element z.
double ionization_parameter(int z, int n, int l);

inline constexpr double kWolfsbergHelmholz = 1.75;

/// Extended-Hueckel core Hamiltonian, plus the field coupling
/// sum_k f_k <mu|r_k|nu> when the system carries a field.
Eigen::MatrixXd core_hamiltonian(const MolecularSystem& system, const AOLayout& layout, const Eigen::MatrixXd& s,
                                 const std::array<Eigen::MatrixXd, 3>& dipoles, const EngineScaling& scaling = {});

/// Klopman-Ohno kernel between atoms.
Eigen::MatrixXd coulomb_kernel(const MolecularSystem& system, double hardness_scale = 1.0);

/// Spin-polarized charge-self-consistent SCF. Throws UnsupportedEnvironment
/// for dielectric != 1 and ScfNotConverged (unless disabled in options).
ScfOutput run_scf(const MolecularSystem& system, const ScfOptions& options = {},
                  const BasisTable& table = BasisTable::minimal());

/// Largest deviation of each QMM from the Wigner transform law between a
/// system and its rotated copy.
struct RotationReport {
  std::array<double, QMMSet::kCount> per_matrix{};
  double max_deviation = 0.0;
};
/// Block-diagonal AO Wigner matrix for `layout`.
Eigen::MatrixXd ao_wigner(const AOLayout& layout, const Eigen::Matrix3d& rotation);
RotationReport compare_rotated(const QMMSet& original, const QMMSet& rotated, const Eigen::Matrix3d& rotation);
RotationReport rotate_system_check(const MolecularSystem& system, const Eigen::Matrix3d& rotation,
                                   const ScfOptions& options = {});

struct SpinGaps {
  double singlet;    // vertical gap at the singlet geometry
  double triplet;    // vertical gap at the triplet geometry
  double adiabatic;  // triplet state at its geometry minus singlet state at its own
};
/// Arguments: energies of the triplet (S=1) and singlet (S=0) states at
/// the singlet-optimized and triplet-optimized geometries.
SpinGaps spin_gaps(double e_s1_at_singlet, double e_s0_at_singlet, double e_s1_at_triplet, double e_s0_at_triplet);

}  // namespace orbitall
