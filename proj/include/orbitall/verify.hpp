#pragma once

#include <cstdint>
#include <ostream>
#include <string>
#include <vector>

#include "orbitall/network.hpp"
#include "orbitall/scf.hpp"

namespace orbitall {

/// Network input for `system` rotated by `rotation` and shifted, built from
/// the exactly transformed matrices D O D^T of `input` (no new SCF).
NetworkInput rotated_input(const MolecularSystem& system, const NetworkInput& input, const Eigen::Matrix3d& rotation,
                           const Eigen::Vector3d& shift = Eigen::Vector3d::Zero(),
                           const std::vector<double>& aux_exponents = {0.5, 2.0});

/// Network input with atoms reordered: new atom i is old atom order[i].
NetworkInput permuted_input(const MolecularSystem& system, const NetworkInput& input, const std::vector<int>& order,
                            const std::vector<double>& aux_exponents = {0.5, 2.0});

/// Largest Wigner-law deviation over every matrix of `molecules` random
/// molecules (with a converged reference SCF), each under `rotations`
/// random rotations.
double qmm_equivariance(int molecules, int rotations, std::uint64_t seed);

struct ConservationReport {
  int runs = 0;
  int unconverged = 0;
  double electron_count = 0.0;  // max |Tr(P S) - N|
  double spin = 0.0;            // max |Tr((Pa - Pb) S) - 2S|
  double closed_shell = 0.0;    // max over multiplicity-1 runs of |Fa - Fb| and |Pa - Pb|
};
/// Runs every valid (charge, multiplicity) in {-1,0,1} x {1,2,3} on
/// `molecules` random molecules.
ConservationReport conservation(int molecules, std::uint64_t seed);

struct InvarianceReport {
  double rotation = 0.0;     // max relative output change under roto-translation
  double permutation = 0.0;  // max relative output change under atom reordering
};
InvarianceReport model_invariance(Model& model, const MolecularSystem& system, int rotations, std::uint64_t seed);

/// The five-atom open-shell fixture of the gradient check.
MolecularSystem gradient_fixture();

struct VerifyOptions {
  int molecules = 10;
  int rotations = 100;
  std::uint64_t seed = 2024;
  bool gradient = true;
  int gradient_hidden_dim = 256;
};
struct VerifyCheck {
  std::string name;
  double value = 0.0;
  double tolerance = 0.0;  // 0 demands an exact zero
  bool passed() const { return tolerance == 0.0 ? value == 0.0 : value < tolerance; }
};
/// Equivariance, conservation, invariance and gradient suites; progress
/// lines go to `log` when given.
std::vector<VerifyCheck> run_verification(const VerifyOptions& options, std::ostream* log = nullptr);

}  // namespace orbitall
