#pragma once

#include <Eigen/Dense>

#include <optional>
#include <random>
#include <string>
#include <string_view>
#include <vector>

namespace orbitall {

/// Element symbol for an atomic number (1..118).
std::string_view element_symbol(int z);
/// Atomic number for a symbol, case-insensitive; 0 when unknown.
int atomic_number(std::string_view symbol);

/// Molecule plus its electronic state and environment. Coordinates are in
/// bohr, the field in atomic units.
struct MolecularSystem {
  std::vector<int> atomic_numbers;
  std::vector<Eigen::Vector3d> coordinates;
  int charge = 0;
  int multiplicity = 1;
  std::optional<Eigen::Vector3d> field;
  std::optional<double> dielectric;

  std::size_t size() const { return atomic_numbers.size(); }

  /// Sum of nuclear charges minus the total charge.
  int electron_count() const;
  int n_alpha() const { return (electron_count() + multiplicity - 1) / 2; }
  int n_beta() const { return (electron_count() - multiplicity + 1) / 2; }

  /// Throws InvariantViolation if the electron count, spin parity, field
  /// bound or dielectric value is invalid.
  void validate() const;

  /// Copy with every coordinate (and the field) rotated by `rotation`,
  /// then translated by `shift`.
  MolecularSystem transformed(const Eigen::Matrix3d& rotation,
                              const Eigen::Vector3d& shift = Eigen::Vector3d::Zero()) const;
};

inline constexpr double kMaxFieldAu = 0.05;

/// Random chain-grown H/C/N/O molecule with min_atoms..max_atoms atoms. Each
/// new atom bonds to an existing one at 1.9-2.8 bohr and keeps 1.8 bohr from
/// all others. With `vary_state` the charge is drawn from -1..1 and a third of
/// the molecules get multiplicity raised by two; otherwise the lowest
/// multiplicity of a neutral molecule is used. At least 3 atoms by default:
/// linear molecules have degenerate partially filled levels whose aufbau
/// filling depends on orientation.
MolecularSystem random_molecule(std::mt19937_64& rng, int max_atoms = 8, bool vary_state = false, int min_atoms = 3);

}  // namespace orbitall
