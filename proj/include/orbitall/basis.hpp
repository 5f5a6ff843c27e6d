#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "orbitall/molecule.hpp"

namespace orbitall {

struct Primitive {
  double exponent;     // bohr^-2
  double coefficient;  // multiplies r^l Y_lm(r) exp(-exponent r^2)
};

/// Contracted shell of real solid-harmonic Gaussians on one atom. After
/// construction through the basis builders the coefficients include
/// normalization, so every component has unit self-overlap.
struct GaussianShell {
  int atom_index = 0;
  int l = 0;
  int n = 0;  // principal quantum number (or auxiliary channel index)
  Eigen::Vector3d center = Eigen::Vector3d::Zero();
  std::vector<Primitive> primitives;

  int size() const { return 2 * l + 1; }
};

/// Shell specification for one element as read from the basis table.
struct ShellSpec {
  int l = 0;
  int n = 0;
  std::vector<Primitive> primitives;  // raw contraction coefficients
};

/// Per-element basis parameters plus the checksum of the source text.
class BasisTable {
 public:
  /// Parses the documented text format (see data/basis_minimal.txt).
  static BasisTable parse(const std::string& text);
  static BasisTable load(const std::string& path);
  /// Built-in minimal table for H, C, N, O.
  static const BasisTable& minimal();

  bool has(int z) const { return elements_.count(z) != 0; }
  const std::vector<ShellSpec>& shells(int z) const;
  /// 16 hex digits (FNV-1a 64 of the source text).
  const std::string& checksum() const { return checksum_; }
  const std::string& text() const { return text_; }

 private:
  std::map<int, std::vector<ShellSpec>> elements_;
  std::string checksum_;
  std::string text_;
};

/// The embedded table text, identical to data/basis_minimal.txt.
const std::string& minimal_basis_text();

std::string fnv1a64_hex(const std::string& bytes);

/// Identity of one atomic orbital.
struct AOInfo {
  int atom = 0;
  int shell = 0;  // index into AOLayout::shells
  int n = 0;
  int l = 0;
  int m = 0;
};

/// Shells ordered by atom; AO indices grouped per atom, m = -l..l within a
/// shell.
struct AOLayout {
  std::vector<GaussianShell> shells;
  std::vector<AOInfo> aos;
  std::vector<int> shell_offset;  // first AO of every shell
  std::vector<int> atom_offset;   // first AO of every atom, size n_atoms + 1
  std::vector<int> atomic_numbers;
  std::string basis_checksum;

  int n_ao() const { return static_cast<int>(aos.size()); }
  int n_atoms() const { return static_cast<int>(atom_offset.size()) - 1; }
  int atom_begin(int a) const { return atom_offset[a]; }
  int atom_size(int a) const { return atom_offset[a + 1] - atom_offset[a]; }
  /// Flat index of (atom, n, l, m); -1 if absent.
  int index_of(int atom, int n, int l, int m) const;
  int lmax() const;
};

/// Throws UnknownElement if an atomic number lacks basis parameters.
AOLayout build_basis(const MolecularSystem& system, const BasisTable& table = BasisTable::minimal());

/// Normalizes raw contraction coefficients so the contracted function has
/// unit self-overlap.
std::vector<Primitive> normalize_contraction(int l, const std::vector<Primitive>& raw);

/// Even-tempered auxiliary functions for diagonal reduction: for each atom,
/// one normalized primitive per (exponent, l) with l up to twice the atom's
/// largest basis l.
struct AuxiliaryBasis {
  std::vector<double> exponents = {0.5, 2.0};
  /// shells[atom] lists auxiliary shells (n = exponent index) of that atom.
  std::vector<std::vector<GaussianShell>> shells;

  int n_aux(int atom) const;
};

AuxiliaryBasis build_auxiliary_basis(const AOLayout& layout, std::vector<double> exponents = {0.5, 2.0});

}  // namespace orbitall
