#include "orbitall/molecule.hpp"

#include <algorithm>
#include <array>
#include <cctype>

#include <fmt/format.h>

#include "orbitall/errors.hpp"

namespace orbitall {
namespace {

constexpr std::array<std::string_view, 119> kSymbols = {
    "",   "H",  "He", "Li", "Be", "B",  "C",  "N",  "O",  "F",  "Ne", "Na", "Mg", "Al", "Si", "P",  "S",
    "Cl", "Ar", "K",  "Ca", "Sc", "Ti", "V",  "Cr", "Mn", "Fe", "Co", "Ni", "Cu", "Zn", "Ga", "Ge", "As",
    "Se", "Br", "Kr", "Rb", "Sr", "Y",  "Zr", "Nb", "Mo", "Tc", "Ru", "Rh", "Pd", "Ag", "Cd", "In", "Sn",
    "Sb", "Te", "I",  "Xe", "Cs", "Ba", "La", "Ce", "Pr", "Nd", "Pm", "Sm", "Eu", "Gd", "Tb", "Dy", "Ho",
    "Er", "Tm", "Yb", "Lu", "Hf", "Ta", "W",  "Re", "Os", "Ir", "Pt", "Au", "Hg", "Tl", "Pb", "Bi", "Po",
    "At", "Rn", "Fr", "Ra", "Ac", "Th", "Pa", "U",  "Np", "Pu", "Am", "Cm", "Bk", "Cf", "Es", "Fm", "Md",
    "No", "Lr", "Rf", "Db", "Sg", "Bh", "Hs", "Mt", "Ds", "Rg", "Cn", "Nh", "Fl", "Mc", "Lv", "Ts", "Og"};

}  // namespace

std::string_view element_symbol(int z) {
  if (z < 1 || z >= static_cast<int>(kSymbols.size())) return "?";
  return kSymbols[z];
}

int atomic_number(std::string_view symbol) {
  for (std::size_t z = 1; z < kSymbols.size(); ++z) {
    const auto& s = kSymbols[z];
    if (s.size() != symbol.size()) continue;
    bool same = true;
    for (std::size_t i = 0; i < s.size(); ++i)
      same = same && std::tolower(static_cast<unsigned char>(s[i])) == std::tolower(static_cast<unsigned char>(symbol[i]));
    if (same) return static_cast<int>(z);
  }
  return 0;
}

int MolecularSystem::electron_count() const {
  int n = 0;
  for (int z : atomic_numbers) n += z;
  return n - charge;
}

void MolecularSystem::validate() const {
  if (atomic_numbers.empty()) throw InvariantViolation("system has no atoms");
  if (atomic_numbers.size() != coordinates.size())
    throw InvariantViolation(fmt::format("{} atomic numbers but {} coordinates", atomic_numbers.size(), coordinates.size()));
  if (multiplicity < 1) throw InvariantViolation(fmt::format("multiplicity {} < 1", multiplicity));
  const int ne = electron_count();
  if (ne < 1) throw InvariantViolation(fmt::format("electron count {} < 1 (charge {})", ne, charge));
  if ((ne - (multiplicity - 1)) % 2 != 0)
    throw InvariantViolation(
        fmt::format("{} electrons cannot have multiplicity {} (parity mismatch)", ne, multiplicity));
  if (multiplicity - 1 > ne)
    throw InvariantViolation(fmt::format("multiplicity {} needs more than {} electrons", multiplicity, ne));
  if (field && field->norm() > kMaxFieldAu)
    throw InvariantViolation(fmt::format("field magnitude {} au exceeds {}", field->norm(), kMaxFieldAu));
  if (dielectric && !(*dielectric > 0.0)) throw InvariantViolation("dielectric must be positive");
}

MolecularSystem MolecularSystem::transformed(const Eigen::Matrix3d& rotation, const Eigen::Vector3d& shift) const {
  MolecularSystem out = *this;
  for (auto& r : out.coordinates) r = rotation * r + shift;
  if (out.field) out.field = rotation * *out.field;
  return out;
}

MolecularSystem random_molecule(std::mt19937_64& rng, int max_atoms, bool vary_state, int min_atoms) {
  std::uniform_int_distribution<int> count(min_atoms, max_atoms);
  std::uniform_int_distribution<int> pick(0, 5);
  std::uniform_real_distribution<double> bond(1.9, 2.8);
  std::normal_distribution<double> gauss;
  const int z_choices[6] = {1, 1, 6, 6, 7, 8};
  const int n = count(rng);
  MolecularSystem s;
  s.atomic_numbers.push_back(z_choices[2 + pick(rng) % 4]);
  s.coordinates.push_back(Eigen::Vector3d::Zero());
  while (static_cast<int>(s.size()) < n) {
    std::uniform_int_distribution<int> anchor(0, static_cast<int>(s.size()) - 1);
    const Eigen::Vector3d dir = Eigen::Vector3d(gauss(rng), gauss(rng), gauss(rng)).normalized();
    const Eigen::Vector3d r = s.coordinates[anchor(rng)] + bond(rng) * dir;
    bool ok = true;
    for (const auto& c : s.coordinates) ok = ok && (c - r).norm() > 1.8;
    if (!ok) continue;
    s.atomic_numbers.push_back(z_choices[pick(rng)]);
    s.coordinates.push_back(r);
  }
  int ne = 0;
  for (int z : s.atomic_numbers) ne += z;
  if (vary_state) {
    std::uniform_int_distribution<int> q(-1, 1);
    s.charge = q(rng);
  }
  s.multiplicity = (ne - s.charge) % 2 == 0 ? 1 : 2;
  if (vary_state && (rng() % 3 == 0)) s.multiplicity += 2;
  return s;
}

}  // namespace orbitall
