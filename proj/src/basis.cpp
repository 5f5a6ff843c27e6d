#include "orbitall/basis.hpp"

#include <cmath>
#include <fstream>
#include <sstream>

#include <fmt/format.h>

#include "orbitall/errors.hpp"

namespace orbitall {
namespace {

// Radial overlap of two unit-coefficient primitives r^l Y_lm exp(-a r^2),
// exp(-b r^2) on the same center (angular part integrates to 1).
double same_center_primitive_overlap(int l, double a, double b) {
  return std::tgamma(l + 1.5) / (2.0 * std::pow(a + b, l + 1.5));
}

}  // namespace

std::string fnv1a64_hex(const std::string& bytes) {
  std::uint64_t h = 14695981039346656037ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return fmt::format("{:016x}", h);
}

const std::string& minimal_basis_text() {
  static const std::string text =
#include "basis_minimal.inc"
      ;
  return text;
}

BasisTable BasisTable::parse(const std::string& text) {
  BasisTable table;
  table.text_ = text;
  table.checksum_ = fnv1a64_hex(text);
  std::istringstream in(text);
  std::string line;
  int line_no = 0;
  int current_z = 0;
  int pending = 0;
  ShellSpec* shell = nullptr;
  while (std::getline(in, line)) {
    ++line_no;
    if (auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    std::istringstream row(line);
    std::string head;
    if (!(row >> head)) continue;
    auto fail = [&](const std::string& why) { throw ParseError(fmt::format("basis table line {}: {}", line_no, why)); };
    if (head == "element") {
      if (pending) fail("previous shell is missing primitives");
      std::string symbol;
      if (!(row >> symbol >> current_z) || current_z < 1) fail("expected 'element <symbol> <Z>'");
      if (atomic_number(symbol) != current_z) fail(fmt::format("symbol {} does not match Z={}", symbol, current_z));
      table.elements_[current_z];
      shell = nullptr;
    } else if (head == "shell") {
      if (!current_z) fail("shell before element");
      if (pending) fail("previous shell is missing primitives");
      ShellSpec spec;
      if (!(row >> spec.l >> spec.n >> pending) || spec.l < 0 || spec.l > 2 || pending < 1)
        fail("expected 'shell <l 0..2> <n> <nprim>'");
      table.elements_[current_z].push_back(spec);
      shell = &table.elements_[current_z].back();
    } else {
      if (!shell || pending == 0) fail("primitive row outside a shell");
      Primitive p{};
      std::istringstream prow(line);
      if (!(prow >> p.exponent >> p.coefficient)) fail("expected '<exponent> <coefficient>'");
      if (!(p.exponent > 0.0)) fail("exponent must be positive");
      if (!shell->primitives.empty() && !(p.exponent < shell->primitives.back().exponent))
        fail("exponents must decrease strictly within a shell");
      shell->primitives.push_back(p);
      --pending;
    }
  }
  if (pending) throw ParseError("basis table ends inside a shell");
  return table;
}

BasisTable BasisTable::load(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ParseError(fmt::format("cannot open basis table {}", path));
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse(ss.str());
}

const BasisTable& BasisTable::minimal() {
  static const BasisTable table = parse(minimal_basis_text());
  return table;
}

const std::vector<ShellSpec>& BasisTable::shells(int z) const {
  auto it = elements_.find(z);
  if (it == elements_.end())
    throw UnknownElement(fmt::format("no basis parameters for Z={} ({})", z, element_symbol(z)));
  return it->second;
}

std::vector<Primitive> normalize_contraction(int l, const std::vector<Primitive>& raw) {
  std::vector<Primitive> out = raw;
  // Primitive normalization first, so raw coefficients refer to normalized
  // primitives as in standard basis set tables.
  for (auto& p : out) p.coefficient /= std::sqrt(same_center_primitive_overlap(l, p.exponent, p.exponent));
  double self = 0.0;
  for (const auto& a : out)
    for (const auto& b : out) self += a.coefficient * b.coefficient * same_center_primitive_overlap(l, a.exponent, b.exponent);
  const double scale = 1.0 / std::sqrt(self);
  for (auto& p : out) p.coefficient *= scale;
  return out;
}

int AOLayout::index_of(int atom, int n, int l, int m) const {
  if (atom < 0 || atom >= n_atoms()) return -1;
  for (int i = atom_offset[atom]; i < atom_offset[atom + 1]; ++i) {
    const auto& ao = aos[i];
    if (ao.n == n && ao.l == l && ao.m == m) return i;
  }
  return -1;
}

int AOLayout::lmax() const {
  int l = 0;
  for (const auto& s : shells) l = std::max(l, s.l);
  return l;
}

AOLayout build_basis(const MolecularSystem& system, const BasisTable& table) {
  if (system.atomic_numbers.size() != system.coordinates.size())
    throw InvariantViolation("atomic numbers and coordinates differ in length");
  AOLayout layout;
  layout.basis_checksum = table.checksum();
  layout.atomic_numbers = system.atomic_numbers;
  layout.atom_offset.push_back(0);
  for (std::size_t a = 0; a < system.size(); ++a) {
    const int z = system.atomic_numbers[a];
    for (const auto& spec : table.shells(z)) {
      GaussianShell shell;
      shell.atom_index = static_cast<int>(a);
      shell.l = spec.l;
      shell.n = spec.n;
      shell.center = system.coordinates[a];
      shell.primitives = normalize_contraction(spec.l, spec.primitives);
      const int shell_index = static_cast<int>(layout.shells.size());
      layout.shell_offset.push_back(layout.n_ao());
      for (int m = -spec.l; m <= spec.l; ++m) layout.aos.push_back({static_cast<int>(a), shell_index, spec.n, spec.l, m});
      layout.shells.push_back(std::move(shell));
    }
    layout.atom_offset.push_back(layout.n_ao());
  }
  return layout;
}

int AuxiliaryBasis::n_aux(int atom) const {
  int n = 0;
  for (const auto& s : shells.at(atom)) n += s.size();
  return n;
}

AuxiliaryBasis build_auxiliary_basis(const AOLayout& layout, std::vector<double> exponents) {
  AuxiliaryBasis aux;
  aux.exponents = std::move(exponents);
  aux.shells.resize(layout.n_atoms());
  for (int a = 0; a < layout.n_atoms(); ++a) {
    int lmax = 0;
    Eigen::Vector3d center = Eigen::Vector3d::Zero();
    for (const auto& s : layout.shells)
      if (s.atom_index == a) {
        lmax = std::max(lmax, s.l);
        center = s.center;
      }
    for (int l = 0; l <= 2 * lmax; ++l)
      for (std::size_t k = 0; k < aux.exponents.size(); ++k) {
        GaussianShell shell;
        shell.atom_index = a;
        shell.l = l;
        shell.n = static_cast<int>(k);
        shell.center = center;
        shell.primitives = normalize_contraction(l, {{aux.exponents[k], 1.0}});
        aux.shells[a].push_back(std::move(shell));
      }
  }
  return aux;
}

}  // namespace orbitall
