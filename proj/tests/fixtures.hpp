#pragma once

// Molecule generators shared by the unit and acceptance tests.

#include <random>
#include <vector>

#include "orbitall/molecule.hpp"

namespace fixtures {

inline orbitall::MolecularSystem make_system(std::vector<int> z, std::vector<Eigen::Vector3d> r, int charge = 0,
                                             int multiplicity = 1) {
  orbitall::MolecularSystem s;
  s.atomic_numbers = std::move(z);
  s.coordinates = std::move(r);
  s.charge = charge;
  s.multiplicity = multiplicity;
  return s;
}

inline orbitall::MolecularSystem h2(double r = 1.4) { return make_system({1, 1}, {{0, 0, 0}, {0, 0, r}}); }

inline orbitall::MolecularSystem water() {
  return make_system({8, 1, 1}, {{0.0, 0.0, 0.0}, {0.0, 1.43, -1.11}, {0.0, -1.43, -1.11}});
}

inline orbitall::MolecularSystem formaldehyde() {
  return make_system({6, 8, 1, 1}, {{0.0, 0.0, 0.0}, {0.0, 0.0, 2.28}, {0.0, 1.77, -1.10}, {0.0, -1.77, -1.10}});
}

// Distorted methanol, no symmetry.
inline orbitall::MolecularSystem methanol_like() {
  return make_system({6, 8, 1, 1, 1, 1}, {{0.0, 0.0, 0.0},
                                          {2.65, 0.12, 0.05},
                                          {-0.62, 1.93, 0.21},
                                          {-0.71, -0.98, 1.62},
                                          {-0.58, -1.07, -1.71},
                                          {3.21, -1.55, -0.37}});
}

inline orbitall::MolecularSystem random_molecule(std::mt19937_64& rng, int max_atoms = 8, bool vary_state = false,
                                                 int min_atoms = 3) {
  return orbitall::random_molecule(rng, max_atoms, vary_state, min_atoms);
}

}  // namespace fixtures
