#include "orbitall/verify.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include <fmt/format.h>

#include "orbitall/so3.hpp"
#include "orbitall/training.hpp"

namespace orbitall {

NetworkInput rotated_input(const MolecularSystem& system, const NetworkInput& input, const Eigen::Matrix3d& rotation,
                           const Eigen::Vector3d& shift, const std::vector<double>& aux_exponents) {
  const MolecularSystem moved = system.transformed(rotation, shift);
  QMMSet q = input.qmm;
  q.layout = build_basis(moved);
  const Eigen::MatrixXd d = ao_wigner(input.qmm.layout, rotation);
  for (int k = 0; k < QMMSet::kCount; ++k) q[k] = d * input.qmm[k] * d.transpose();
  return prepare_input(moved, q, aux_exponents);
}

NetworkInput permuted_input(const MolecularSystem& system, const NetworkInput& input, const std::vector<int>& order,
                            const std::vector<double>& aux_exponents) {
  MolecularSystem moved = system;
  for (std::size_t i = 0; i < order.size(); ++i) {
    moved.atomic_numbers[i] = system.atomic_numbers[order[i]];
    moved.coordinates[i] = system.coordinates[order[i]];
  }
  const auto& old = input.qmm.layout;
  std::vector<int> index;
  for (int a : order)
    for (int mu = old.atom_begin(a); mu < old.atom_begin(a) + old.atom_size(a); ++mu) index.push_back(mu);
  QMMSet q;
  q.layout = build_basis(moved);
  for (int k = 0; k < QMMSet::kCount; ++k) q[k] = input.qmm[k](index, index);
  return prepare_input(moved, q, aux_exponents);
}

double qmm_equivariance(int molecules, int rotations, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  double worst = 0.0;
  ScfOptions lenient;
  lenient.throw_on_failure = false;
  for (int m = 0; m < molecules; ++m) {
    MolecularSystem sys = random_molecule(rng, 8, true);
    auto ref = run_scf(sys, lenient);
    // Redraw geometries whose reference SCF diverges.
    while (!ref.result.converged) {
      sys = random_molecule(rng, 8, true);
      ref = run_scf(sys, lenient);
    }
    for (int r = 0; r < rotations; ++r) {
      const Eigen::Matrix3d rot = so3::random_rotation(rng);
      worst = std::max(worst, compare_rotated(ref.qmm, run_scf(sys.transformed(rot)).qmm, rot).max_deviation);
    }
  }
  return worst;
}

ConservationReport conservation(int molecules, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  ConservationReport rep;
  ScfOptions opts;
  opts.throw_on_failure = false;
  for (int m = 0; m < molecules; ++m) {
    const MolecularSystem base = random_molecule(rng, 8, false);
    for (int q : {-1, 0, 1})
      for (int mult : {1, 2, 3}) {
        MolecularSystem sys = base;
        sys.charge = q;
        sys.multiplicity = mult;
        if ((sys.electron_count() - (mult - 1)) % 2 != 0) continue;
        const auto out = run_scf(sys, opts);
        ++rep.runs;
        if (!out.result.converged) {
          ++rep.unconverged;
          continue;
        }
        const auto& t = out.qmm;
        rep.electron_count = std::max(rep.electron_count, std::abs((t.p_total() * t.s).trace() - sys.electron_count()));
        rep.spin = std::max(rep.spin, std::abs(((t.p_alpha - t.p_beta) * t.s).trace() - (mult - 1)));
        if (mult == 1)
          rep.closed_shell = std::max({rep.closed_shell, (t.f_alpha - t.f_beta).cwiseAbs().maxCoeff(),
                                       (t.p_alpha - t.p_beta).cwiseAbs().maxCoeff()});
      }
  }
  return rep;
}

InvarianceReport model_invariance(Model& model, const MolecularSystem& system, int rotations, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  const auto& aux = model.config().aux_exponents;
  const NetworkInput base = prepare_input(system, run_scf(system).qmm, aux);
  const double ref = model.predict(base);
  const double scale = std::max(std::abs(ref), 1e-300);
  InvarianceReport rep;
  std::normal_distribution<double> shift(0.0, 3.0);
  for (int r = 0; r < rotations; ++r) {
    const Eigen::Matrix3d rot = so3::random_rotation(rng);
    const Eigen::Vector3d t(shift(rng), shift(rng), shift(rng));
    rep.rotation = std::max(rep.rotation, std::abs(model.predict(rotated_input(system, base, rot, t, aux)) - ref) / scale);
  }
  std::vector<int> order(system.size());
  std::iota(order.begin(), order.end(), 0);
  for (int p = 0; p < 10; ++p) {
    std::shuffle(order.begin(), order.end(), rng);
    rep.permutation =
        std::max(rep.permutation, std::abs(model.predict(permuted_input(system, base, order, aux)) - ref) / scale);
  }
  return rep;
}

MolecularSystem gradient_fixture() {
  MolecularSystem s;
  s.atomic_numbers = {6, 8, 1, 1, 7};
  s.coordinates = {{0.0, 0.0, 0.0}, {2.5, 0.3, 0.0}, {-0.8, 1.8, 0.2}, {-0.7, -1.0, 1.6}, {0.2, -0.9, -2.4}};
  s.multiplicity = 2;
  return s;
}

std::vector<VerifyCheck> run_verification(const VerifyOptions& o, std::ostream* log) {
  std::vector<VerifyCheck> checks;
  auto add = [&](std::string name, double value, double tol) {
    checks.push_back({std::move(name), value, tol});
    if (log) *log << fmt::format("{:<30} {:>11.3e}  {:<9} {}\n", checks.back().name, value,
                                 tol == 0.0 ? "(== 0)" : fmt::format("(< {:.0e})", tol),
                                 checks.back().passed() ? "ok" : "VIOLATED")
                  << std::flush;
  };
  add("qmm_equivariance", qmm_equivariance(o.molecules, o.rotations, o.seed), 1e-8);
  const auto cons = conservation(std::max(1, o.molecules / 3), o.seed + 1);
  add("electron_count", cons.electron_count, 1e-8);
  add("spin_count", cons.spin, 1e-8);
  add("closed_shell_spin_symmetry", cons.closed_shell, 0.0);
  add("unconverged_scf_runs", cons.unconverged, 0.0);

  std::mt19937_64 rng(o.seed + 2);
  Model model(ModelConfig::scaled(32), o.seed, Init::random);
  const auto inv = model_invariance(model, random_molecule(rng, 8, true), o.rotations, o.seed + 3);
  add("model_rotation_invariance", inv.rotation, 1e-9);
  add("model_permutation_invariance", inv.permutation, 1e-12);

  if (o.gradient) {
    const ModelConfig cfg = o.gradient_hidden_dim == 256 ? ModelConfig{} : ModelConfig::scaled(o.gradient_hidden_dim);
    Model g(cfg, 3, Init::random);
    const auto sys = gradient_fixture();
    const auto in = prepare_input(sys, run_scf(sys).qmm, cfg.aux_exponents);
    add("gradient_check", gradient_check(g, in, 0.3).max_relative_error, 1e-6);
  }
  return checks;
}

}  // namespace orbitall
