// Acceptance run: one PASS/FAIL line per criterion, exit status 1 if any fails.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <functional>
#include <iostream>
#include <numbers>
#include <numeric>
#include <random>

#include <fmt/format.h>

#include "oracles/cg_ladder.hpp"
#include "oracles/sphere_quadrature.hpp"
#include "orbitall/integrals.hpp"
#include "orbitall/so3.hpp"
#include "orbitall/training.hpp"
#include "orbitall/units.hpp"
#include "orbitall/verify.hpp"

using namespace orbitall;

namespace {

// Pinned tolerances and budgets.
constexpr double kQmmEquivarianceTol = 1e-8;
constexpr double kConservationTol = 1e-8;
constexpr double kRotationInvarianceTol = 1e-9;
constexpr double kPermutationInvarianceTol = 1e-12;
constexpr double kGradientTol = 1e-6;
constexpr double kParamTarget = 2.1e6;
constexpr double kParamWindow = 0.10;
constexpr double kCgLadderTol = 1e-12;
constexpr double kCgQuadratureTol = 1e-6;
constexpr double kWignerTol = 1e-10;
constexpr double kHeldOutFraction = 0.10;
constexpr double kDensityGap = 1e-3;
constexpr double kFieldAu = 0.005;
constexpr double kFieldShiftHartree = 1e-6;
constexpr double kDipoleTol = 1e-5;
constexpr double kBudget1 = 120.0, kBudget4 = 300.0, kBudget5 = 600.0, kBudget8 = 1800.0;

// Synthetic "high level": the same engine with perturbed Hueckel constants.
constexpr EngineScaling kHighLevel{1.08, 0.9, 1.3, 1.04};

using Clock = std::chrono::steady_clock;
double seconds_since(Clock::time_point t) { return std::chrono::duration<double>(Clock::now() - t).count(); }

int failures = 0;
void report(int id, bool pass, const std::string& detail) {
  if (!pass) ++failures;
  std::cout << fmt::format("[{:2}] {}  {}\n", id, pass ? "PASS" : "FAIL", detail) << std::flush;
}

MolecularSystem methanol_like() {
  MolecularSystem s;
  s.atomic_numbers = {6, 8, 1, 1, 1, 1};
  s.coordinates = {{0.0, 0.0, 0.0},   {2.65, 0.12, 0.05},  {-0.62, 1.93, 0.21},
                   {-0.71, -0.98, 1.62}, {-0.58, -1.07, -1.71}, {3.21, -1.55, -0.37}};
  return s;
}

MolecularSystem formaldehyde() {
  MolecularSystem s;
  s.atomic_numbers = {6, 8, 1, 1};
  s.coordinates = {{0.0, 0.0, 0.0}, {0.0, 0.0, 2.28}, {0.0, 1.77, -1.10}, {0.0, -1.77, -1.10}};
  return s;
}

double stddev(const std::vector<double>& v) {
  const double mean = std::accumulate(v.begin(), v.end(), 0.0) / v.size();
  double s = 0.0;
  for (double x : v) s += (x - mean) * (x - mean);
  return std::sqrt(s / v.size());
}

void criterion_1() {
  const auto t0 = Clock::now();
  const double dev = qmm_equivariance(10, 100, 101);
  const double t = seconds_since(t0);
  report(1, dev < kQmmEquivarianceTol && t < kBudget1,
         fmt::format("QMM equivariance: max deviation {:.2e} (< {:.0e}) over 10 molecules x 100 rotations, {:.1f} s",
                     dev, kQmmEquivarianceTol, t));
}

void criteria_2_3() {
  const auto rep = conservation(8, 202);
  report(2, rep.electron_count < kConservationTol && rep.spin < kConservationTol && rep.runs > rep.unconverged,
         fmt::format("conservation: |Tr(PS)-N| {:.2e}, |Tr((Pa-Pb)S)-2S| {:.2e} (< {:.0e}) over {} converged of {} runs",
                     rep.electron_count, rep.spin, kConservationTol, rep.runs - rep.unconverged, rep.runs));
  report(3, rep.closed_shell == 0.0,
         fmt::format("closed-shell reduction: max |Fa-Fb|, |Pa-Pb| = {:.1e} (exactly 0 required)", rep.closed_shell));
}

void criterion_4() {
  const auto t0 = Clock::now();
  std::mt19937_64 rng(404);
  const MolecularSystem sys = random_molecule(rng, 8, true);
  Model model(ModelConfig{}, 41, Init::random);
  const double ref = model.predict(prepare_input(sys, run_scf(sys).qmm));
  // Full pipeline: every transformed copy goes through its own SCF.
  std::normal_distribution<double> shift(0.0, 3.0);
  double rot = 0.0;
  for (int i = 0; i < 100; ++i) {
    const Eigen::Matrix3d r = so3::random_rotation(rng);
    const auto moved = sys.transformed(r, Eigen::Vector3d(shift(rng), shift(rng), shift(rng)));
    rot = std::max(rot, std::abs(model.predict(prepare_input(moved, run_scf(moved).qmm)) - ref) / std::abs(ref));
  }
  const NetworkInput base = prepare_input(sys, run_scf(sys).qmm);
  std::vector<int> order(sys.size());
  std::iota(order.begin(), order.end(), 0);
  double perm = 0.0;
  for (int i = 0; i < 20; ++i) {
    std::shuffle(order.begin(), order.end(), rng);
    perm = std::max(perm, std::abs(model.predict(permuted_input(sys, base, order)) - ref) / std::abs(ref));
  }
  const double t = seconds_since(t0);
  report(4, rot < kRotationInvarianceTol && perm < kPermutationInvarianceTol && t < kBudget4,
         fmt::format("end-to-end invariance ({} atoms, default model): roto-translation {:.2e} (< {:.0e}), "
                     "permutation {:.2e} (< {:.0e}), {:.1f} s",
                     sys.size(), rot, kRotationInvarianceTol, perm, kPermutationInvarianceTol, t));
}

void criterion_5() {
  const auto t0 = Clock::now();
  Model model(ModelConfig{}, 3, Init::random);
  const auto sys = gradient_fixture();
  const auto rep = gradient_check(model, prepare_input(sys, run_scf(sys).qmm), 0.3);
  const auto worst = std::max_element(rep.blocks.begin(), rep.blocks.end(),
                                      [](const auto& a, const auto& b) { return a.relative_error < b.relative_error; });
  const double t = seconds_since(t0);
  report(5, rep.max_relative_error < kGradientTol && t < kBudget5,
         fmt::format("gradient check: max relative error {:.2e} (< {:.0e}) over {} blocks, worst '{}', {:.1f} s",
                     rep.max_relative_error, kGradientTol, rep.blocks.size(), worst->name, t));
}

void criterion_6() {
  const auto n = static_cast<double>(Model(ModelConfig{}).parameter_count());
  report(6, std::abs(n - kParamTarget) <= kParamWindow * kParamTarget,
         fmt::format("parameter count {:.0f} within +-10% of {:.1e}", n, kParamTarget));
}

void criterion_7() {
  double ladder = 0.0;
  for (int l1 = 0; l1 <= 4; ++l1)
    for (int l2 = 0; l2 <= 4; ++l2)
      for (int l = std::abs(l1 - l2); l <= std::min(l1 + l2, 4); ++l) {
        const auto expected = oracle::ladder_real_cg(l1, l2, l);
        const auto& got = so3::cg_real(l1, l2, l).dense;
        for (std::size_t i = 0; i < got.size(); ++i) ladder = std::max(ladder, std::abs(expected[i] - got[i]));
      }

  // Gaunt integrals over the sphere, normalized by the m=0 coupling.
  double quad = 0.0;
  const auto grid = oracle::sphere_grid(14);
  for (int l1 = 0; l1 <= 3; ++l1)
    for (int l2 = 0; l2 <= 3; ++l2)
      for (int l = std::abs(l1 - l2); l <= std::min(l1 + l2, 4); ++l) {
        if ((l1 + l2 + l) % 2) continue;
        const auto& block = so3::cg_real(l1, l2, l);
        const double kappa = std::sqrt((2.0 * l1 + 1) * (2.0 * l2 + 1) / (4.0 * std::numbers::pi * (2.0 * l + 1))) *
                             oracle::ladder_cg(l1, l2).at({0, 0, l, 0});
        std::vector<double> gaunt(block.dense.size(), 0.0);
        for (const auto& p : grid) {
          const auto y1 = so3::real_sph_harm_all(l1, p.x), y2 = so3::real_sph_harm_all(l2, p.x),
                     y = so3::real_sph_harm_all(l, p.x);
          for (int a = 0; a <= 2 * l1; ++a)
            for (int b = 0; b <= 2 * l2; ++b)
              for (int c = 0; c <= 2 * l; ++c) gaunt[(a * (2 * l2 + 1) + b) * (2 * l + 1) + c] += p.w * y1[a] * y2[b] * y[c];
        }
        double sign = 0.0;
        for (std::size_t i = 0; i < gaunt.size() && sign == 0.0; ++i)
          if (std::abs(block.dense[i]) > 1e-3) sign = (gaunt[i] / kappa) / block.dense[i] > 0 ? 1.0 : -1.0;
        for (std::size_t i = 0; i < gaunt.size(); ++i) quad = std::max(quad, std::abs(gaunt[i] / kappa - sign * block.dense[i]));
      }

  std::mt19937_64 rng(707);
  std::normal_distribution<double> normal;
  double wigner = 0.0;
  for (int trial = 0; trial < 20; ++trial) {
    const Eigen::Matrix3d a = so3::random_rotation(rng), b = so3::random_rotation(rng);
    for (int l = 0; l <= so3::kMaxL; ++l) {
      const Eigen::MatrixXd da = so3::wigner_d_real(l, a), db = so3::wigner_d_real(l, b);
      const Eigen::MatrixXd id = Eigen::MatrixXd::Identity(2 * l + 1, 2 * l + 1);
      wigner = std::max(wigner, (so3::wigner_d_real(l, a * b) - da * db).cwiseAbs().maxCoeff());
      wigner = std::max(wigner, (da * da.transpose() - id).cwiseAbs().maxCoeff());
      wigner = std::max(wigner, (so3::wigner_d_real(l, Eigen::Matrix3d::Identity()) - id).cwiseAbs().maxCoeff());
      wigner = std::max(wigner, (da - oracle::sampled_wigner(l, a, rng)).cwiseAbs().maxCoeff());
      for (int k = 0; k < 20; ++k) {
        const Eigen::Vector3d v = Eigen::Vector3d(normal(rng), normal(rng), normal(rng)).normalized();
        wigner = std::max(wigner, (so3::real_sph_harm_all(l, a * v) - da * so3::real_sph_harm_all(l, v)).cwiseAbs().maxCoeff());
      }
    }
  }
  report(7, ladder < kCgLadderTol && quad < kCgQuadratureTol && wigner < kWignerTol,
         fmt::format("CG vs ladder oracle {:.2e} (< {:.0e}), vs quadrature {:.2e} (< {:.0e}); Wigner properties {:.2e} (< {:.0e})",
                     ladder, kCgLadderTol, quad, kCgQuadratureTol, wigner, kWignerTol));
}

struct Labeled {
  MolecularSystem system;
  NetworkInput input;
  double low = 0.0, high = 0.0;  // eV
};

// Molecules whose reference and perturbed SCFs both converge.
std::vector<Labeled> toy_set(int n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  ScfOptions low, high;
  low.throw_on_failure = high.throw_on_failure = false;
  high.scaling = kHighLevel;
  std::vector<Labeled> out;
  while (static_cast<int>(out.size()) < n) {
    const auto sys = random_molecule(rng, 5, true);
    const auto a = run_scf(sys, low), b = run_scf(sys, high);
    if (!a.result.converged || !b.result.converged) continue;
    out.push_back({sys, prepare_input(sys, a.qmm), a.result.energy * units::kHartreeToEv,
                   b.result.energy * units::kHartreeToEv});
  }
  return out;
}

std::vector<Sample> samples(const std::vector<Labeled>& set, std::size_t begin, std::size_t end, LabelMode mode) {
  std::vector<Sample> out;
  for (std::size_t i = begin; i < end; ++i) {
    const auto& x = set[i];
    out.push_back({x.input,
                   compute_delta_labels({x.high}, {x.low}, {species_of(x.system.charge, x.system.multiplicity)}, mode)[0],
                   std::to_string(i)});
  }
  return out;
}

void criterion_8() {
  const auto t0 = Clock::now();
  const auto set = toy_set(64, 808);
  // 48 / 8 / 8, identical for both modes.
  double mae[2] = {0.0, 0.0};
  std::vector<double> held_out, held_out_delta;
  for (std::size_t i = 56; i < 64; ++i) {
    held_out.push_back(set[i].high);
    held_out_delta.push_back(set[i].high - set[i].low);
  }
  for (auto mode : {LabelMode::delta, LabelMode::direct}) {
    TrainConfig tc;
    tc.mode = mode;
    tc.seed = 8;
    Model model(ModelConfig::scaled(64), 8);
    train(tc, model, samples(set, 0, 48, mode), samples(set, 48, 56, mode));
    mae[mode == LabelMode::delta ? 0 : 1] = evaluate(model, samples(set, 56, 64, mode)).metrics.mae_mev / 1000.0;
  }
  const double sd = stddev(held_out);
  const double t = seconds_since(t0);
  report(8, mae[0] < kHeldOutFraction * sd && mae[0] <= mae[1] && t < kBudget8,
         fmt::format("toy delta learning: held-out MAE delta {:.3f} eV, direct {:.3f} eV; label std {:.2f} eV "
                     "(delta MAE < {:.0f}% of it, delta <= direct); delta-label std {:.3f} eV; {:.0f} s",
                     mae[0], mae[1], sd, 100 * kHeldOutFraction, stddev(held_out_delta), t));
}

void criterion_9() {
  const MolecularSystem base = methanol_like();
  ScfOptions high;
  high.scaling = kHighLevel;
  std::vector<Labeled> states;
  for (auto [q, m] : std::vector<std::pair<int, int>>{{0, 1}, {1, 2}, {-1, 2}, {0, 3}}) {
    MolecularSystem s = base;
    s.charge = q;
    s.multiplicity = m;
    const auto a = run_scf(s), b = run_scf(s, high);
    states.push_back({s, prepare_input(s, a.qmm), a.result.energy * units::kHartreeToEv,
                      b.result.energy * units::kHartreeToEv});
  }
  double min_dp = std::numeric_limits<double>::infinity(), min_gap = min_dp;
  for (std::size_t i = 0; i < states.size(); ++i)
    for (std::size_t j = i + 1; j < states.size(); ++j) {
      min_dp = std::min(min_dp, (states[i].input.qmm.p_total() - states[j].input.qmm.p_total()).norm());
      min_gap = std::min(min_gap, std::abs(states[i].high - states[j].high));
    }
  TrainConfig tc;
  tc.batch_size = 4;
  tc.warmup_epochs = 100;
  tc.cosine_epochs = 400;
  tc.seed = 9;
  Model model(ModelConfig::scaled(16), 9);
  const auto train_set = samples(states, 0, 4, LabelMode::delta);
  train(tc, model, train_set, {});
  double worst = 0.0;
  for (const auto& s : train_set)
    worst = std::max(worst, 1000.0 * std::abs(s.label.y_low + model.predict(s.input) - s.label.y_target));
  report(9, min_dp > kDensityGap && worst < units::kChemicalAccuracyMeV,
         fmt::format("spin/charge states: min ||dP|| {:.3f} (> {:.0e}); trained toy model max error {:.2f} meV "
                     "(< {} meV) against labels >= {:.2f} eV apart",
                     min_dp, kDensityGap, worst, units::kChemicalAccuracyMeV, min_gap));
}

void criterion_10() {
  const MolecularSystem base = formaldehyde();
  const auto ref = run_scf(base);
  MolecularSystem strong = base;
  strong.field = Eigen::Vector3d(0.0, 0.0, kFieldAu);
  const double shift = std::abs(run_scf(strong).result.energy - ref.result.energy);
  // dE/df_k = -(electronic + nuclear dipole)_k
  const auto d = dipole_integrals(ref.qmm.layout, Eigen::Vector3d::Zero());
  const double h = 1e-4;
  double worst = 0.0;
  for (int k = 0; k < 3; ++k) {
    MolecularSystem plus = base, minus = base;
    plus.field = Eigen::Vector3d::Zero();
    minus.field = Eigen::Vector3d::Zero();
    (*plus.field)[k] = h;
    (*minus.field)[k] = -h;
    const double numeric = (run_scf(plus).result.energy - run_scf(minus).result.energy) / (2 * h);
    double nuclear = 0.0;
    for (std::size_t a = 0; a < base.size(); ++a) nuclear += base.atomic_numbers[a] * base.coordinates[a][k];
    const double electronic = -ref.qmm.p_total().cwiseProduct(d[k]).sum();
    worst = std::max(worst, std::abs(numeric + electronic + nuclear));
  }
  report(10, shift > kFieldShiftHartree && worst < kDipoleTol,
         fmt::format("field response: |dE| at {} au = {:.3e} Eh (> {:.0e}); dE/df vs dipole {:.2e} (< {:.0e})",
                     kFieldAu, shift, kFieldShiftHartree, worst, kDipoleTol));
}

void criterion_11() {
  const auto zero = spin_gaps(-3.25, -3.25, -3.25, -3.25);
  const auto g = spin_gaps(-10.0, -11.0, -10.5, -10.75);
  // Dyadic inputs: every difference is exact in binary.
  const bool ok = zero.singlet == 0.0 && zero.triplet == 0.0 && zero.adiabatic == 0.0 && g.singlet == 1.0 &&
                  g.triplet == 0.25 && g.adiabatic == 0.5;
  report(11, ok,
         fmt::format("spin gaps: all-equal -> ({}, {}, {}); (-10, -11, -10.5, -10.75) -> ({}, {}, {})", zero.singlet,
                     zero.triplet, zero.adiabatic, g.singlet, g.triplet, g.adiabatic));
}

void criterion_12() {
  const double lr = lr_schedule(100, TrainConfig{});
  const double loss = ad::smooth_l1_value(2.0, 1.0);
  // Errors of 43.3 and 43.5 meV straddle the chemical-accuracy line.
  const auto m = compute_metrics({0.0433, 0.0435}, {0.0, 0.0}, {Species::neutral, Species::neutral});
  report(12, lr == 5e-4 && loss == 1.5 && units::kChemicalAccuracyMeV == 43.4 && m.within_chemical_accuracy == 0.5,
         fmt::format("constants: lr(100) = {}, smooth-L1(2, 1) = {}, chemical accuracy {} meV (fraction within on "
                     "43.3/43.5 meV errors = {})",
                     lr, loss, units::kChemicalAccuracyMeV, m.within_chemical_accuracy));
}

}  // namespace

int main() {
  const std::vector<std::pair<int, std::function<void()>>> runs = {
      {1, criterion_1}, {2, criteria_2_3}, {4, criterion_4},   {5, criterion_5},   {6, criterion_6},  {7, criterion_7},
      {8, criterion_8}, {9, criterion_9},  {10, criterion_10}, {11, criterion_11}, {12, criterion_12}};
  for (const auto& [id, run] : runs) {
    try {
      run();
    } catch (const std::exception& e) {
      report(id, false, fmt::format("unexpected error: {}", e.what()));
    }
  }
  std::cout << (failures ? fmt::format("{} criteria failed\n", failures) : "all criteria passed\n");
  return failures ? 1 : 0;
}
