#include "orbitall/scf.hpp"

#include <algorithm>
#include <cmath>
#include <deque>
#include <limits>

#include <fmt/format.h>

#include "orbitall/errors.hpp"
#include "orbitall/integrals.hpp"
#include "orbitall/so3.hpp"
#include "orbitall/units.hpp"

namespace orbitall {

const Eigen::MatrixXd& QMMSet::operator[](int i) const {
  switch (i) {
    case 0: return f_alpha;
    case 1: return f_beta;
    case 2: return p_alpha;
    case 3: return p_beta;
    case 4: return s;
    case 5: return h_core;
  }
  throw std::out_of_range(fmt::format("QMM index {}", i));
}

Eigen::MatrixXd& QMMSet::operator[](int i) {
  return const_cast<Eigen::MatrixXd&>(static_cast<const QMMSet&>(*this)[i]);
}

const ElementParameters& element_parameters(int z) {
  static const ElementParameters h{0.47, 0.072}, c{0.40, 0.031}, n{0.48, 0.033}, o{0.51, 0.035};
  switch (z) {
    case 1: return h;
    case 6: return c;
    case 7: return n;
    case 8: return o;
  }
  throw UnknownElement(fmt::format("no engine parameters for Z={} ({})", z, element_symbol(z)));
}

double ionization_parameter(int z, int n, int l) {
  // Core 1s levels in hartree, valence levels from the usual Hueckel set in eV.
  auto ev = [](double x) { return x * units::kEvToHartree; };
  if (z == 1 && n == 1 && l == 0) return ev(-13.6);
  if (n == 1 && l == 0) {
    if (z == 6) return -11.33;
    if (z == 7) return -15.63;
    if (z == 8) return -20.67;
  }
  if (n == 2) {
    if (z == 6) return l == 0 ? ev(-21.4) : ev(-11.4);
    if (z == 7) return l == 0 ? ev(-26.0) : ev(-13.4);
    if (z == 8) return l == 0 ? ev(-32.3) : ev(-14.8);
  }
  throw UnknownElement(fmt::format("no ionization parameter for Z={} shell n={} l={}", z, n, l));
}

Eigen::MatrixXd core_hamiltonian(const MolecularSystem& system, const AOLayout& layout, const Eigen::MatrixXd& s,
                                 const std::array<Eigen::MatrixXd, 3>& dipoles, const EngineScaling& scaling) {
  const int n = layout.n_ao();
  Eigen::VectorXd diag(n);
  for (int i = 0; i < n; ++i) {
    const auto& ao = layout.aos[i];
    diag[i] = ionization_parameter(layout.atomic_numbers[ao.atom], ao.n, ao.l);
    if (ao.l == 1) diag[i] *= scaling.ionization_p;
  }
  const double k = kWolfsbergHelmholz * scaling.wolfsberg_helmholz;
  Eigen::MatrixXd h(n, n);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j)
      h(i, j) = i == j ? diag[i] : 0.5 * k * (diag[i] + diag[j]) * s(i, j);
  if (system.field) {
    for (int k = 0; k < 3; ++k)
      if ((*system.field)[k] != 0.0) h += (*system.field)[k] * dipoles[k];
  }
  return h;
}

Eigen::MatrixXd coulomb_kernel(const MolecularSystem& system, double hardness_scale) {
  const int na = static_cast<int>(system.size());
  Eigen::MatrixXd g(na, na);
  for (int a = 0; a < na; ++a)
    for (int b = 0; b < na; ++b) {
      const double ia = 1.0 / (hardness_scale * element_parameters(system.atomic_numbers[a]).hardness);
      const double ib = 1.0 / (hardness_scale * element_parameters(system.atomic_numbers[b]).hardness);
      const double r2 = (system.coordinates[a] - system.coordinates[b]).squaredNorm();
      g(a, b) = 1.0 / std::sqrt(r2 + 0.25 * (ia + ib) * (ia + ib));
    }
  return g;
}

namespace {

struct Eigenpairs {
  Eigen::VectorXd eps;
  Eigen::MatrixXd c;
};

Eigenpairs diagonalize(const Eigen::MatrixXd& f, const Eigen::MatrixXd& x) {
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(x.transpose() * f * x);
  return {es.eigenvalues(), x * es.eigenvectors()};
}

Eigen::MatrixXd occupied_density(const Eigen::MatrixXd& c, int nocc) {
  const auto occ = c.leftCols(nocc);
  return occ * occ.transpose();
}

// Mulliken population per atom.
Eigen::VectorXd populations(const Eigen::MatrixXd& p, const Eigen::MatrixXd& s, const AOLayout& layout) {
  const Eigen::VectorXd per_ao = p.cwiseProduct(s).rowwise().sum();
  Eigen::VectorXd out(layout.n_atoms());
  for (int a = 0; a < layout.n_atoms(); ++a) out[a] = per_ao.segment(layout.atom_begin(a), layout.atom_size(a)).sum();
  return out;
}

// Fock matrices and energy for given spin densities. Everything the SCF
// needs from a density lives here so the final pass reuses it verbatim.
class Model {
 public:
  Model(const MolecularSystem& system, const AOLayout& layout, const Eigen::MatrixXd& s, const Eigen::MatrixXd& h,
        const EngineScaling& scaling)
      : layout_(layout), s_(s), h_(h), gamma_(coulomb_kernel(system, scaling.hardness)) {
    const int na = layout.n_atoms();
    z_.resize(na);
    w_.resize(na);
    for (int a = 0; a < na; ++a) {
      z_[a] = system.atomic_numbers[a];
      w_[a] = scaling.hund * element_parameters(system.atomic_numbers[a]).hund;
    }
    nuclear_field_ = 0.0;
    if (system.field)
      for (int a = 0; a < na; ++a) nuclear_field_ -= z_[a] * system.field->dot(system.coordinates[a]);
  }

  Eigen::VectorXd charges(const Eigen::MatrixXd& pa, const Eigen::MatrixXd& pb) const {
    return z_ - populations(pa + pb, s_, layout_);
  }
  Eigen::VectorXd spins(const Eigen::MatrixXd& pa, const Eigen::MatrixXd& pb) const {
    return populations(pa - pb, s_, layout_);
  }

  double energy(const Eigen::MatrixXd& pa, const Eigen::MatrixXd& pb) const {
    const Eigen::VectorXd q = charges(pa, pb), m = spins(pa, pb);
    return (pa + pb).cwiseProduct(h_).sum() + 0.5 * q.dot(gamma_ * q) - 0.5 * w_.dot(m.cwiseAbs2()) + nuclear_field_;
  }

  Eigen::MatrixXd fock_restricted(const Eigen::MatrixXd& p) const { return h_ + mulliken_shift(gamma_ * charges(p, p)); }

  std::pair<Eigen::MatrixXd, Eigen::MatrixXd> fock(const Eigen::MatrixXd& pa, const Eigen::MatrixXd& pb) const {
    const Eigen::MatrixXd coul = h_ + mulliken_shift(gamma_ * charges(pa, pb));
    const Eigen::MatrixXd spin = mulliken_shift(w_.cwiseProduct(spins(pa, pb)));
    return {coul + spin, coul - spin};
  }

 private:
  // -1/2 S_{mu nu} (u_A + u_B) for a per-atom potential u.
  Eigen::MatrixXd mulliken_shift(const Eigen::VectorXd& u) const {
    Eigen::VectorXd per_ao(layout_.n_ao());
    for (int i = 0; i < layout_.n_ao(); ++i) per_ao[i] = u[layout_.aos[i].atom];
    Eigen::MatrixXd out = s_;
    for (int i = 0; i < out.rows(); ++i)
      for (int j = 0; j < out.cols(); ++j) out(i, j) *= -0.5 * (per_ao[i] + per_ao[j]);
    return out;
  }

  const AOLayout& layout_;
  const Eigen::MatrixXd& s_;
  const Eigen::MatrixXd& h_;
  Eigen::MatrixXd gamma_;
  Eigen::VectorXd z_, w_;
  double nuclear_field_;
};

// Pulay extrapolation over both spin channels with shared coefficients.
class Diis {
 public:
  explicit Diis(int history) : history_(history) {}

  void push(std::vector<Eigen::MatrixXd> focks, std::vector<Eigen::MatrixXd> errors) {
    focks_.push_back(std::move(focks));
    errors_.push_back(std::move(errors));
    if (static_cast<int>(focks_.size()) > history_) {
      focks_.pop_front();
      errors_.pop_front();
    }
  }

  std::vector<Eigen::MatrixXd> extrapolate() const {
    const int k = static_cast<int>(focks_.size());
    Eigen::MatrixXd b = Eigen::MatrixXd::Zero(k + 1, k + 1);
    for (int i = 0; i < k; ++i)
      for (int j = 0; j <= i; ++j) {
        double v = 0.0;
        for (std::size_t s = 0; s < errors_[i].size(); ++s) v += errors_[i][s].cwiseProduct(errors_[j][s]).sum();
        b(i, j) = b(j, i) = v;
      }
    // Rescale so the error block is O(1) next to the constraint border.
    const double scale = b.diagonal().head(k).maxCoeff();
    if (scale > 0.0) b.topLeftCorner(k, k) /= scale;
    b.row(k).head(k).setConstant(-1.0);
    b.col(k).head(k).setConstant(-1.0);
    Eigen::VectorXd rhs = Eigen::VectorXd::Zero(k + 1);
    rhs[k] = -1.0;
    const Eigen::VectorXd c = b.colPivHouseholderQr().solve(rhs);
    std::vector<Eigen::MatrixXd> out(focks_.back().size());
    for (std::size_t s = 0; s < out.size(); ++s) {
      out[s] = Eigen::MatrixXd::Zero(focks_.back()[s].rows(), focks_.back()[s].cols());
      for (int i = 0; i < k; ++i) out[s] += c[i] * focks_[i][s];
    }
    return out;
  }

 private:
  int history_;
  std::deque<std::vector<Eigen::MatrixXd>> focks_, errors_;
};

Eigen::MatrixXd commutator_error(const Eigen::MatrixXd& f, const Eigen::MatrixXd& p, const Eigen::MatrixXd& s,
                                 const Eigen::MatrixXd& x) {
  const Eigen::MatrixXd fps = f * p * s;
  return x.transpose() * (fps - fps.transpose()) * x;
}

// Round-off allowance when comparing energies.
double energy_slack(double e) { return 1e-12 * std::max(1.0, std::abs(e)); }

double rms(const Eigen::MatrixXd& a) { return std::sqrt(a.squaredNorm() / static_cast<double>(a.size())); }

void frontier(const Eigenpairs& e, int nocc, std::optional<double>& homo, std::optional<double>& lumo) {
  if (nocc > 0) homo = e.eps[nocc - 1];
  if (nocc < e.eps.size()) lumo = e.eps[nocc];
}

}  // namespace

ScfOutput run_scf(const MolecularSystem& system, const ScfOptions& options, const BasisTable& table) {
  system.validate();
  if (system.dielectric && *system.dielectric != 1.0)
    throw UnsupportedEnvironment(fmt::format("dielectric {} requested; only vacuum (1) is supported", *system.dielectric));

  ScfOutput out;
  QMMSet& t = out.qmm;
  LowLevelResult& res = out.result;
  t.layout = build_basis(system, table);
  const AOLayout& layout = t.layout;
  const int n = layout.n_ao();
  const int na = system.n_alpha(), nb = system.n_beta();
  if (na > n) throw InvariantViolation(fmt::format("{} alpha electrons exceed {} basis functions", na, n));

  t.s = overlap_matrix(layout);
  const auto dip = dipole_integrals(layout, Eigen::Vector3d::Zero());
  t.h_core = core_hamiltonian(system, layout, t.s, dip, options.scaling);

  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> ses(t.s);
  const Eigen::MatrixXd x =
      ses.eigenvectors() * ses.eigenvalues().cwiseInverse().cwiseSqrt().asDiagonal() * ses.eigenvectors().transpose();

  const Model model(system, layout, t.s, t.h_core, options.scaling);
  const bool restricted = na == nb;

  const Eigenpairs guess = diagonalize(t.h_core, x);
  Eigen::MatrixXd pa = occupied_density(guess.c, na);
  Eigen::MatrixXd pb = restricted ? pa : occupied_density(guess.c, nb);

  Diis diis(options.diis_history);
  auto densities = [&](const std::vector<Eigen::MatrixXd>& f) -> std::pair<Eigen::MatrixXd, Eigen::MatrixXd> {
    Eigen::MatrixXd a = occupied_density(diagonalize(f[0], x).c, na);
    Eigen::MatrixXd b = restricted ? a : occupied_density(diagonalize(f[1], x).c, nb);
    return {std::move(a), std::move(b)};
  };
  double change = 0.0;
  // Best aufbau density seen once the tolerance is met; iteration continues
  // toward polish_tolerance so independent runs agree far below tolerance.
  double best_change = std::numeric_limits<double>::infinity();
  Eigen::MatrixXd best_a, best_b;
  int first_converged = 0;
  int it = 0;
  for (it = 1; it <= options.max_iterations; ++it) {
    const double e_in = model.energy(pa, pb);
    res.energy_history.push_back(e_in);
    std::vector<Eigen::MatrixXd> f;
    if (restricted) {
      f = {model.fock_restricted(pa)};
      diis.push(f, {commutator_error(f[0], pa, t.s, x)});
    } else {
      auto [fa, fb] = model.fock(pa, pb);
      f = {std::move(fa), std::move(fb)};
      diis.push(f, {commutator_error(f[0], pa, t.s, x), commutator_error(f[1], pb, t.s, x)});
    }
    // Aufbau densities of the undamped Fock matrices: their distance to the
    // input density is the convergence measure.
    auto [aufbau_a, aufbau_b] = densities(f);
    const Eigen::MatrixXd da = aufbau_a - pa, db = aufbau_b - pb;
    change = restricted ? rms(da) : std::sqrt(0.5 * (rms(da) * rms(da) + rms(db) * rms(db)));
    if (change < options.tolerance) {
      if (!first_converged) first_converged = it;
      if (change < best_change) {
        best_change = change;
        best_a = aufbau_a;
        best_b = aufbau_b;
      }
      if (change < options.polish_tolerance || it - first_converged >= options.polish_iterations) break;
    }

    Eigen::MatrixXd next_a, next_b;
    if (it > options.diis_start) {
      std::tie(next_a, next_b) = densities(diis.extrapolate());
    } else {
      next_a = pa + options.mixing * da;
      next_b = restricted ? next_a : Eigen::MatrixXd(pb + options.mixing * db);
    }
    // Energy safeguard: a step that raises the energy is replaced by the
    // exact line minimum along the aufbau direction (E is quadratic in P).
    if (model.energy(next_a, next_b) > e_in + energy_slack(e_in)) {
      const double slope = f[0].cwiseProduct(da).sum() + (restricted ? f[0] : f[1]).cwiseProduct(db).sum();
      const double curvature = model.energy(aufbau_a, aufbau_b) - e_in - slope;
      const double lambda = curvature > 0.0 ? std::clamp(-slope / (2.0 * curvature), 0.0, 1.0) : 1.0;
      next_a = pa + lambda * da;
      next_b = restricted ? next_a : Eigen::MatrixXd(pb + lambda * db);
    }
    pa = std::move(next_a);
    pb = std::move(next_b);
  }
  res.iterations = std::min(it, options.max_iterations);
  res.final_rms_change = change;
  if (first_converged) {
    res.converged = true;
    res.final_rms_change = best_change;
    pa = std::move(best_a);
    pb = restricted ? pa : std::move(best_b);
  }
  if (!res.converged && options.throw_on_failure)
    throw ScfNotConverged(fmt::format("no convergence after {} iterations (RMS density change {:.3e}, energy {:.10f} Eh)",
                                      res.iterations, change, res.energy_history.back()));

  // Final matrices from the converged density.
  t.p_alpha = pa;
  if (restricted) {
    t.f_alpha = model.fock_restricted(pa);
    t.p_beta = t.p_alpha;
    t.f_beta = t.f_alpha;
  } else {
    t.p_beta = pb;
    std::tie(t.f_alpha, t.f_beta) = model.fock(pa, pb);
  }
  const Eigenpairs ea = diagonalize(t.f_alpha, x);
  const Eigenpairs eb = restricted ? ea : diagonalize(t.f_beta, x);
  res.energy = model.energy(t.p_alpha, t.p_beta);
  res.eps_alpha = ea.eps;
  res.eps_beta = eb.eps;
  res.occ_alpha = Eigen::VectorXd::Zero(n);
  res.occ_beta = Eigen::VectorXd::Zero(n);
  res.occ_alpha.head(na).setOnes();
  res.occ_beta.head(nb).setOnes();
  const Eigen::VectorXd q = model.charges(t.p_alpha, t.p_beta), m = model.spins(t.p_alpha, t.p_beta);
  res.mulliken_charges.assign(q.data(), q.data() + q.size());
  res.spin_populations.assign(m.data(), m.data() + m.size());
  frontier(ea, na, res.homo_lumo[0], res.homo_lumo[1]);
  frontier(eb, nb, res.homo_lumo[2], res.homo_lumo[3]);
  for (std::size_t i = 3; i < res.energy_history.size(); ++i)
    if (res.energy_history[i] > res.energy_history[i - 1] + energy_slack(res.energy_history[i - 1]))
      res.energy_monotone = false;
  return out;
}

Eigen::MatrixXd ao_wigner(const AOLayout& layout, const Eigen::Matrix3d& rotation) {
  const so3::RotationRep rep(rotation, std::max(1, layout.lmax()));
  Eigen::MatrixXd d = Eigen::MatrixXd::Zero(layout.n_ao(), layout.n_ao());
  for (std::size_t i = 0; i < layout.shells.size(); ++i) {
    const int l = layout.shells[i].l;
    d.block(layout.shell_offset[i], layout.shell_offset[i], 2 * l + 1, 2 * l + 1) = rep.wigner(l);
  }
  return d;
}

RotationReport compare_rotated(const QMMSet& original, const QMMSet& rotated, const Eigen::Matrix3d& rotation) {
  if (original.n_ao() != rotated.n_ao()) throw LayoutMismatch("rotated system has a different AO layout");
  const Eigen::MatrixXd d = ao_wigner(original.layout, rotation);
  RotationReport report;
  for (int k = 0; k < QMMSet::kCount; ++k) {
    const Eigen::MatrixXd expected = d * original[k] * d.transpose();
    report.per_matrix[k] = (rotated[k] - expected).cwiseAbs().maxCoeff();
    report.max_deviation = std::max(report.max_deviation, report.per_matrix[k]);
  }
  return report;
}

RotationReport rotate_system_check(const MolecularSystem& system, const Eigen::Matrix3d& rotation,
                                   const ScfOptions& options) {
  const auto a = run_scf(system, options);
  const auto b = run_scf(system.transformed(rotation), options);
  return compare_rotated(a.qmm, b.qmm, rotation);
}

SpinGaps spin_gaps(double e_s1_at_singlet, double e_s0_at_singlet, double e_s1_at_triplet, double e_s0_at_triplet) {
  return {e_s1_at_singlet - e_s0_at_singlet, e_s1_at_triplet - e_s0_at_triplet, e_s1_at_triplet - e_s0_at_singlet};
}

}  // namespace orbitall
