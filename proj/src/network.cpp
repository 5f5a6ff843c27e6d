#include "orbitall/network.hpp"

#include <algorithm>
#include <cmath>
#include <memory>
#include <numeric>

#include <fmt/format.h>

#include "orbitall/errors.hpp"
#include "orbitall/so3.hpp"
#include "orbitall/units.hpp"

namespace orbitall {

using ad::Matrix;
using ad::Var;

std::string_view to_string(AttentionRenorm v) {
  switch (v) {
    case AttentionRenorm::off: return "off";
    case AttentionRenorm::node_norm: return "node_norm";
    case AttentionRenorm::layer_norm: return "layer_norm";
  }
  return "off";
}

std::string_view to_string(PhysicalTerms v) { return v == PhysicalTerms::off ? "off" : "electrostatic"; }
std::string_view to_string(Readout v) { return v == Readout::energy ? "energy" : "fmo"; }

AttentionRenorm parse_attention_renorm(std::string_view s) {
  if (s == "off") return AttentionRenorm::off;
  if (s == "node_norm") return AttentionRenorm::node_norm;
  if (s == "layer_norm") return AttentionRenorm::layer_norm;
  throw ConfigError(fmt::format("unknown attention_renorm '{}'", s));
}

PhysicalTerms parse_physical_terms(std::string_view s) {
  if (s == "off") return PhysicalTerms::off;
  if (s == "electrostatic") return PhysicalTerms::electrostatic;
  throw ConfigError(fmt::format("unknown physical_terms '{}'", s));
}

Readout parse_readout(std::string_view s) {
  if (s == "energy") return Readout::energy;
  if (s == "fmo") return Readout::fmo;
  throw ConfigError(fmt::format("unknown readout '{}'", s));
}

void ModelConfig::validate() const {
  if (irreps.channels() != hidden_dim)
    throw ConfigError(fmt::format("irreps carry {} channels, hidden_dim is {}", irreps.channels(), hidden_dim));
  if (n_message_layers < 1) throw ConfigError("need at least one message layer");
  if (static_cast<int>(decode_schedule.size()) != n_message_layers)
    throw ConfigError("decode_schedule needs one entry per message layer");
  if (std::any_of(decode_schedule.begin(), decode_schedule.end(), [](int v) { return v < 0; }))
    throw ConfigError("decode_schedule entries must be non-negative");
  if (std::accumulate(decode_schedule.begin(), decode_schedule.end(), 0) != n_decode_layers)
    throw ConfigError("decode_schedule must sum to n_decode_layers");
  if (n_conv_channels < 1 || n_attention_heads < 1) throw ConfigError("channel and head counts must be positive");
  if (mlp_depth < 1 || mlp_hidden < 1 || attention_hidden < 1) throw ConfigError("MLP sizes must be positive");
  if (activation != "swish") throw ConfigError(fmt::format("unsupported activation '{}'", activation));
  if (n_radial_basis < 1 || !(rbf_cutoff > 0.0)) throw ConfigError("radial basis needs n >= 1 and a positive cutoff");
  if (!(evnorm_epsilon > 0.0)) throw ConfigError("evnorm_epsilon must be positive");
  if (!(evnorm_momentum >= 0.0 && evnorm_momentum < 1.0)) throw ConfigError("evnorm_momentum must lie in [0, 1)");
  if (!(coulomb_damping > 0.0)) throw ConfigError("coulomb_damping must be positive");
  if (aux_exponents.empty()) throw ConfigError("need at least one auxiliary exponent");
  if (elements.empty()) throw ConfigError("element list is empty");
}

ModelConfig ModelConfig::scaled(int hidden_dim) {
  ModelConfig c;
  c.hidden_dim = hidden_dim;
  c.irreps = IrrepsSpec::scaled(hidden_dim);
  c.mlp_hidden = std::max(1, hidden_dim / 2);
  c.attention_hidden = hidden_dim;
  return c;
}

IrrepsSpec auxiliary_spec(int n_exponents) {
  IrrepsSpec s;
  for (int l = 0; l <= 2; ++l) s.counts[l] = {n_exponents, 0};
  return s;
}

IrrepsFeature reduce_diagonal(const Eigen::MatrixXd& o, const std::vector<OnSiteOverlap>& qtilde,
                              const AOLayout& layout, const IrrepsSpec& aux_spec) {
  const int n_atoms = layout.n_atoms();
  if (o.rows() != layout.n_ao() || o.cols() != layout.n_ao())
    throw LayoutMismatch(fmt::format("matrix is {}x{}, layout has {} AOs", o.rows(), o.cols(), layout.n_ao()));
  if (static_cast<int>(qtilde.size()) != n_atoms)
    throw LayoutMismatch(fmt::format("three-index overlaps cover {} atoms, layout has {}", qtilde.size(), n_atoms));
  IrrepsFeature h(aux_spec, n_atoms);
  for (int a = 0; a < n_atoms; ++a) {
    const auto& q = qtilde[a];
    const int n = layout.atom_size(a);
    if (q.atom != a || q.n_ao != n) throw LayoutMismatch(fmt::format("three-index overlap of atom {} does not match", a));
    const int b = layout.atom_begin(a);
    for (std::size_t k = 0; k < q.aux.size(); ++k) {
      const auto& x = q.aux[k];
      if (x.l > IrrepsSpec::kMaxL || x.n >= aux_spec.count(x.l, 1))
        throw LayoutMismatch(fmt::format("auxiliary function (n={}, l={}) outside the auxiliary spec", x.n, x.l));
      double s = 0.0;
      for (int mu = 0; mu < n; ++mu)
        for (int nu = 0; nu < n; ++nu) s += o(b + mu, b + nu) * q(mu, nu, static_cast<int>(k));
      h.at(a, x.l, 1, x.n, x.m) = s;
    }
  }
  return h;
}

NetworkInput prepare_input(const MolecularSystem& system, const QMMSet& qmm, const std::vector<double>& aux_exponents) {
  NetworkInput in;
  in.qmm = qmm;
  in.atomic_numbers = system.atomic_numbers;
  in.coordinates = system.coordinates;
  in.charge = system.charge;
  in.multiplicity = system.multiplicity;
  if (qmm.layout.n_atoms() != static_cast<int>(system.size()))
    throw LayoutMismatch(fmt::format("QMM layout has {} atoms, system has {}", qmm.layout.n_atoms(), system.size()));
  const auto aux = build_auxiliary_basis(qmm.layout, aux_exponents);
  const auto qt = three_index_overlap(qmm.layout, aux);
  const auto spec = auxiliary_spec(static_cast<int>(aux_exponents.size()));
  for (int k = 0; k < QMMSet::kCount; ++k) in.reduced[k] = reduce_diagonal(qmm[k], qt, qmm.layout, spec);
  const Eigen::MatrixXd ps = qmm.p_total() * qmm.s;
  in.mulliken.resize(in.n_atoms());
  for (int a = 0; a < in.n_atoms(); ++a) {
    double pop = 0.0;
    for (int mu = qmm.layout.atom_begin(a); mu < qmm.layout.atom_offset[a + 1]; ++mu) pop += ps(mu, mu);
    in.mulliken[a] = system.atomic_numbers[a] - pop;
  }
  return in;
}

std::vector<PairMessage> block_message(const Eigen::MatrixXd& o, const Eigen::VectorXd& rho, const AOLayout& layout) {
  std::vector<PairMessage> out;
  for (int b = 0; b < layout.n_atoms(); ++b)
    for (int a = 0; a < layout.n_atoms(); ++a) {
      if (a == b) continue;
      const auto blk = o.block(layout.atom_begin(a), layout.atom_begin(b), layout.atom_size(a), layout.atom_size(b));
      out.push_back({a, b, blk.transpose() * rho.segment(layout.atom_begin(a), layout.atom_size(a))});
    }
  return out;
}

AoRouting::AoRouting(const AOLayout& layout, const std::vector<std::vector<int>>& slots)
    : slots_(slots), entries_(slots.size()), n_atoms_(layout.n_atoms()), n_ao_(layout.n_ao()) {
  for (int mu = 0; mu < layout.n_ao(); ++mu) {
    const auto& info = layout.aos[mu];
    if (info.l >= static_cast<int>(slots_.size())) throw LayoutMismatch(fmt::format("AO with l={} has no slot", info.l));
    const auto& s = slots_[info.l];
    const auto it = std::find(s.begin(), s.end(), info.n);
    if (it == s.end()) throw LayoutMismatch(fmt::format("AO (n={}, l={}) has no slot", info.n, info.l));
    entries_[info.l].push_back({mu, info.atom * (2 * info.l + 1) + info.m + info.l, static_cast<int>(it - s.begin())});
  }
}

Eigen::MatrixXd AoRouting::to_ao(const std::vector<Eigen::MatrixXd>& y, int channels) const {
  Eigen::MatrixXd out = Eigen::MatrixXd::Zero(n_ao_, channels);
  for (int l = 0; l <= lmax(); ++l) {
    const int s = n_slots(l);
    for (const auto& e : entries_[l])
      for (int c = 0; c < channels; ++c) out(e.ao, c) = y[l](e.row, c * s + e.slot);
  }
  return out;
}

Eigen::MatrixXd AoRouting::from_ao(const Eigen::MatrixXd& m, int l) const {
  const int ch = static_cast<int>(m.cols());
  Eigen::MatrixXd out = Eigen::MatrixXd::Zero(n_atoms_ * (2 * l + 1), n_slots(l) * ch);
  for (const auto& e : entries_[l]) out.row(e.row).segment(e.slot * ch, ch) = m.row(e.ao);
  return out;
}

std::vector<std::vector<int>> basis_slots(const BasisTable& table, const std::vector<int>& elements) {
  std::vector<std::vector<int>> slots;
  for (int z : elements) {
    if (!table.has(z)) throw UnknownElement(fmt::format("element Z={} missing from the basis table", z));
    for (const auto& sh : table.shells(z)) {
      if (sh.l >= static_cast<int>(slots.size())) slots.resize(sh.l + 1);
      auto& s = slots[sh.l];
      if (std::find(s.begin(), s.end(), sh.n) == s.end()) s.push_back(sh.n);
    }
  }
  for (auto& s : slots) std::sort(s.begin(), s.end());
  return slots;
}

Eigen::RowVectorXd radial_basis(double r, int n, double cutoff) {
  Eigen::RowVectorXd out(n);
  const double spacing = n > 1 ? cutoff / (n - 1) : cutoff;
  const double gamma = 0.5 / (spacing * spacing);
  for (int k = 0; k < n; ++k) {
    const double d = r - k * spacing;
    out[k] = std::exp(-gamma * d * d);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Network operations on flat features (n_atoms x spec.components()).

namespace {

void accumulate(Var v, const Matrix& g) {
  if (Matrix* t = v.tape->grad(v)) *t += g;
}

Var extract_block(Var h, const IrrepsSpec& spec, int l, int p) {
  const int w = 2 * l + 1, c = spec.count(l, p), n = static_cast<int>(h.rows()), off = spec.offset(l, p);
  Matrix v(n * w, c);
  for (int a = 0; a < n; ++a)
    for (int ch = 0; ch < c; ++ch) v.block(a * w, ch, w, 1) = h.value().row(a).segment(off + ch * w, w).transpose();
  return h.tape->record("extract_block", std::move(v), {h}, [h, w, c, n, off](const Matrix& g) {
    if (Matrix* gh = h.tape->grad(h))
      for (int a = 0; a < n; ++a)
        for (int ch = 0; ch < c; ++ch) gh->row(a).segment(off + ch * w, w) += g.block(a * w, ch, w, 1).transpose();
  });
}

struct BlockPart {
  int l, p;
  Var v;
};

Var assemble_blocks(ad::Tape& tape, const IrrepsSpec& spec, int n_atoms, const std::vector<BlockPart>& parts) {
  Matrix out = Matrix::Zero(n_atoms, spec.components());
  std::vector<Var> inputs;
  for (const auto& b : parts) {
    const int w = 2 * b.l + 1, off = spec.offset(b.l, b.p);
    for (int a = 0; a < n_atoms; ++a)
      for (int ch = 0; ch < spec.count(b.l, b.p); ++ch)
        out.row(a).segment(off + ch * w, w) += b.v.value().block(a * w, ch, w, 1).transpose();
    inputs.push_back(b.v);
  }
  return tape.record("assemble_blocks", std::move(out), inputs, [parts, spec, n_atoms](const Matrix& g) {
    for (const auto& b : parts) {
      Matrix* gb = b.v.tape->grad(b.v);
      if (!gb) continue;
      const int w = 2 * b.l + 1, off = spec.offset(b.l, b.p);
      for (int a = 0; a < n_atoms; ++a)
        for (int ch = 0; ch < spec.count(b.l, b.p); ++ch)
          gb->block(a * w, ch, w, 1) += g.row(a).segment(off + ch * w, w).transpose();
    }
  });
}

// Smooth content sqrt(sum_m h^2 + eps^2) - eps per (atom, channel).
Var content(Var h, const IrrepsSpec& spec, double eps) {
  const int n = static_cast<int>(h.rows());
  Matrix v(n, spec.channels());
  for (int l = 0; l <= IrrepsSpec::kMaxL; ++l)
    for (int p : {1, -1})
      for (int ch = 0; ch < spec.count(l, p); ++ch) {
        const int i = spec.index(l, p, ch, -l), c = spec.channel_offset(l, p) + ch;
        for (int a = 0; a < n; ++a)
          v(a, c) = std::sqrt(h.value().row(a).segment(i, 2 * l + 1).squaredNorm() + eps * eps) - eps;
      }
  Matrix vc = v;
  return h.tape->record("content", std::move(v), {h}, [h, spec, eps, vc = std::move(vc)](const Matrix& g) {
    Matrix* gh = h.tape->grad(h);
    if (!gh) return;
    for (int l = 0; l <= IrrepsSpec::kMaxL; ++l)
      for (int p : {1, -1})
        for (int ch = 0; ch < spec.count(l, p); ++ch) {
          const int i = spec.index(l, p, ch, -l), c = spec.channel_offset(l, p) + ch;
          for (int a = 0; a < vc.rows(); ++a)
            gh->row(a).segment(i, 2 * l + 1) += (g(a, c) / (vc(a, c) + eps)) * h.value().row(a).segment(i, 2 * l + 1);
        }
  });
}

// Multiplies every (n, l, p) segment of h by the per-(atom, channel) scalar s.
Var channel_scale(Var h, Var s, const IrrepsSpec& spec) {
  Matrix v = h.value();
  for (int l = 0; l <= IrrepsSpec::kMaxL; ++l)
    for (int p : {1, -1})
      for (int ch = 0; ch < spec.count(l, p); ++ch) {
        const int i = spec.index(l, p, ch, -l), c = spec.channel_offset(l, p) + ch;
        for (int a = 0; a < v.rows(); ++a) v.row(a).segment(i, 2 * l + 1) *= s.value()(a, c);
      }
  return h.tape->record("channel_scale", std::move(v), {h, s}, [h, s, spec](const Matrix& g) {
    Matrix* gh = h.tape->grad(h);
    Matrix* gs = s.tape->grad(s);
    for (int l = 0; l <= IrrepsSpec::kMaxL; ++l)
      for (int p : {1, -1})
        for (int ch = 0; ch < spec.count(l, p); ++ch) {
          const int i = spec.index(l, p, ch, -l), c = spec.channel_offset(l, p) + ch;
          for (int a = 0; a < g.rows(); ++a) {
            const auto seg = g.row(a).segment(i, 2 * l + 1);
            if (gh) gh->row(a).segment(i, 2 * l + 1) += s.value()(a, c) * seg;
            if (gs) (*gs)(a, c) += seg.dot(h.value().row(a).segment(i, 2 * l + 1));
          }
        }
  });
}

struct CgPath {
  int l1, p1, l2, p2, l, p, channels;
  const so3::CGBlock* cg;
};

std::vector<CgPath> cg_paths(const IrrepsSpec& spec, bool odd) {
  std::vector<CgPath> out;
  constexpr int L = IrrepsSpec::kMaxL;
  for (int l1 = 0; l1 <= L; ++l1)
    for (int p1 : {1, -1})
      for (int l2 = 0; l2 <= L; ++l2)
        for (int p2 : {1, -1})
          for (int l = std::abs(l1 - l2); l <= std::min(l1 + l2, L); ++l) {
            const int sign = (l1 + l2 + l) % 2 == 0 ? 1 : -1;
            if (!odd && sign < 0) continue;
            const int p = p1 * p2 * sign;
            const int c = std::min({spec.count(l1, p1), spec.count(l2, p2), spec.count(l, p)});
            if (c > 0) out.push_back({l1, p1, l2, p2, l, p, c, &so3::cg_real(l1, l2, l)});
          }
  return out;
}

// q_{l p n m} = sum over paths and (m1, m2) of C f_{l1 p1 n m1} g_{l2 p2 n m2}.
using CgPaths = std::shared_ptr<const std::vector<CgPath>>;

Var cg_couple(Var f, Var g, const IrrepsSpec& spec, const CgPaths& paths_ptr) {
  const auto& paths = *paths_ptr;
  const int n = static_cast<int>(f.rows());
  Matrix v = Matrix::Zero(n, spec.components());
  const Matrix& fv = f.value();
  const Matrix& gv = g.value();
  for (const auto& path : paths)
    for (int ch = 0; ch < path.channels; ++ch) {
      const int i1 = spec.index(path.l1, path.p1, ch, -path.l1);
      const int i2 = spec.index(path.l2, path.p2, ch, -path.l2);
      const int io = spec.index(path.l, path.p, ch, -path.l);
      for (const auto& e : path.cg->nonzeros)
        for (int a = 0; a < n; ++a) v(a, io + e.m) += e.value * fv(a, i1 + e.m1) * gv(a, i2 + e.m2);
    }
  return f.tape->record("cg_couple", std::move(v), {f, g}, [f, g, spec, paths_ptr, n](const Matrix& grad) {
    const auto& paths = *paths_ptr;
    Matrix* gf = f.tape->grad(f);
    Matrix* gg = g.tape->grad(g);
    const Matrix& fv = f.value();
    const Matrix& gv = g.value();
    for (const auto& path : paths)
      for (int ch = 0; ch < path.channels; ++ch) {
        const int i1 = spec.index(path.l1, path.p1, ch, -path.l1);
        const int i2 = spec.index(path.l2, path.p2, ch, -path.l2);
        const int io = spec.index(path.l, path.p, ch, -path.l);
        for (const auto& e : path.cg->nonzeros)
          for (int a = 0; a < n; ++a) {
            const double go = e.value * grad(a, io + e.m);
            if (gf) (*gf)(a, i1 + e.m1) += go * gv(a, i2 + e.m2);
            if (gg) (*gg)(a, i2 + e.m2) += go * fv(a, i1 + e.m1);
          }
      }
  });
}

using Routing = std::shared_ptr<const AoRouting>;

Var route_to_ao(ad::Tape& tape, const std::vector<Var>& y, const Routing& rp, int channels) {
  const AoRouting& routing = *rp;
  std::vector<Matrix> yv;
  for (const Var& v : y) yv.push_back(v.value());
  return tape.record("route_to_ao", routing.to_ao(yv, channels), y, [y, rp, channels](const Matrix& g) {
    const AoRouting& routing = *rp;
    for (int l = 0; l <= routing.lmax(); ++l) {
      Matrix* gy = y[l].tape->grad(y[l]);
      if (!gy) continue;
      const int s = routing.n_slots(l);
      for (const auto& e : routing.entries(l))
        for (int c = 0; c < channels; ++c) (*gy)(e.row, c * s + e.slot) += g(e.ao, c);
    }
  });
}

Var route_from_ao(Var m, const Routing& rp, int l) {
  const AoRouting& routing = *rp;
  return m.tape->record("route_from_ao", routing.from_ao(m.value(), l), {m}, [m, rp, l](const Matrix& g) {
    const AoRouting& routing = *rp;
    Matrix* gm = m.tape->grad(m);
    if (!gm) return;
    const int ch = static_cast<int>(m.cols());
    for (const auto& e : routing.entries(l)) gm->row(e.ao) += g.row(e.row).segment(e.slot * ch, ch);
  });
}

// Ordered pairs (receiver, sender), receiver-major, with the first message
// row of each pair.
struct PairList {
  std::vector<int> receiver, sender, row;
  int rows = 0;
  int size() const { return static_cast<int>(receiver.size()); }
};

PairList make_pairs(const AOLayout& layout) {
  PairList p;
  for (int a = 0; a < layout.n_atoms(); ++a)
    for (int b = 0; b < layout.n_atoms(); ++b) {
      if (a == b) continue;
      p.receiver.push_back(a);
      p.sender.push_back(b);
      p.row.push_back(p.rows);
      p.rows += layout.atom_size(a);
    }
  return p;
}

// M[row(A<-B) + mu, i] = sum_k sum_{nu in B} O_k(nu, mu) R[nu, k I + i].
using Pairs = std::shared_ptr<const PairList>;

Var pair_messages(Var r, const QMMSet& t, const Pairs& pp, int channels) {
  const PairList& pairs = *pp;
  const auto& layout = t.layout;
  Matrix v = Matrix::Zero(pairs.rows, channels);
  for (int p = 0; p < pairs.size(); ++p) {
    const int a = pairs.receiver[p], b = pairs.sender[p];
    for (int k = 0; k < QMMSet::kCount; ++k)
      v.middleRows(pairs.row[p], layout.atom_size(a)).noalias() +=
          t[k].block(layout.atom_begin(b), layout.atom_begin(a), layout.atom_size(b), layout.atom_size(a)).transpose() *
          r.value().block(layout.atom_begin(b), k * channels, layout.atom_size(b), channels);
  }
  return r.tape->record("pair_messages", std::move(v), {r}, [r, &t, pp, channels](const Matrix& g) {
    const PairList& pairs = *pp;
    Matrix* gr = r.tape->grad(r);
    if (!gr) return;
    const auto& layout = t.layout;
    for (int p = 0; p < pairs.size(); ++p) {
      const int a = pairs.receiver[p], b = pairs.sender[p];
      for (int k = 0; k < QMMSet::kCount; ++k)
        gr->block(layout.atom_begin(b), k * channels, layout.atom_size(b), channels).noalias() +=
            t[k].block(layout.atom_begin(b), layout.atom_begin(a), layout.atom_size(b), layout.atom_size(a)) *
            g.middleRows(pairs.row[p], layout.atom_size(a));
    }
  });
}

// Smooth norm of every pair message per convolution channel.
Var pair_norms(Var m, const Pairs& pp, const AOLayout& layout, double eps) {
  const PairList& pairs = *pp;
  Matrix v(pairs.size(), m.cols());
  for (int p = 0; p < pairs.size(); ++p)
    for (int i = 0; i < m.cols(); ++i)
      v(p, i) = std::sqrt(m.value().col(i).segment(pairs.row[p], layout.atom_size(pairs.receiver[p])).squaredNorm() +
                          eps * eps) - eps;
  Matrix vc = v;
  return m.tape->record("pair_norms", std::move(v), {m}, [m, pp, &layout, eps, vc = std::move(vc)](const Matrix& g) {
    const PairList& pairs = *pp;
    Matrix* gm = m.tape->grad(m);
    if (!gm) return;
    for (int p = 0; p < pairs.size(); ++p) {
      const int n = layout.atom_size(pairs.receiver[p]);
      for (int i = 0; i < m.cols(); ++i)
        gm->col(i).segment(pairs.row[p], n) += (g(p, i) / (vc(p, i) + eps)) * m.value().col(i).segment(pairs.row[p], n);
    }
  });
}

// mt[mu in A, i J + j] = sum_B M[row(A<-B) + mu, i] alpha[(A<-B), j].
Var aggregate(Var m, Var alpha, const Pairs& pp, const AOLayout& layout) {
  const PairList& pairs = *pp;
  const int ci = static_cast<int>(m.cols()), cj = static_cast<int>(alpha.cols());
  Matrix v = Matrix::Zero(layout.n_ao(), ci * cj);
  for (int p = 0; p < pairs.size(); ++p) {
    const int a = pairs.receiver[p], n = layout.atom_size(a);
    for (int i = 0; i < ci; ++i)
      for (int j = 0; j < cj; ++j)
        v.col(i * cj + j).segment(layout.atom_begin(a), n) += alpha.value()(p, j) * m.value().col(i).segment(pairs.row[p], n);
  }
  return m.tape->record("aggregate", std::move(v), {m, alpha}, [m, alpha, pp, &layout, ci, cj](const Matrix& g) {
    const PairList& pairs = *pp;
    Matrix* gm = m.tape->grad(m);
    Matrix* ga = alpha.tape->grad(alpha);
    for (int p = 0; p < pairs.size(); ++p) {
      const int a = pairs.receiver[p], n = layout.atom_size(a);
      for (int i = 0; i < ci; ++i)
        for (int j = 0; j < cj; ++j) {
          const auto seg = g.col(i * cj + j).segment(layout.atom_begin(a), n);
          if (gm) gm->col(i).segment(pairs.row[p], n) += alpha.value()(p, j) * seg;
          if (ga) (*ga)(p, j) += seg.dot(m.value().col(i).segment(pairs.row[p], n));
        }
    }
  });
}

// s / sum(s) for a positive column vector.
Var normalize_sum(Var s) {
  const double total = s.value().sum();
  if (!(total > 0.0)) throw DegenerateAttention(fmt::format("attention normalization {} is not positive", total));
  Matrix v = s.value() / total;
  Matrix vc = v;
  return s.tape->record("normalize_sum", std::move(v), {s}, [s, total, vc = std::move(vc)](const Matrix& g) {
    const double dot = g.cwiseProduct(vc).sum();
    accumulate(s, ((g.array() - dot) / total).matrix());
  });
}

// Damped Coulomb energy sum_{A<B} q_A q_B erf(r/r0)/r in eV.
Var coulomb_energy(Var q, const std::vector<Eigen::Vector3d>& r, double r0) {
  const int n = static_cast<int>(r.size());
  Matrix k = Matrix::Zero(n, n);
  for (int a = 0; a < n; ++a)
    for (int b = 0; b < n; ++b)
      if (a != b) {
        const double d = (r[a] - r[b]).norm();
        k(a, b) = units::kHartreeToEv * std::erf(d / r0) / d;
      }
  const double e = 0.5 * (q.value().transpose() * k * q.value())(0, 0);
  return q.tape->record("coulomb_energy", Matrix::Constant(1, 1, e), {q}, [q, k](const Matrix& g) {
    accumulate(q, g(0, 0) * (k * q.value()));
  });
}

}  // namespace

// ---------------------------------------------------------------------------

struct Model::Ctx {
  ad::Tape& tape;
  std::vector<Var> bound;
  const NetworkInput* input = nullptr;
  const ForwardOptions* options = nullptr;
  ForwardResult* result = nullptr;
  Routing routing;
  Pairs pairs = std::make_shared<PairList>();
  CgPaths paths;
};

Model::Model(ModelConfig config, std::uint64_t seed, Init init)
    : config_(std::move(config)), rng_(seed), init_(init) {
  config_.validate();
  aux_spec_ = auxiliary_spec(static_cast<int>(config_.aux_exponents.size()));
  slots_ = basis_slots(BasisTable::minimal(), config_.elements);
  const auto& spec = config_.irreps;
  for (int l = 0; l < static_cast<int>(slots_.size()); ++l)
    if (l > IrrepsSpec::kMaxL || spec.count(l, 1) == 0)
      throw ConfigError(fmt::format("basis carries l={} but the irreps have no even l={} channels", l, l));

  for (int k = 0; k < QMMSet::kCount; ++k)
    embedding_[k] = make_block_linear(fmt::format("embed.{}", QMMSet::kNames[k]), aux_spec_, spec, false);

  const int kc = QMMSet::kCount * config_.n_conv_channels;
  const int ij = config_.n_conv_channels * config_.n_attention_heads;
  const int att_in = 2 * spec.channels() + config_.n_conv_channels + config_.n_radial_basis;
  for (int t = 0; t < config_.n_message_layers; ++t) {
    MessageLayer ml;
    const std::string base = fmt::format("message{}", t);
    for (int l = 0; l < static_cast<int>(slots_.size()); ++l) {
      const int s = static_cast<int>(slots_[l].size());
      ml.match.push_back(add_param(fmt::format("{}.match.l{}", base, l), spec.count(l, 1), kc * s,
                                   1.0 / std::sqrt(spec.count(l, 1))));
      ml.reverse.push_back(add_param(fmt::format("{}.reverse.l{}", base, l), s * ij, spec.count(l, 1),
                                     1.0 / std::sqrt(s * ij)));
    }
    ml.attention.layers.push_back(make_linear(base + ".attention.0", att_in, config_.attention_hidden, true, false));
    ml.attention.layers.push_back(make_linear(base + ".attention.1", config_.attention_hidden, config_.n_attention_heads, true, false));
    ml.interaction = make_interaction(base + ".interaction");
    layers_.push_back(std::move(ml));
  }
  for (int d = 0; d < config_.n_decode_layers; ++d) decoders_.push_back(make_interaction(fmt::format("decode{}", d)));

  const double head = 1.0 / std::sqrt(spec.channels());
  w_o_ = add_param("head.w_o", spec.channels(), 1, init_ == Init::random ? head : 0.0);
  w_a_ = add_param("head.w_a", spec.channels(), 1, head);
  if (config_.physical_terms == PhysicalTerms::electrostatic)
    w_q_ = add_param("head.w_q", spec.channels(), 1, init_ == Init::random ? head : 0.0);
  b_z_ = add_param("head.b_z", static_cast<int>(config_.elements.size()), 1, init_ == Init::random ? 0.5 : 0.0);
  b_q_ = add_param("head.b_q", kMaxCharge - kMinCharge + 1, 1, init_ == Init::random ? 0.5 : 0.0);
}

int Model::add_param(const std::string& name, int rows, int cols, double bound) {
  ad::Parameter p{name, Matrix::Zero(rows, cols), Matrix::Zero(rows, cols)};
  if (bound > 0.0) {
    std::uniform_real_distribution<double> u(-bound, bound);
    for (Eigen::Index i = 0; i < p.value.size(); ++i) p.value.data()[i] = u(rng_);
  }
  params_.push_back(std::move(p));
  return static_cast<int>(params_.size()) - 1;
}

Model::Linear Model::make_linear(const std::string& name, int in, int out, bool bias, bool zero) {
  const double bound = (zero && init_ == Init::standard) ? 0.0 : 1.0 / std::sqrt(in);
  Linear lin;
  lin.w = add_param(name + ".w", in, out, bound);
  if (bias) lin.b = add_param(name + ".b", 1, out, init_ == Init::random ? bound : 0.0);
  return lin;
}

Model::Mlp Model::make_mlp(const std::string& name, int in, int hidden, int out, bool zero_last) {
  Mlp m;
  for (int d = 0; d < config_.mlp_depth; ++d) {
    const int a = d == 0 ? in : hidden;
    const int b = d + 1 == config_.mlp_depth ? out : hidden;
    m.layers.push_back(make_linear(fmt::format("{}.{}", name, d), a, b, true, zero_last && d + 1 == config_.mlp_depth));
  }
  return m;
}

Model::BlockLinear Model::make_block_linear(const std::string& name, const IrrepsSpec& in, const IrrepsSpec& out,
                                            bool zero) {
  BlockLinear bl;
  for (int l = 0; l <= IrrepsSpec::kMaxL; ++l)
    for (int p : {1, -1}) {
      int& slot = bl.w[l][IrrepsSpec::parity_index(p)];
      slot = -1;
      if (in.count(l, p) == 0 || out.count(l, p) == 0) continue;
      const double bound = (zero && init_ == Init::standard) ? 0.0 : 1.0 / std::sqrt(in.count(l, p));
      slot = add_param(fmt::format("{}.l{}{}", name, l, p > 0 ? "e" : "o"), in.count(l, p), out.count(l, p), bound);
    }
  return bl;
}

Model::Interaction Model::make_interaction(const std::string& name) {
  const int c = config_.irreps.channels();
  Interaction it;
  it.mlp1 = make_mlp(name + ".mlp1", c, config_.mlp_hidden, c, false);
  it.mlp2 = make_mlp(name + ".mlp2", c, config_.mlp_hidden, c, true);
  it.w_in = make_block_linear(name + ".w_in", config_.irreps, config_.irreps, false);
  it.w_out = make_block_linear(name + ".w_out", config_.irreps, config_.irreps, false);
  it.beta1 = add_param(name + ".beta1", 1, c, 0.0);
  it.beta2 = add_param(name + ".beta2", 1, c, 0.0);
  std::uniform_real_distribution<double> u(0.5, 1.5);
  for (int b : {it.beta1, it.beta2})
    for (int i = 0; i < c; ++i) params_[b].value(0, i) = init_ == Init::random ? u(rng_) : 1.0;
  for (int* site : {&it.site1, &it.site2}) {
    *site = static_cast<int>(sites_.size());
    sites_.push_back({{Eigen::VectorXd::Zero(c), Eigen::VectorXd::Ones(c)}});
  }
  return it;
}

ad::Parameter& Model::parameter(std::string_view name) {
  for (auto& p : params_)
    if (p.name == name) return p;
  throw ConfigError(fmt::format("no parameter named '{}'", name));
}

const ad::Parameter& Model::parameter(std::string_view name) const {
  return const_cast<Model*>(this)->parameter(name);
}

std::size_t Model::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += static_cast<std::size_t>(p.size());
  return n;
}

void Model::zero_grad() {
  for (auto& p : params_) p.zero_grad();
}

void Model::update_statistics(const std::vector<std::vector<Eigen::MatrixXd>>& samples) {
  if (samples.empty()) return;
  const double mom = config_.evnorm_momentum;
  for (std::size_t s = 0; s < sites_.size(); ++s) {
    Eigen::Index rows = 0;
    for (const auto& sample : samples) rows += sample.at(s).rows();
    if (rows == 0) continue;
    Matrix all(rows, sites_[s].stats.mean.size());
    Eigen::Index r = 0;
    for (const auto& sample : samples) {
      all.middleRows(r, sample[s].rows()) = sample[s];
      r += sample[s].rows();
    }
    const Eigen::VectorXd mean = all.colwise().mean();
    const Eigen::VectorXd var = (all.rowwise() - mean.transpose()).array().square().colwise().mean();
    const Eigen::VectorXd std = var.cwiseSqrt().cwiseMax(config_.evnorm_epsilon);
    sites_[s].stats.mean = mom * sites_[s].stats.mean + (1.0 - mom) * mean;
    sites_[s].stats.scale = mom * sites_[s].stats.scale + (1.0 - mom) * std;
  }
}

void Model::set_known_charges(const std::vector<int>& charges) {
  known_charges_.fill(false);
  for (int q : charges) {
    if (q < kMinCharge || q > kMaxCharge) throw UnknownChargeState(fmt::format("charge {} outside {}..{}", q, kMinCharge, kMaxCharge));
    known_charges_[q - kMinCharge] = true;
  }
}

int Model::element_index(int z) const {
  const auto it = std::find(config_.elements.begin(), config_.elements.end(), z);
  if (it == config_.elements.end()) throw UnknownElement(fmt::format("element Z={} not supported by the model", z));
  return static_cast<int>(it - config_.elements.begin());
}

Var Model::bind(Ctx& ctx, int index) {
  if (ctx.bound[index].id < 0) ctx.bound[index] = ctx.tape.parameter(params_[index]);
  return ctx.bound[index];
}

Var Model::apply_mlp(Ctx& ctx, const Mlp& mlp, Var x, bool renorm_first) {
  for (std::size_t d = 0; d < mlp.layers.size(); ++d) {
    x = matmul(x, bind(ctx, mlp.layers[d].w));
    if (mlp.layers[d].b >= 0) x = add_row(x, bind(ctx, mlp.layers[d].b));
    if (d + 1 < mlp.layers.size()) {
      if (d == 0 && renorm_first) {
        x = config_.attention_renorm == AttentionRenorm::layer_norm ? ad::normalize_rows(x) : ad::normalize_cols(x);
      }
      x = ad::swish(x);
    }
  }
  return x;
}

Var Model::apply_block_linear(Ctx& ctx, const BlockLinear& bl, Var h, const IrrepsSpec& in, const IrrepsSpec& out) {
  std::vector<BlockPart> parts;
  for (int l = 0; l <= IrrepsSpec::kMaxL; ++l)
    for (int p : {1, -1}) {
      const int w = bl.w[l][IrrepsSpec::parity_index(p)];
      if (w < 0) continue;
      parts.push_back({l, p, matmul(extract_block(h, in, l, p), bind(ctx, w))});
    }
  return assemble_blocks(ctx.tape, out, static_cast<int>(h.rows()), parts);
}

Var Model::embed(Ctx& ctx, const NetworkInput& input) {
  Var h;
  for (int k = 0; k < QMMSet::kCount; ++k) {
    const auto& red = input.reduced[k];
    if (!(red.spec == aux_spec_) || red.n_atoms() != input.n_atoms())
      throw LayoutMismatch("reduced features do not match the model's auxiliary spec");
    Var part = apply_block_linear(ctx, embedding_[k], ctx.tape.constant(red.data), aux_spec_, config_.irreps);
    h = k == 0 ? part : add(h, part);
  }
  return h;
}

Var Model::interact(Ctx& ctx, const Interaction& it, Var h, Var g) {
  const auto& spec = config_.irreps;
  const double eps = config_.evnorm_epsilon;
  auto evnorm_split = [&](Var x, int beta, int site, Var& bar, Var& hat) {
    Var nx = content(x, spec, eps);
    if (ctx.options->collect_statistics) ctx.result->statistics[site] = nx.value();
    const auto& st = sites_[site].stats;
    bar = ad::mul_row(ad::add_row(nx, ctx.tape.constant(-st.mean.transpose())),
                      ctx.tape.constant(st.scale.cwiseInverse().transpose()));
    Var denom = ad::add_row(nx, ad::add_scalar(ad::reciprocal(bind(ctx, beta)), eps));
    hat = channel_scale(x, ad::reciprocal(denom), spec);
  };
  Var hbar, hhat;
  evnorm_split(h, it.beta1, it.site1, hbar, hhat);
  Var f = channel_scale(apply_block_linear(ctx, it.w_in, hhat, spec, spec), apply_mlp(ctx, it.mlp1, hbar), spec);
  Var q = add(g, cg_couple(f, g, spec, ctx.paths));
  Var qbar, qhat;
  evnorm_split(q, it.beta2, it.site2, qbar, qhat);
  return add(h, channel_scale(apply_block_linear(ctx, it.w_out, qhat, spec, spec), apply_mlp(ctx, it.mlp2, qbar), spec));
}

Var Model::message_step(Ctx& ctx, const MessageLayer& ml, Var h) {
  const auto& spec = config_.irreps;
  const auto& in = *ctx.input;
  const int n_atoms = in.n_atoms();
  const int ci = config_.n_conv_channels;
  std::vector<Var> ys;
  for (std::size_t l = 0; l < ml.match.size(); ++l)
    ys.push_back(matmul(extract_block(h, spec, static_cast<int>(l), 1), bind(ctx, ml.match[l])));
  Var r = route_to_ao(ctx.tape, ys, ctx.routing, QMMSet::kCount * ci);

  Var g;
  if (ctx.pairs->size() == 0) {
    g = ctx.tape.constant(Matrix::Zero(n_atoms, spec.components()));
    if (ctx.options->keep_states) ctx.result->aggregated.push_back(Matrix::Zero(in.qmm.n_ao(), ci * config_.n_attention_heads));
  } else {
    Var m = pair_messages(r, in.qmm, ctx.pairs, ci);
    Var pn = pair_norms(m, ctx.pairs, in.qmm.layout, config_.evnorm_epsilon);
    Var nh = content(h, spec, config_.evnorm_epsilon);
    Matrix rbf(ctx.pairs->size(), config_.n_radial_basis);
    for (int p = 0; p < ctx.pairs->size(); ++p)
      rbf.row(p) = radial_basis((in.coordinates[ctx.pairs->receiver[p]] - in.coordinates[ctx.pairs->sender[p]]).norm(),
                                config_.n_radial_basis, config_.rbf_cutoff);
    Var x = ad::concat_cols({ad::gather_rows(nh, ctx.pairs->receiver), ad::gather_rows(nh, ctx.pairs->sender), pn,
                             ctx.tape.constant(std::move(rbf))});
    Var alpha = ad::sigmoid(apply_mlp(ctx, ml.attention, x, config_.attention_renorm != AttentionRenorm::off));
    Var mt = aggregate(m, alpha, ctx.pairs, in.qmm.layout);
    if (ctx.options->keep_states) ctx.result->aggregated.push_back(mt.value());
    std::vector<BlockPart> parts;
    for (std::size_t l = 0; l < ml.reverse.size(); ++l)
      parts.push_back({static_cast<int>(l), 1,
                       matmul(route_from_ao(mt, ctx.routing, static_cast<int>(l)), bind(ctx, ml.reverse[l]))});
    g = assemble_blocks(ctx.tape, spec, n_atoms, parts);
  }
  return interact(ctx, ml.interaction, h, g);
}

Var Model::pool(Ctx& ctx, Var h) {
  const auto& in = *ctx.input;
  const int n = in.n_atoms();
  Var nh = content(h, config_.irreps, config_.evnorm_epsilon);
  std::vector<int> elem(n);
  for (int a = 0; a < n; ++a) elem[a] = element_index(in.atomic_numbers[a]);
  Var e_atom = add(matmul(nh, bind(ctx, w_o_)), ad::gather_rows(bind(ctx, b_z_), elem));
  if (config_.readout == Readout::fmo) {
    Var a = normalize_sum(ad::softplus(matmul(nh, bind(ctx, w_a_))));
    ctx.result->fmo_weights = a.value().col(0);
    return ad::sum(ad::mul(a, e_atom));
  }
  if (in.charge < kMinCharge || in.charge > kMaxCharge || !known_charges_[in.charge - kMinCharge])
    throw UnknownChargeState(fmt::format("no trained charge shift for Q={}", in.charge));
  Var e = add(ad::sum(e_atom), ad::gather_rows(bind(ctx, b_q_), {in.charge - kMinCharge}));
  if (config_.physical_terms == PhysicalTerms::electrostatic && w_q_ >= 0) {
    const Matrix center = Matrix::Identity(n, n) - Matrix::Constant(n, n, 1.0 / n);
    Var dq = matmul(ctx.tape.constant(center), matmul(nh, bind(ctx, w_q_)));
    ctx.result->charge_correction = dq.value().col(0);
    if (in.coordinates.size() == static_cast<std::size_t>(n) && in.mulliken.size() == n) {
      Var q = add(ctx.tape.constant(in.mulliken), dq);
      e = add(e, coulomb_energy(q, in.coordinates, config_.coulomb_damping));
    }
  }
  return e;
}

ForwardResult Model::forward(const NetworkInput& input, ad::Tape& tape, const ForwardOptions& options) {
  ForwardResult result;
  Ctx ctx{tape, std::vector<Var>(params_.size()), &input, &options, &result, nullptr, {}, {}};
  ctx.routing = std::make_shared<AoRouting>(input.qmm.layout, slots_);
  ctx.pairs = std::make_shared<PairList>(make_pairs(input.qmm.layout));
  ctx.paths = std::make_shared<std::vector<CgPath>>(cg_paths(config_.irreps, config_.odd_cg_pathways));
  if (options.collect_statistics) result.statistics.resize(sites_.size());
  auto keep = [&](Var h) {
    if (!options.keep_states) return;
    IrrepsFeature f(config_.irreps, input.n_atoms());
    f.data = h.value();
    result.states.push_back(std::move(f));
  };
  Var h = embed(ctx, input);
  keep(h);
  int next_decoder = 0;
  for (int t = 0; t < config_.n_message_layers; ++t) {
    h = message_step(ctx, layers_[t], h);
    keep(h);
    for (int d = 0; d < config_.decode_schedule[t]; ++d) {
      const auto& dec = decoders_[next_decoder++];
      h = interact(ctx, dec, h, h);
      keep(h);
    }
  }
  result.output = pool(ctx, h);
  return result;
}

double Model::predict(const NetworkInput& input) {
  ad::Tape tape;
  return forward(input, tape).output.scalar();
}

IrrepsFeature Model::diagonal_reduce(const NetworkInput& input) {
  ad::Tape tape;
  ForwardOptions options;
  ForwardResult result;
  Ctx ctx{tape, std::vector<Var>(params_.size()), &input, &options, &result, nullptr, {}, {}};
  IrrepsFeature out(config_.irreps, input.n_atoms());
  out.data = embed(ctx, input).value();
  return out;
}

Eigen::VectorXd Model::match(const IrrepsFeature& h, const AOLayout& layout, int layer, int matrix, int channel) {
  ad::Tape tape;
  ForwardOptions options;
  ForwardResult result;
  Ctx ctx{tape, std::vector<Var>(params_.size()), nullptr, &options, &result, nullptr, {}, {}};
  const auto routing = std::make_shared<AoRouting>(layout, slots_);
  std::vector<Var> ys;
  Var hv = tape.constant(h.data);
  for (std::size_t l = 0; l < layers_.at(layer).match.size(); ++l)
    ys.push_back(matmul(extract_block(hv, config_.irreps, static_cast<int>(l), 1), bind(ctx, layers_[layer].match[l])));
  Var r = route_to_ao(tape, ys, routing, QMMSet::kCount * config_.n_conv_channels);
  return r.value().col(matrix * config_.n_conv_channels + channel);
}

IrrepsFeature Model::reverse_match(const Eigen::MatrixXd& aggregated, const AOLayout& layout, int layer) {
  ad::Tape tape;
  ForwardOptions options;
  ForwardResult result;
  Ctx ctx{tape, std::vector<Var>(params_.size()), nullptr, &options, &result, nullptr, {}, {}};
  const auto routing = std::make_shared<AoRouting>(layout, slots_);
  Var mt = tape.constant(aggregated);
  std::vector<BlockPart> parts;
  for (std::size_t l = 0; l < layers_.at(layer).reverse.size(); ++l)
    parts.push_back({static_cast<int>(l), 1,
                     matmul(route_from_ao(mt, routing, static_cast<int>(l)), bind(ctx, layers_[layer].reverse[l]))});
  IrrepsFeature out(config_.irreps, layout.n_atoms());
  out.data = assemble_blocks(tape, config_.irreps, layout.n_atoms(), parts).value();
  return out;
}

IrrepsFeature Model::pointwise_interaction(const IrrepsFeature& h, const IrrepsFeature& g, int layer) {
  ad::Tape tape;
  ForwardOptions options;
  ForwardResult result;
  Ctx ctx{tape, std::vector<Var>(params_.size()), nullptr, &options, &result, nullptr, {}, {}};
  ctx.paths = std::make_shared<std::vector<CgPath>>(cg_paths(config_.irreps, config_.odd_cg_pathways));
  IrrepsFeature out(config_.irreps, h.n_atoms());
  out.data = interact(ctx, layers_.at(layer).interaction, tape.constant(h.data), tape.constant(g.data)).value();
  return out;
}

IrrepsFeature Model::decode_step(const IrrepsFeature& h, int step) {
  ad::Tape tape;
  ForwardOptions options;
  ForwardResult result;
  Ctx ctx{tape, std::vector<Var>(params_.size()), nullptr, &options, &result, nullptr, {}, {}};
  ctx.paths = std::make_shared<std::vector<CgPath>>(cg_paths(config_.irreps, config_.odd_cg_pathways));
  Var hv = tape.constant(h.data);
  IrrepsFeature out(config_.irreps, h.n_atoms());
  out.data = interact(ctx, decoders_.at(step), hv, hv).value();
  return out;
}

double Model::pool_energy(const IrrepsFeature& h, const std::vector<int>& z, int charge) {
  NetworkInput in;
  in.atomic_numbers = z;
  in.charge = charge;
  ad::Tape tape;
  ForwardOptions options;
  ForwardResult result;
  Ctx ctx{tape, std::vector<Var>(params_.size()), &in, &options, &result, nullptr, {}, {}};
  const Readout saved = config_.readout;
  config_.readout = Readout::energy;
  double e = 0.0;
  try {
    e = pool(ctx, tape.constant(h.data)).scalar();
  } catch (...) {
    config_.readout = saved;
    throw;
  }
  config_.readout = saved;
  return e;
}

double Model::pool_fmo(const IrrepsFeature& h, const std::vector<int>& z, Eigen::VectorXd* weights) {
  NetworkInput in;
  in.atomic_numbers = z;
  ad::Tape tape;
  ForwardOptions options;
  ForwardResult result;
  Ctx ctx{tape, std::vector<Var>(params_.size()), &in, &options, &result, nullptr, {}, {}};
  const Readout saved = config_.readout;
  config_.readout = Readout::fmo;
  const double e = pool(ctx, tape.constant(h.data)).scalar();
  config_.readout = saved;
  if (weights) *weights = result.fmo_weights;
  return e;
}

}  // namespace orbitall
