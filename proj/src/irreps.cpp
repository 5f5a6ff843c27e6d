#include "orbitall/irreps.hpp"

#include <cmath>

#include <fmt/format.h>

#include "orbitall/errors.hpp"
#include "orbitall/so3.hpp"

namespace orbitall {

IrrepsSpec IrrepsSpec::standard() {
  IrrepsSpec s;
  const int even[] = {128, 48, 24, 12, 6};
  const int odd[] = {24, 8, 4, 2, 0};
  for (int l = 0; l <= kMaxL; ++l) s.counts[l] = {even[l], odd[l]};
  return s;
}

IrrepsSpec IrrepsSpec::scaled(int hidden_dim) {
  const IrrepsSpec base = standard();
  if (hidden_dim == base.channels()) return base;
  if (hidden_dim < 2 * (kMaxL + 1)) throw ConfigError(fmt::format("hidden_dim {} too small for l <= {}", hidden_dim, kMaxL));
  const double f = static_cast<double>(hidden_dim) / base.channels();
  IrrepsSpec s;
  for (int l = 0; l <= kMaxL; ++l)
    for (int p = 0; p < 2; ++p)
      if (base.counts[l][p]) s.counts[l][p] = std::max(1, static_cast<int>(std::lround(f * base.counts[l][p])));
  s.counts[0][0] += hidden_dim - s.channels();
  if (s.counts[0][0] < 1) throw ConfigError(fmt::format("hidden_dim {} cannot be distributed over the irreps", hidden_dim));
  return s;
}

int IrrepsSpec::channels() const {
  int n = 0;
  for (const auto& c : counts) n += c[0] + c[1];
  return n;
}

int IrrepsSpec::components() const {
  int n = 0;
  for (int l = 0; l <= kMaxL; ++l) n += (counts[l][0] + counts[l][1]) * (2 * l + 1);
  return n;
}

int IrrepsSpec::offset(int l, int p) const {
  int off = 0;
  for (int k = 0; k < l; ++k) off += (counts[k][0] + counts[k][1]) * (2 * k + 1);
  if (p < 0) off += counts[l][0] * (2 * l + 1);
  return off;
}

int IrrepsSpec::channel_offset(int l, int p) const {
  int off = 0;
  for (int k = 0; k < l; ++k) off += counts[k][0] + counts[k][1];
  if (p < 0) off += counts[l][0];
  return off;
}

Eigen::MatrixXd invariant_content(const IrrepsFeature& h, double eps) {
  const auto& s = h.spec;
  Eigen::MatrixXd out(h.n_atoms(), s.channels());
  for (int a = 0; a < h.n_atoms(); ++a)
    for (int l = 0; l <= IrrepsSpec::kMaxL; ++l)
      for (int p : {1, -1})
        for (int n = 0; n < s.count(l, p); ++n) {
          const double sq = h.data.row(a).segment(s.index(l, p, n, -l), 2 * l + 1).squaredNorm();
          out(a, s.channel_offset(l, p) + n) = std::sqrt(sq + eps * eps) - eps;
        }
  return out;
}

IrrepsFeature rotate_feature(const IrrepsFeature& h, const Eigen::Matrix3d& rotation) {
  const so3::RotationRep rep(rotation, IrrepsSpec::kMaxL);
  IrrepsFeature out = h;
  const auto& s = h.spec;
  for (int l = 1; l <= IrrepsSpec::kMaxL; ++l) {
    const Eigen::MatrixXd& d = rep.wigner(l);
    for (int p : {1, -1})
      for (int n = 0; n < s.count(l, p); ++n) {
        const int i = s.index(l, p, n, -l);
        for (int a = 0; a < h.n_atoms(); ++a)
          out.data.row(a).segment(i, 2 * l + 1) = (d * h.data.row(a).segment(i, 2 * l + 1).transpose()).transpose();
      }
  }
  return out;
}

EvNormResult evnorm(const IrrepsFeature& h, const EvNormStats& stats, const Eigen::VectorXd& beta, double eps) {
  if (!(eps > 0.0)) throw ConfigError("EvNorm epsilon must be positive");
  const auto& s = h.spec;
  const Eigen::MatrixXd norms = invariant_content(h, eps);
  EvNormResult out{Eigen::MatrixXd(norms.rows(), norms.cols()), IrrepsFeature(s, h.n_atoms())};
  for (int c = 0; c < norms.cols(); ++c)
    out.invariant.col(c) = (norms.col(c).array() - stats.mean[c]) / stats.scale[c];
  for (int l = 0; l <= IrrepsSpec::kMaxL; ++l)
    for (int p : {1, -1})
      for (int n = 0; n < s.count(l, p); ++n) {
        const int c = s.channel_offset(l, p) + n;
        const int i = s.index(l, p, n, -l);
        for (int a = 0; a < h.n_atoms(); ++a)
          out.direction.data.row(a).segment(i, 2 * l + 1) =
              h.data.row(a).segment(i, 2 * l + 1) / (norms(a, c) + 1.0 / beta[c] + eps);
      }
  return out;
}

}  // namespace orbitall
