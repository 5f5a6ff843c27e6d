#pragma once

#include <Eigen/Dense>

#include <array>

namespace orbitall {

/// Channel counts N(l, p) for l = 0..kMaxL and parity p = +1 / -1.
struct IrrepsSpec {
  static constexpr int kMaxL = 4;

  // counts[l][0] for p = +1, counts[l][1] for p = -1
  std::array<std::array<int, 2>, kMaxL + 1> counts{};

  /// 128/48/24/12/6 even and 24/8/4/2/0 odd channels (256 in total).
  static IrrepsSpec standard();
  /// standard() rescaled to `hidden_dim` channels; nonzero entries stay >= 1
  /// and the scalar even block absorbs the rounding.
  static IrrepsSpec scaled(int hidden_dim);

  static int parity_index(int p) { return p > 0 ? 0 : 1; }
  int count(int l, int p) const { return counts[l][parity_index(p)]; }
  /// Total channels (the hidden dimension).
  int channels() const;
  /// Total stored components, sum N(l,p)(2l+1).
  int components() const;
  /// Storage offset of the (l, p) block; blocks ordered l-major, p = +1 first.
  int offset(int l, int p) const;
  /// Channel offset of the (l, p) block in invariant vectors.
  int channel_offset(int l, int p) const;
  /// Position of component (l, p, n, m) in per-atom storage.
  int index(int l, int p, int n, int m) const { return offset(l, p) + n * (2 * l + 1) + (m + l); }

  bool operator==(const IrrepsSpec&) const = default;
};

/// Per-atom irreps features, one row per atom.
struct IrrepsFeature {
  IrrepsSpec spec;
  Eigen::MatrixXd data;  // n_atoms x spec.components()

  IrrepsFeature() = default;
  IrrepsFeature(const IrrepsSpec& s, int n_atoms) : spec(s), data(Eigen::MatrixXd::Zero(n_atoms, s.components())) {}

  int n_atoms() const { return static_cast<int>(data.rows()); }
  double& at(int atom, int l, int p, int n, int m) { return data(atom, spec.index(l, p, n, m)); }
  double at(int atom, int l, int p, int n, int m) const { return data(atom, spec.index(l, p, n, m)); }
};

/// Smooth invariant content sqrt(sum_m h^2 + eps^2) - eps of every
/// (atom, channel); n_atoms x channels.
Eigen::MatrixXd invariant_content(const IrrepsFeature& h, double eps);

/// Each (n, l, p) segment multiplied by the real Wigner block D^l(R).
IrrepsFeature rotate_feature(const IrrepsFeature& h, const Eigen::Matrix3d& rotation);

struct EvNormStats {
  Eigen::VectorXd mean;   // per channel
  Eigen::VectorXd scale;  // per channel, > 0
};

struct EvNormResult {
  Eigen::MatrixXd invariant;  // n_atoms x channels, (||h|| - mean) / scale
  IrrepsFeature direction;    // h / (||h|| + 1/beta + eps)
};

/// Equivariant normalization: splits h into a rotation-invariant part and a
/// normalized direction. `beta` holds one positive value per channel.
EvNormResult evnorm(const IrrepsFeature& h, const EvNormStats& stats, const Eigen::VectorXd& beta, double eps = 0.1);

}  // namespace orbitall
