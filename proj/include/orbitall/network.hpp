#pragma once

#include <Eigen/Dense>

#include <array>
#include <cstdint>
#include <random>
#include <string>
#include <string_view>
#include <vector>

#include "orbitall/autodiff.hpp"
#include "orbitall/basis.hpp"
#include "orbitall/integrals.hpp"
#include "orbitall/irreps.hpp"
#include "orbitall/molecule.hpp"
#include "orbitall/scf.hpp"

namespace orbitall {

enum class AttentionRenorm { off, node_norm, layer_norm };
enum class PhysicalTerms { off, electrostatic };
enum class Readout { energy, fmo };

std::string_view to_string(AttentionRenorm v);
std::string_view to_string(PhysicalTerms v);
std::string_view to_string(Readout v);
AttentionRenorm parse_attention_renorm(std::string_view s);
PhysicalTerms parse_physical_terms(std::string_view s);
Readout parse_readout(std::string_view s);

struct ModelConfig {
  int hidden_dim = 256;
  IrrepsSpec irreps = IrrepsSpec::standard();
  int n_message_layers = 4;
  int n_decode_layers = 4;
  std::vector<int> decode_schedule = {0, 0, 0, 4};
  int n_conv_channels = 8;
  int n_attention_heads = 8;
  int mlp_depth = 2;
  int mlp_hidden = 128;
  int attention_hidden = 256;
  std::string activation = "swish";
  int n_radial_basis = 16;
  double rbf_cutoff = 10.0;  // bohr
  double evnorm_epsilon = 0.1;
  double evnorm_momentum = 0.99;
  AttentionRenorm attention_renorm = AttentionRenorm::off;
  PhysicalTerms physical_terms = PhysicalTerms::off;
  Readout readout = Readout::energy;
  double coulomb_damping = 1.0;  // r0 of erf(r/r0)/r, bohr
  std::vector<double> aux_exponents = {0.5, 2.0};
  std::vector<int> elements = {1, 6, 7, 8};
  // Off only for the parity-conservation check.
  bool odd_cg_pathways = true;

  /// Throws ConfigError on inconsistent settings.
  void validate() const;
  /// Defaults with the irreps, MLP and attention widths scaled to hidden_dim.
  static ModelConfig scaled(int hidden_dim);
};

/// Low-level features of one molecule as consumed by the network.
struct NetworkInput {
  QMMSet qmm;
  std::vector<int> atomic_numbers;
  std::vector<Eigen::Vector3d> coordinates;  // bohr
  int charge = 0;
  int multiplicity = 1;
  /// Raw diagonal reductions of the six matrices (auxiliary irreps spec).
  std::array<IrrepsFeature, QMMSet::kCount> reduced;
  /// Mulliken charges of the low-level density.
  Eigen::VectorXd mulliken;

  int n_atoms() const { return static_cast<int>(atomic_numbers.size()); }
};

/// Irreps spec of the raw reductions: one channel per auxiliary exponent for
/// l = 0..2, even parity only.
IrrepsSpec auxiliary_spec(int n_exponents);

/// h_{A,nlm} = sum_{mu nu in A} O_{mu nu} Qtilde_{mu nu, nlm}; p = -1 stays 0.
/// Throws LayoutMismatch when Qtilde does not match O and the layout.
IrrepsFeature reduce_diagonal(const Eigen::MatrixXd& o, const std::vector<OnSiteOverlap>& qtilde,
                              const AOLayout& layout, const IrrepsSpec& aux_spec);

NetworkInput prepare_input(const MolecularSystem& system, const QMMSet& qmm,
                           const std::vector<double>& aux_exponents = {0.5, 2.0});

/// Per ordered atom pair (sender A, receiver B): sum_mu rho_mu O_{mu nu},
/// nu over the receiver's AOs.
struct PairMessage {
  int sender = 0;
  int receiver = 0;
  Eigen::VectorXd values;
};
std::vector<PairMessage> block_message(const Eigen::MatrixXd& o, const Eigen::VectorXd& rho, const AOLayout& layout);

/// Routing between per-(atom, l, m) rows and AO indices by principal-number
/// slot. `slots[l]` lists the principal numbers n carried for angular
/// momentum l, in slot order.
class AoRouting {
 public:
  AoRouting(const AOLayout& layout, const std::vector<std::vector<int>>& slots);
  int n_slots(int l) const { return static_cast<int>(slots_[l].size()); }
  int lmax() const { return static_cast<int>(slots_.size()) - 1; }
  /// y_l: (N(2l+1)) x (channels * S_l), column = channel * S_l + slot.
  /// Returns n_ao x channels.
  Eigen::MatrixXd to_ao(const std::vector<Eigen::MatrixXd>& y, int channels) const;
  /// Scatter for one l: (N(2l+1)) x (S_l * channels), column = slot * channels + c.
  Eigen::MatrixXd from_ao(const Eigen::MatrixXd& m, int l) const;

  struct Entry {
    int ao, row, slot;
  };
  const std::vector<Entry>& entries(int l) const { return entries_[l]; }
  int n_atoms() const { return n_atoms_; }
  int n_ao() const { return n_ao_; }

 private:
  std::vector<std::vector<int>> slots_;
  std::vector<std::vector<Entry>> entries_;
  int n_atoms_ = 0;
  int n_ao_ = 0;
};

/// Principal-number slots per l covering every element of `table`.
std::vector<std::vector<int>> basis_slots(const BasisTable& table, const std::vector<int>& elements);

struct EvNormSite {
  EvNormStats stats;
};

struct ForwardOptions {
  bool keep_states = false;       // node states after every layer
  bool collect_statistics = false;  // EvNorm content samples
};

struct ForwardResult {
  ad::Var output;  // 1x1, eV
  std::vector<IrrepsFeature> states;
  std::vector<Eigen::MatrixXd> aggregated;  // attention-aggregated messages per layer
  std::vector<Eigen::MatrixXd> statistics;  // per EvNorm site, n_atoms x channels
  Eigen::VectorXd fmo_weights;
  Eigen::VectorXd charge_correction;  // electrostatic ablation, per atom
};

enum class Init { standard, random };

class Model {
 public:
  explicit Model(ModelConfig config, std::uint64_t seed = 0, Init init = Init::standard);

  const ModelConfig& config() const { return config_; }
  std::vector<ad::Parameter>& parameters() { return params_; }
  const std::vector<ad::Parameter>& parameters() const { return params_; }
  ad::Parameter& parameter(std::string_view name);
  const ad::Parameter& parameter(std::string_view name) const;
  std::size_t parameter_count() const;
  void zero_grad();

  std::vector<EvNormSite>& evnorm_sites() { return sites_; }
  const std::vector<EvNormSite>& evnorm_sites() const { return sites_; }
  /// Running-average update from samples collected by forward().
  void update_statistics(const std::vector<std::vector<Eigen::MatrixXd>>& samples);

  /// Charge states with a trained shift; all of -2..2 until restricted.
  const std::array<bool, 5>& known_charges() const { return known_charges_; }
  void set_known_charges(const std::vector<int>& charges);
  static constexpr int kMinCharge = -2;
  static constexpr int kMaxCharge = 2;
  int element_index(int z) const;

  ForwardResult forward(const NetworkInput& input, ad::Tape& tape, const ForwardOptions& options = {});
  double predict(const NetworkInput& input);

  // Stand-alone stages on plain data, sharing the forward's code path.
  IrrepsFeature diagonal_reduce(const NetworkInput& input);
  /// rho for message layer t, matrix k, convolution channel i.
  Eigen::VectorXd match(const IrrepsFeature& h, const AOLayout& layout, int layer, int matrix, int channel);
  /// W_l^dagger applied to the scattered messages (n_ao x I*J columns).
  IrrepsFeature reverse_match(const Eigen::MatrixXd& aggregated, const AOLayout& layout, int layer);
  IrrepsFeature pointwise_interaction(const IrrepsFeature& h, const IrrepsFeature& g, int layer);
  IrrepsFeature decode_step(const IrrepsFeature& h, int step);
  double pool_energy(const IrrepsFeature& h, const std::vector<int>& z, int charge);
  double pool_fmo(const IrrepsFeature& h, const std::vector<int>& z, Eigen::VectorXd* weights = nullptr);

 private:
  struct Linear {
    int w = -1, b = -1;
  };
  struct Mlp {
    std::vector<Linear> layers;
  };
  struct BlockLinear {
    std::array<std::array<int, 2>, IrrepsSpec::kMaxL + 1> w{};
  };
  struct Interaction {
    Mlp mlp1, mlp2;
    BlockLinear w_in, w_out;
    int beta1 = -1, beta2 = -1;
    int site1 = -1, site2 = -1;
  };
  struct MessageLayer {
    std::vector<int> match;    // per AO l
    std::vector<int> reverse;  // per AO l
    Mlp attention;
    Interaction interaction;
  };

  int add_param(const std::string& name, int rows, int cols, double bound);
  Linear make_linear(const std::string& name, int in, int out, bool bias, bool zero);
  Mlp make_mlp(const std::string& name, int in, int hidden, int out, bool zero_last);
  BlockLinear make_block_linear(const std::string& name, const IrrepsSpec& in, const IrrepsSpec& out, bool zero);
  Interaction make_interaction(const std::string& name);

  struct Ctx;
  ad::Var bind(Ctx& ctx, int index);
  ad::Var apply_mlp(Ctx& ctx, const Mlp& mlp, ad::Var x, bool renorm_first = false);
  ad::Var apply_block_linear(Ctx& ctx, const BlockLinear& bl, ad::Var h, const IrrepsSpec& in, const IrrepsSpec& out);
  ad::Var embed(Ctx& ctx, const NetworkInput& input);
  ad::Var interact(Ctx& ctx, const Interaction& it, ad::Var h, ad::Var g);
  ad::Var message_step(Ctx& ctx, const MessageLayer& ml, ad::Var h);
  ad::Var pool(Ctx& ctx, ad::Var h);

  ModelConfig config_;
  IrrepsSpec aux_spec_;
  std::vector<std::vector<int>> slots_;
  std::vector<ad::Parameter> params_;
  std::vector<EvNormSite> sites_;
  std::array<BlockLinear, QMMSet::kCount> embedding_;
  std::vector<MessageLayer> layers_;
  std::vector<Interaction> decoders_;
  int w_o_ = -1, w_a_ = -1, w_q_ = -1, b_z_ = -1, b_q_ = -1;
  std::array<bool, 5> known_charges_{true, true, true, true, true};
  std::mt19937_64 rng_;
  Init init_;
};

/// Gaussian radial basis of a distance, centers spread over [0, cutoff].
Eigen::RowVectorXd radial_basis(double r, int n, double cutoff);

}  // namespace orbitall
