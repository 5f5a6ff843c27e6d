#pragma once

#include <Eigen/Dense>

#include <array>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "orbitall/autodiff.hpp"
#include "orbitall/network.hpp"
#include "orbitall/scf.hpp"

namespace orbitall {

enum class LabelMode { delta, direct };
enum class Target { total_energy, fmo_alpha_homo, fmo_alpha_lumo, fmo_beta_homo, fmo_beta_lumo };
enum class Species { neutral, radical, cation, anion };

std::string_view to_string(LabelMode v);
std::string_view to_string(Target v);
std::string_view to_string(Species v);
LabelMode parse_label_mode(std::string_view s);
Target parse_target(std::string_view s);
Species parse_species(std::string_view s);

/// Neutral closed shell, neutral open shell, positive or negative charge.
Species species_of(int charge, int multiplicity);

/// Low-level value of `target` in eV; empty when the level is undefined.
std::optional<double> low_level_value(const LowLevelResult& r, Target target);

struct TrainConfig {
  double max_lr = 5e-4;
  int warmup_epochs = 100;
  int cosine_epochs = 200;
  int epochs = 0;  // 0 means warmup + cosine
  int batch_size = 64;
  double smooth_l1_delta = 1.0;  // eV
  std::uint64_t seed = 0;
  bool deterministic = true;
  Target target = Target::total_energy;
  LabelMode mode = LabelMode::delta;
  int patience = 150;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;

  int total_epochs() const { return epochs > 0 ? epochs : warmup_epochs + cosine_epochs; }
  void validate() const;
};

struct DeltaLabel {
  double y_target = 0.0;  // eV
  double y_low = 0.0;     // eV, 0 in direct mode
  double delta = 0.0;     // the training label
  Species species = Species::neutral;
};

/// delta = y_target - y_low in delta mode; y_target itself in direct mode.
/// Throws MissingLowLevel when delta mode lacks a low-level value.
std::vector<DeltaLabel> compute_delta_labels(const std::vector<double>& y_target,
                                             const std::vector<std::optional<double>>& y_low,
                                             const std::vector<Species>& species, LabelMode mode);

struct ElementBiasFit {
  Eigen::VectorXd bias;   // per element, in the order given
  bool singular = false;  // ridge fallback used
};
/// Least squares label ~ sum_Z count_Z b_Z; rank-deficient designs fall back
/// to a ridge fit (lambda 1e-8) and are flagged.
ElementBiasFit init_element_biases(const Eigen::MatrixXd& counts, const Eigen::VectorXd& labels);

/// Mean residual label - sum b_Z per charge present.
std::map<int, double> init_charge_shifts(const std::vector<int>& charges, const Eigen::VectorXd& residuals);

double lr_schedule(int epoch, const TrainConfig& config);

struct AdamState {
  std::vector<ad::Matrix> m, v;
  int step = 0;
};
/// One Adam update with bias correction. Throws NonFiniteGradient (naming
/// the tensor) before touching any parameter.
void adam_step(std::vector<ad::Parameter>& params, AdamState& state, double lr, double beta1 = 0.9,
               double beta2 = 0.999, double eps = 1e-8);

struct Sample {
  NetworkInput input;
  DeltaLabel label;
  std::string id;
};

struct Metrics {
  double mae_mev = 0.0;
  std::array<std::optional<double>, 4> mae_by_species;  // neutral, radical, cation, anion
  double within_chemical_accuracy = 0.0;  // fraction with |error| < 43.4 meV
  std::size_t count = 0;
};
/// MAE (meV) of predictions against labels, grouped by species.
Metrics compute_metrics(const std::vector<double>& predictions, const std::vector<double>& labels,
                        const std::vector<Species>& species);

struct EvalResult {
  std::vector<double> predictions;  // model outputs (delta in delta mode)
  Metrics metrics;
};
EvalResult evaluate(Model& model, const std::vector<Sample>& samples);

struct EpochRecord {
  int epoch = 0;
  double lr = 0.0;
  double train_loss = 0.0;
  double val_mae_mev = 0.0;
  std::array<std::optional<double>, 4> val_mae_by_species;
  double wallclock_s = 0.0;
};

struct TrainResult {
  std::vector<EpochRecord> history;
  int best_epoch = -1;
  double best_val_mae_mev = 0.0;
  bool descent_flagged = false;  // loss rose over a 20-epoch window after warm-up
  ElementBiasFit element_fit;
  std::map<int, double> charge_shifts;
};

/// Fits b_Z and b_Q on the training labels and writes them into the model.
void initialize_output_biases(Model& model, const std::vector<Sample>& train, TrainResult* report = nullptr);

/// Mini-batch training; the model ends holding the best-validation weights
/// (the last epoch when `validation` is empty).
TrainResult train(const TrainConfig& config, Model& model, const std::vector<Sample>& training,
                  const std::vector<Sample>& validation);

void write_metrics_csv(const std::string& path, const std::vector<EpochRecord>& history);

struct GradientCheckBlock {
  std::string name;
  double relative_error = 0.0;
  double max_backprop = 0.0;
  int entries = 0;
};
struct GradientCheckReport {
  std::vector<GradientCheckBlock> blocks;
  double max_relative_error = 0.0;
};
/// Central differences (five-point stencil, spacing `step`) against backprop
/// of the smooth-L1 loss for every parameter block, on the `entries` largest
/// backprop components of each.
GradientCheckReport gradient_check(Model& model, const NetworkInput& input, double label, double step = 1e-5,
                                   int entries = 3, double delta = 1.0);

}  // namespace orbitall
