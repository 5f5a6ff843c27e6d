#include "orbitall/training.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <numbers>
#include <numeric>
#include <random>

#include <fmt/format.h>
#include <fmt/os.h>

#include "orbitall/errors.hpp"
#include "orbitall/units.hpp"

namespace orbitall {

std::string_view to_string(LabelMode v) { return v == LabelMode::delta ? "delta" : "direct"; }

std::string_view to_string(Target v) {
  switch (v) {
    case Target::total_energy: return "total_energy";
    case Target::fmo_alpha_homo: return "fmo_alpha_homo";
    case Target::fmo_alpha_lumo: return "fmo_alpha_lumo";
    case Target::fmo_beta_homo: return "fmo_beta_homo";
    case Target::fmo_beta_lumo: return "fmo_beta_lumo";
  }
  return "total_energy";
}

std::string_view to_string(Species v) {
  switch (v) {
    case Species::neutral: return "neutral";
    case Species::radical: return "radical";
    case Species::cation: return "cation";
    case Species::anion: return "anion";
  }
  return "neutral";
}

LabelMode parse_label_mode(std::string_view s) {
  if (s == "delta") return LabelMode::delta;
  if (s == "direct") return LabelMode::direct;
  throw ConfigError(fmt::format("unknown mode '{}'", s));
}

Target parse_target(std::string_view s) {
  for (Target t : {Target::total_energy, Target::fmo_alpha_homo, Target::fmo_alpha_lumo, Target::fmo_beta_homo,
                   Target::fmo_beta_lumo})
    if (to_string(t) == s) return t;
  throw ConfigError(fmt::format("unknown target '{}'", s));
}

Species parse_species(std::string_view s) {
  for (Species t : {Species::neutral, Species::radical, Species::cation, Species::anion})
    if (to_string(t) == s) return t;
  throw ParseError(fmt::format("unknown species tag '{}'", s));
}

Species species_of(int charge, int multiplicity) {
  if (charge > 0) return Species::cation;
  if (charge < 0) return Species::anion;
  return multiplicity > 1 ? Species::radical : Species::neutral;
}

std::optional<double> low_level_value(const LowLevelResult& r, Target target) {
  if (target == Target::total_energy) return r.energy * units::kHartreeToEv;
  const int k = static_cast<int>(target) - 1;
  if (!r.homo_lumo[k]) return std::nullopt;
  return *r.homo_lumo[k] * units::kHartreeToEv;
}

void TrainConfig::validate() const {
  if (!(max_lr > 0.0)) throw ConfigError("max_lr must be positive");
  if (warmup_epochs < 0 || cosine_epochs < 0 || epochs < 0) throw ConfigError("epoch counts must be non-negative");
  if (total_epochs() < 1) throw ConfigError("training needs at least one epoch");
  if (batch_size < 1) throw ConfigError("batch_size must be positive");
  if (!(smooth_l1_delta > 0.0)) throw ConfigError("smooth_l1_delta must be positive");
  if (patience < 1) throw ConfigError("patience must be positive");
}

std::vector<DeltaLabel> compute_delta_labels(const std::vector<double>& y_target,
                                             const std::vector<std::optional<double>>& y_low,
                                             const std::vector<Species>& species, LabelMode mode) {
  if (y_target.size() != y_low.size() || y_target.size() != species.size())
    throw InvariantViolation("label inputs differ in length");
  std::vector<DeltaLabel> out(y_target.size());
  for (std::size_t i = 0; i < y_target.size(); ++i) {
    out[i].y_target = y_target[i];
    out[i].species = species[i];
    if (mode == LabelMode::direct) {
      out[i].delta = y_target[i];
      continue;
    }
    if (!y_low[i]) throw MissingLowLevel(fmt::format("sample {} has no converged low-level value", i));
    out[i].y_low = *y_low[i];
    out[i].delta = y_target[i] - *y_low[i];
  }
  return out;
}

ElementBiasFit init_element_biases(const Eigen::MatrixXd& counts, const Eigen::VectorXd& labels) {
  if (counts.rows() != labels.size()) throw InvariantViolation("design and labels differ in length");
  if (counts.rows() < counts.cols())
    throw InsufficientData(fmt::format("{} samples for {} element biases", counts.rows(), counts.cols()));
  ElementBiasFit fit;
  Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(counts);
  if (qr.rank() == counts.cols()) {
    fit.bias = qr.solve(labels);
  } else {
    fit.singular = true;
    const Eigen::MatrixXd a = counts.transpose() * counts + 1e-8 * Eigen::MatrixXd::Identity(counts.cols(), counts.cols());
    fit.bias = a.ldlt().solve(counts.transpose() * labels);
  }
  return fit;
}

std::map<int, double> init_charge_shifts(const std::vector<int>& charges, const Eigen::VectorXd& residuals) {
  std::map<int, std::pair<double, int>> acc;
  for (std::size_t i = 0; i < charges.size(); ++i) {
    acc[charges[i]].first += residuals[static_cast<Eigen::Index>(i)];
    acc[charges[i]].second += 1;
  }
  std::map<int, double> out;
  for (const auto& [q, s] : acc) out[q] = s.first / s.second;
  return out;
}

double lr_schedule(int epoch, const TrainConfig& c) {
  if (epoch < 0) throw ConfigError("negative epoch");
  if (epoch < c.warmup_epochs) return c.max_lr * epoch / c.warmup_epochs;
  const int t = epoch - c.warmup_epochs;
  if (t >= c.cosine_epochs) return 0.0;
  return c.max_lr * 0.5 * (1.0 + std::cos(std::numbers::pi * t / c.cosine_epochs));
}

void adam_step(std::vector<ad::Parameter>& params, AdamState& state, double lr, double beta1, double beta2,
               double eps) {
  for (const auto& p : params)
    if (p.grad.size() != p.value.size() || !p.grad.allFinite())
      throw NonFiniteGradient(fmt::format("gradient of '{}' is not finite", p.name));
  if (state.m.size() != params.size()) {
    state.m.clear();
    state.v.clear();
    for (const auto& p : params) {
      state.m.push_back(ad::Matrix::Zero(p.value.rows(), p.value.cols()));
      state.v.push_back(ad::Matrix::Zero(p.value.rows(), p.value.cols()));
    }
    state.step = 0;
  }
  ++state.step;
  const double c1 = 1.0 - std::pow(beta1, state.step);
  const double c2 = 1.0 - std::pow(beta2, state.step);
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& p = params[i];
    state.m[i] = beta1 * state.m[i] + (1.0 - beta1) * p.grad;
    state.v[i] = beta2 * state.v[i] + (1.0 - beta2) * p.grad.cwiseAbs2();
    p.value.array() -= lr * (state.m[i].array() / c1) / ((state.v[i].array() / c2).sqrt() + eps);
  }
}

Metrics compute_metrics(const std::vector<double>& predictions, const std::vector<double>& labels,
                        const std::vector<Species>& species) {
  Metrics m;
  m.count = predictions.size();
  if (predictions.empty()) return m;
  std::array<double, 4> sum{};
  std::array<int, 4> n{};
  int within = 0;
  double total = 0.0;
  for (std::size_t i = 0; i < predictions.size(); ++i) {
    const double err = std::abs(predictions[i] - labels[i]) * 1000.0;
    total += err;
    if (err < units::kChemicalAccuracyMeV) ++within;
    const int s = static_cast<int>(species[i]);
    sum[s] += err;
    ++n[s];
  }
  m.mae_mev = total / predictions.size();
  m.within_chemical_accuracy = static_cast<double>(within) / predictions.size();
  for (int s = 0; s < 4; ++s)
    if (n[s]) m.mae_by_species[s] = sum[s] / n[s];
  return m;
}

EvalResult evaluate(Model& model, const std::vector<Sample>& samples) {
  EvalResult r;
  std::vector<double> labels;
  std::vector<Species> species;
  for (const auto& s : samples) {
    r.predictions.push_back(model.predict(s.input));
    labels.push_back(s.label.delta);
    species.push_back(s.label.species);
  }
  r.metrics = compute_metrics(r.predictions, labels, species);
  return r;
}

void initialize_output_biases(Model& model, const std::vector<Sample>& train, TrainResult* report) {
  const auto& elements = model.config().elements;
  Eigen::MatrixXd counts = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(train.size()), static_cast<Eigen::Index>(elements.size()));
  Eigen::VectorXd labels(static_cast<Eigen::Index>(train.size()));
  std::vector<int> charges;
  for (std::size_t i = 0; i < train.size(); ++i) {
    for (int z : train[i].input.atomic_numbers) counts(static_cast<Eigen::Index>(i), model.element_index(z)) += 1.0;
    labels[static_cast<Eigen::Index>(i)] = train[i].label.delta;
    charges.push_back(train[i].input.charge);
  }
  const bool fmo = model.config().readout == Readout::fmo;
  ElementBiasFit fit;
  if (fmo) {
    // Attention-weighted readout: start every element at the mean label.
    fit.bias = Eigen::VectorXd::Constant(static_cast<Eigen::Index>(elements.size()), labels.mean());
  } else {
    fit = init_element_biases(counts, labels);
  }
  model.parameter("head.b_z").value.col(0) = fit.bias;
  std::map<int, double> shifts;
  if (!fmo) {
    const Eigen::VectorXd residual = labels - counts * fit.bias;
    shifts = init_charge_shifts(charges, residual);
    auto& bq = model.parameter("head.b_q").value;
    bq.setZero();
    std::vector<int> known;
    for (const auto& [q, v] : shifts) {
      if (q < Model::kMinCharge || q > Model::kMaxCharge) throw UnknownChargeState(fmt::format("charge {} unsupported", q));
      bq(q - Model::kMinCharge, 0) = v;
      known.push_back(q);
    }
    model.set_known_charges(known);
  }
  if (report) {
    report->element_fit = fit;
    report->charge_shifts = shifts;
  }
}

TrainResult train(const TrainConfig& config, Model& model, const std::vector<Sample>& training,
                  const std::vector<Sample>& validation) {
  config.validate();
  if (training.empty()) throw InsufficientData("empty training set");
  TrainResult result;
  initialize_output_biases(model, training, &result);
  AdamState adam;
  std::mt19937_64 rng(config.seed);
  std::vector<std::size_t> order(training.size());
  std::iota(order.begin(), order.end(), 0);

  std::vector<ad::Matrix> best_params;
  std::vector<EvNormSite> best_sites;
  double best = std::numeric_limits<double>::infinity();
  int since_best = 0;
  const int horizon = config.warmup_epochs + config.cosine_epochs;
  const auto start = std::chrono::steady_clock::now();

  for (int epoch = 0; epoch < config.total_epochs(); ++epoch) {
    const double lr = lr_schedule(epoch, config);
    std::shuffle(order.begin(), order.end(), rng);
    double loss_sum = 0.0;
    for (std::size_t b0 = 0; b0 < order.size(); b0 += config.batch_size) {
      const std::size_t b1 = std::min(order.size(), b0 + static_cast<std::size_t>(config.batch_size));
      const double inv = 1.0 / static_cast<double>(b1 - b0);
      model.zero_grad();
      std::vector<std::vector<Eigen::MatrixXd>> stats;
      for (std::size_t k = b0; k < b1; ++k) {
        const auto& s = training[order[k]];
        ad::Tape tape;
        ForwardOptions opt;
        opt.collect_statistics = true;
        auto out = model.forward(s.input, tape, opt);
        auto loss = ad::smooth_l1(out.output, ad::Matrix::Constant(1, 1, s.label.delta), config.smooth_l1_delta);
        loss_sum += loss.scalar();
        tape.backward(ad::scale(loss, inv));
        stats.push_back(std::move(out.statistics));
      }
      adam_step(model.parameters(), adam, lr, config.adam_beta1, config.adam_beta2, config.adam_eps);
      model.update_statistics(stats);
    }
    EpochRecord rec;
    rec.epoch = epoch;
    rec.lr = lr;
    rec.train_loss = loss_sum / training.size();
    if (!validation.empty()) {
      const auto ev = evaluate(model, validation);
      rec.val_mae_mev = ev.metrics.mae_mev;
      rec.val_mae_by_species = ev.metrics.mae_by_species;
    }
    rec.wallclock_s = config.deterministic ? 0.0 : std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    result.history.push_back(rec);

    const double score = validation.empty() ? rec.train_loss : rec.val_mae_mev;
    if (score < best) {
      best = score;
      result.best_epoch = epoch;
      since_best = 0;
      best_params.clear();
      for (const auto& p : model.parameters()) best_params.push_back(p.value);
      best_sites = model.evnorm_sites();
    } else if (++since_best >= config.patience && epoch >= horizon) {
      break;
    }
    if (epoch >= config.warmup_epochs + 24) {
      // 5-epoch means absorb per-epoch noise.
      const auto& h = result.history;
      const std::size_t e = h.size() - 1;
      double now = 0.0, then = 0.0;
      for (std::size_t i = 0; i < 5; ++i) {
        now += h[e - i].train_loss;
        then += h[e - 20 - i].train_loss;
      }
      if (now > then * (1.0 + 1e-9)) result.descent_flagged = true;
    }
  }
  if (!best_params.empty()) {
    for (std::size_t i = 0; i < best_params.size(); ++i) model.parameters()[i].value = best_params[i];
    model.evnorm_sites() = best_sites;
  }
  result.best_val_mae_mev = validation.empty() ? 0.0 : evaluate(model, validation).metrics.mae_mev;
  return result;
}

void write_metrics_csv(const std::string& path, const std::vector<EpochRecord>& history) {
  auto out = fmt::output_file(path);
  out.print("epoch,lr,train_loss,val_mae_meV,val_mae_neutral,val_mae_radical,val_mae_cation,val_mae_anion,wallclock_s\n");
  auto opt = [](const std::optional<double>& v) { return v ? fmt::format("{:.17g}", *v) : std::string(); };
  for (const auto& r : history)
    out.print("{},{:.17g},{:.17g},{:.17g},{},{},{},{},{:.3f}\n", r.epoch, r.lr, r.train_loss, r.val_mae_mev,
              opt(r.val_mae_by_species[0]), opt(r.val_mae_by_species[1]), opt(r.val_mae_by_species[2]),
              opt(r.val_mae_by_species[3]), r.wallclock_s);
}

constexpr double kZeroGradient = 1e-10;

GradientCheckReport gradient_check(Model& model, const NetworkInput& input, double label, double step, int entries,
                                   double delta) {
  const ad::Matrix y = ad::Matrix::Constant(1, 1, label);
  auto loss_value = [&]() {
    ad::Tape tape;
    return ad::smooth_l1(model.forward(input, tape).output, y, delta).scalar();
  };
  model.zero_grad();
  {
    ad::Tape tape;
    tape.backward(ad::smooth_l1(model.forward(input, tape).output, y, delta));
  }
  GradientCheckReport report;
  for (auto& p : model.parameters()) {
    GradientCheckBlock blk;
    blk.name = p.name;
    const Eigen::Index n = p.value.size();
    std::vector<Eigen::Index> idx(static_cast<std::size_t>(n));
    std::iota(idx.begin(), idx.end(), 0);
    const int k = static_cast<int>(std::min<Eigen::Index>(entries, n));
    std::partial_sort(idx.begin(), idx.begin() + k, idx.end(), [&](Eigen::Index a, Eigen::Index b) {
      return std::abs(p.grad.data()[a]) > std::abs(p.grad.data()[b]);
    });
    double diff2 = 0.0, ref2 = 0.0, max_fd = 0.0;
    for (int e = 0; e < k; ++e) {
      double& w = p.value.data()[idx[e]];
      const double saved = w;
      auto at = [&](double offset) {
        w = saved + offset;
        return loss_value();
      };
      // Fourth-order central stencil at spacing `step`.
      const double fd = (8.0 * (at(step) - at(-step)) - (at(2.0 * step) - at(-2.0 * step))) / (12.0 * step);
      w = saved;
      const double bp = p.grad.data()[idx[e]];
      diff2 += (fd - bp) * (fd - bp);
      ref2 += bp * bp;
      max_fd = std::max(max_fd, std::abs(fd));
      blk.max_backprop = std::max(blk.max_backprop, std::abs(bp));
    }
    blk.entries = k;
    // Gradients that vanish on both sides to round-off count as exact zeros.
    const bool zero = blk.max_backprop < kZeroGradient && max_fd < kZeroGradient;
    blk.relative_error = zero ? 0.0 : std::sqrt(diff2 / std::max(ref2, kZeroGradient * kZeroGradient));
    report.max_relative_error = std::max(report.max_relative_error, blk.relative_error);
    report.blocks.push_back(std::move(blk));
  }
  return report;
}

}  // namespace orbitall
