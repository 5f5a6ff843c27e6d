// orbitall: featurize -> split -> train -> predict -> eval, plus verify.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <thread>

#include <CLI11.hpp>
#include <fmt/format.h>
#include <fmt/os.h>

#include "orbitall/dataio.hpp"
#include "orbitall/errors.hpp"
#include "orbitall/so3.hpp"
#include "orbitall/units.hpp"
#include "orbitall/verify.hpp"

using namespace orbitall;
namespace fs = std::filesystem;

namespace {

enum Exit { kOk = 0, kFailure = 1, kParse = 2, kScf = 3, kVerify = 4, kChecksum = 5 };

constexpr const char* kSidecar = "lowlevel.csv";
constexpr std::array<const char*, 5> kLabelKeys = {"energy_ev", "fmo_alpha_homo", "fmo_alpha_lumo", "fmo_beta_homo",
                                                   "fmo_beta_lumo"};

int exit_code(const Error& e) {
  const auto& k = e.kind();
  if (k == "ParseError" || k == "ConfigError") return kParse;
  if (k == "ScfNotConverged") return kScf;
  if (k == "ChecksumMismatch") return kChecksum;
  return kFailure;
}

std::string label_key(Target t) { return t == Target::total_energy ? "energy_ev" : std::string(to_string(t)); }

// ---------------------------------------------------------------------------
// featurize

struct FeaturizeRow {
  std::string id;
  std::string status = "ok";
  std::array<std::optional<double>, 5> values;  // eV, in kLabelKeys order
  std::string message;
  std::optional<ManifestRecord> record;
};

FeaturizeRow featurize_one(const fs::path& xyz, const fs::path& out_dir, const fs::path& manifest_dir) {
  FeaturizeRow row;
  row.id = xyz.stem().string();
  try {
    const auto rec = read_xyz(xyz);
    const auto scf = run_scf(rec.system);
    write_qmm(out_dir / (row.id + ".qmm"), rec.system, scf.qmm);
    row.values[0] = scf.result.energy * units::kHartreeToEv;
    for (int k = 0; k < 4; ++k)
      if (scf.result.homo_lumo[k]) row.values[k + 1] = *scf.result.homo_lumo[k] * units::kHartreeToEv;
    ManifestRecord m;
    m.id = row.id;
    m.geometry = fs::relative(fs::absolute(xyz), fs::absolute(manifest_dir)).generic_string();
    m.charge = rec.system.charge;
    m.multiplicity = rec.system.multiplicity;
    m.field = rec.system.field;
    m.labels = rec.labels;
    m.species = species_of(m.charge, m.multiplicity);
    if (auto it = rec.extra.find("parent"); it != rec.extra.end()) m.parent = it->second;
    row.record = std::move(m);
  } catch (const ScfNotConverged& e) {
    row.status = "scf_not_converged";
    row.message = e.what();
  } catch (const Error& e) {
    row.status = e.kind() == "ParseError" || e.kind() == "InvariantViolation" ? "parse_error" : "error";
    row.message = e.what();
  }
  return row;
}

int cmd_featurize(const fs::path& in_dir, const fs::path& out_dir, int workers) {
  if (!fs::is_directory(in_dir)) throw ParseError(fmt::format("{} is not a directory", in_dir.string()));
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(in_dir))
    if (e.is_regular_file() && e.path().extension() == ".xyz") files.push_back(e.path());
  std::sort(files.begin(), files.end());
  if (files.empty()) {
    std::cerr << fmt::format("warning: no .xyz files in {}; nothing to do\n", in_dir.string());
    return kOk;
  }
  fs::create_directories(out_dir);

  std::vector<FeaturizeRow> rows(files.size());
  std::atomic<std::size_t> next{0};
  auto work = [&] {
    for (std::size_t i; (i = next++) < files.size();) rows[i] = featurize_one(files[i], out_dir, out_dir);
  };
  std::vector<std::thread> pool;
  for (int w = 1; w < std::max(1, workers); ++w) pool.emplace_back(work);
  work();
  for (auto& t : pool) t.join();

  auto csv = fmt::output_file((out_dir / kSidecar).string());
  csv.print("id,status,{}\n", fmt::join(kLabelKeys, ","));
  Manifest manifest;
  int scf_failures = 0, parse_failures = 0;
  for (const auto& r : rows) {
    std::vector<std::string> cells;
    for (const auto& v : r.values) cells.push_back(v ? fmt::format("{:.17g}", *v) : "");
    csv.print("{},{},{}\n", r.id, r.status, fmt::join(cells, ","));
    if (r.record) manifest.records.push_back(*r.record);
    if (r.status == "ok") continue;
    (r.status == "scf_not_converged" ? scf_failures : parse_failures)++;
    std::cerr << fmt::format("{}: {}\n", r.id, r.message);
  }
  csv.close();
  write_manifest(out_dir / "manifest.json", manifest);
  std::cout << fmt::format("featurized {} of {} records into {}\n", manifest.records.size(), rows.size(),
                           out_dir.string());
  if (scf_failures) return kScf;
  if (parse_failures) return kParse;
  return kOk;
}

// ---------------------------------------------------------------------------
// Samples from a manifest plus a feature directory

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::stringstream ss(line);
  std::string cell;
  while (std::getline(ss, cell, ',')) out.push_back(cell);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

// id -> label key -> low-level value (eV)
std::map<std::string, std::map<std::string, double>> read_sidecar(const fs::path& dir) {
  std::ifstream in(dir / kSidecar);
  if (!in) throw ParseError(fmt::format("missing {}", (dir / kSidecar).string()));
  std::string line;
  std::getline(in, line);
  const auto header = split_csv(line);
  std::map<std::string, std::map<std::string, double>> out;
  int ln = 1;
  while (std::getline(in, line)) {
    ++ln;
    if (line.empty()) continue;
    const auto cells = split_csv(line);
    if (cells.size() != header.size()) throw ParseError(fmt::format("{} line {}: wrong column count", kSidecar, ln));
    auto& m = out[cells[0]];
    for (std::size_t c = 2; c < cells.size(); ++c)
      if (!cells[c].empty()) m[header[c]] = std::stod(cells[c]);
  }
  return out;
}

struct Dataset {
  std::vector<Sample> samples;
  std::vector<std::string> ids;
};

Dataset load_samples(const Manifest& manifest, const fs::path& features, const std::vector<std::string>& splits,
                     Target target, LabelMode mode, const std::vector<double>& aux) {
  const auto low = read_sidecar(features);
  const std::string key = label_key(target);
  std::vector<double> y;
  std::vector<std::optional<double>> y_low;
  std::vector<Species> species;
  Dataset d;
  for (const auto& r : manifest.records) {
    if (std::find(splits.begin(), splits.end(), r.split) == splits.end()) continue;
    const auto label = r.labels.find(key);
    if (label == r.labels.end()) throw ParseError(fmt::format("record {} has no '{}' label", r.id, key));
    const auto c = read_qmm(features / (r.id + ".qmm"));
    y.push_back(label->second);
    std::optional<double> lo;
    if (auto it = low.find(r.id); it != low.end())
      if (auto v = it->second.find(key); v != it->second.end()) lo = v->second;
    y_low.push_back(lo);
    species.push_back(r.species);
    d.samples.push_back({prepare_input(c.system, c.qmm, aux), {}, r.id});
    d.ids.push_back(r.id);
  }
  const auto labels = compute_delta_labels(y, y_low, species, mode);
  for (std::size_t i = 0; i < labels.size(); ++i) d.samples[i].label = labels[i];
  return d;
}

// ---------------------------------------------------------------------------

int cmd_split(const fs::path& in, const fs::path& out, const std::vector<double>& f, std::uint64_t seed, bool balance) {
  if (f.size() != 3) throw ConfigError("--fractions needs three values");
  const auto m = split_dataset(read_manifest(in), {f[0], f[1], f[2]}, seed, balance);
  write_manifest(out, m);
  std::map<std::string, int> counts;
  for (const auto& r : m.records) ++counts[r.split.empty() ? "unassigned" : r.split];
  for (const auto& [s, n] : counts) std::cout << fmt::format("{:<10} {}\n", s, n);
  return kOk;
}

int cmd_train(const fs::path& manifest_path, const fs::path& features, const fs::path& config_path,
              const fs::path& out, const fs::path& metrics, std::optional<std::uint64_t> seed, bool deterministic) {
  RunConfig rc = read_config(config_path);
  if (seed) rc.train.seed = *seed;
  if (deterministic) rc.train.deterministic = true;
  const auto manifest = read_manifest(manifest_path);
  const auto& aux = rc.model.aux_exponents;
  const auto training = load_samples(manifest, features, {"train"}, rc.train.target, rc.train.mode, aux);
  const auto validation = load_samples(manifest, features, {"val"}, rc.train.target, rc.train.mode, aux);
  Model model(rc.model, rc.train.seed);
  const auto result = train(rc.train, model, training.samples, validation.samples);
  save_checkpoint(out, model,
                  {engine_version(), BasisTable::minimal().checksum(), static_cast<int>(result.history.size()),
                   rc.train.mode, rc.train.target});
  write_metrics_csv(metrics.empty() ? (out / "metrics.csv").string() : metrics.string(), result.history);
  std::cout << fmt::format("trained {} epochs on {} samples; best epoch {}, validation MAE {:.3f} meV\n",
                           result.history.size(), training.samples.size(), result.best_epoch, result.best_val_mae_mev);
  if (result.descent_flagged) std::cerr << "warning: training loss rose over a 20-epoch window\n";
  return kOk;
}

LoadedCheckpoint open_checkpoint(const fs::path& dir) {
  auto ckpt = load_checkpoint(dir);
  const auto engine = BasisTable::minimal().checksum();
  if (ckpt.info.basis_checksum != engine)
    throw ChecksumMismatch(fmt::format("checkpoint basis checksum {} does not match the feature basis {}",
                                       ckpt.info.basis_checksum, engine));
  return ckpt;
}

int cmd_predict(const fs::path& ckpt_dir, const fs::path& features, const fs::path& manifest_path,
                const fs::path& out) {
  auto ckpt = open_checkpoint(ckpt_dir);
  std::vector<std::string> ids;
  if (!manifest_path.empty()) {
    for (const auto& r : read_manifest(manifest_path).records) ids.push_back(r.id);
  } else {
    for (const auto& e : fs::directory_iterator(features))
      if (e.path().extension() == ".qmm") ids.push_back(e.path().stem().string());
    std::sort(ids.begin(), ids.end());
  }
  std::map<std::string, std::map<std::string, double>> low;
  if (fs::exists(features / kSidecar)) low = read_sidecar(features);
  const std::string key = label_key(ckpt.info.target);
  const bool delta = ckpt.info.mode == LabelMode::delta;
  auto csv = fmt::output_file(out.string());
  csv.print("id,charge,multiplicity,predicted_delta_ev,low_level_ev,predicted_total_ev\n");
  for (const auto& id : ids) {
    const auto c = read_qmm(features / (id + ".qmm"));
    const double p = ckpt.model.predict(prepare_input(c.system, c.qmm, ckpt.model.config().aux_exponents));
    std::optional<double> lo;
    if (auto it = low.find(id); it != low.end())
      if (auto v = it->second.find(key); v != it->second.end()) lo = v->second;
    if (!delta) {
      csv.print("{},{},{},,,{:.17g}\n", id, c.system.charge, c.system.multiplicity, p);
    } else if (lo) {
      csv.print("{},{},{},{:.17g},{:.17g},{:.17g}\n", id, c.system.charge, c.system.multiplicity, p, *lo, *lo + p);
    } else {
      csv.print("{},{},{},{:.17g},,\n", id, c.system.charge, c.system.multiplicity, p);
    }
  }
  std::cout << fmt::format("wrote {} predictions to {}\n", ids.size(), out.string());
  return kOk;
}

int cmd_eval(const fs::path& ckpt_dir, const fs::path& features, const fs::path& manifest_path,
             const std::string& split, const fs::path& out) {
  auto ckpt = open_checkpoint(ckpt_dir);
  const auto data = load_samples(read_manifest(manifest_path), features, {split}, ckpt.info.target, ckpt.info.mode,
                                 ckpt.model.config().aux_exponents);
  if (data.samples.empty()) throw InsufficientData(fmt::format("no records in split '{}'", split));
  const auto ev = evaluate(ckpt.model, data.samples);
  std::array<int, 4> counts{};
  for (const auto& s : data.samples) ++counts[static_cast<int>(s.label.species)];
  std::ostringstream table;
  table << "group,count,mae_meV\n" << fmt::format("all,{},{:.6f}\n", data.samples.size(), ev.metrics.mae_mev);
  for (int s = 0; s < 4; ++s)
    if (ev.metrics.mae_by_species[s])
      table << fmt::format("{},{},{:.6f}\n", to_string(static_cast<Species>(s)), counts[s], *ev.metrics.mae_by_species[s]);
  std::cout << table.str()
            << fmt::format("within chemical accuracy ({} meV): {:.4f}\n", units::kChemicalAccuracyMeV,
                           ev.metrics.within_chemical_accuracy);
  if (!out.empty()) std::ofstream(out) << table.str();
  return kOk;
}

int cmd_verify(const VerifyOptions& opts) {
  const auto checks = run_verification(opts, &std::cout);
  const bool ok = std::all_of(checks.begin(), checks.end(), [](const auto& c) { return c.passed(); });
  std::cout << (ok ? "verify: all checks passed\n" : "verify: violations found\n");
  return ok ? kOk : kVerify;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"orbitall: low-level QM matrices and an equivariant orbital network"};
  app.require_subcommand(0, 1);
  app.set_version_flag("--version", engine_version());
  int dump_cg = -1;
  app.add_option("--dump-cg", dump_cg, "Print the real Clebsch-Gordan table up to this l and exit");

  auto* feat = app.add_subcommand("featurize", "Run the SCF on every .xyz file and write QMM containers");
  fs::path feat_in, feat_out;
  int workers = 1;
  feat->add_option("input", feat_in, "Directory of extended-XYZ files")->required();
  feat->add_option("output", feat_out, "Output directory")->required();
  feat->add_option("--workers,-j", workers, "Parallel workers")->check(CLI::PositiveNumber);

  auto* split = app.add_subcommand("split", "Assign train/val/test splits");
  fs::path split_in, split_out;
  std::vector<double> fractions{0.8, 0.1, 0.1};
  std::uint64_t split_seed = 0;
  bool balance = false;
  split->add_option("manifest", split_in, "Input manifest")->required();
  split->add_option("--output,-o", split_out, "Output manifest (default: overwrite input)");
  split->add_option("--fractions", fractions, "Train, validation and test fractions")->expected(3);
  split->add_option("--seed", split_seed);
  split->add_flag("--balance", balance, "Equal counts per species in each split");

  auto* tr = app.add_subcommand("train", "Train a model and write a checkpoint");
  fs::path tr_manifest, tr_features, tr_config, tr_out, tr_metrics;
  std::optional<std::uint64_t> tr_seed;
  bool deterministic = false;
  tr->add_option("--manifest", tr_manifest)->required();
  tr->add_option("--features", tr_features)->required();
  tr->add_option("--config", tr_config)->required();
  tr->add_option("--output,-o", tr_out, "Checkpoint directory")->required();
  tr->add_option("--metrics", tr_metrics, "Metrics CSV (default: <output>/metrics.csv)");
  tr->add_option("--seed", tr_seed);
  tr->add_flag("--deterministic", deterministic, "Bit-reproducible run");

  auto* pr = app.add_subcommand("predict", "Predict for every container in a feature directory");
  fs::path pr_ckpt, pr_features, pr_manifest, pr_out;
  pr->add_option("--checkpoint", pr_ckpt)->required();
  pr->add_option("--features", pr_features)->required();
  pr->add_option("--manifest", pr_manifest, "Restrict to these records");
  pr->add_option("--output,-o", pr_out)->required();

  auto* ev = app.add_subcommand("eval", "MAE per species on one split");
  fs::path ev_ckpt, ev_features, ev_manifest, ev_out;
  std::string ev_split = "test";
  ev->add_option("--checkpoint", ev_ckpt)->required();
  ev->add_option("--features", ev_features)->required();
  ev->add_option("--manifest", ev_manifest)->required();
  ev->add_option("--split", ev_split);
  ev->add_option("--output,-o", ev_out, "Also write the table as CSV");

  auto* ver = app.add_subcommand("verify", "Equivariance, conservation and gradient checks");
  VerifyOptions vopts;
  bool skip_gradient = false;
  ver->add_option("--molecules", vopts.molecules);
  ver->add_option("--rotations", vopts.rotations);
  ver->add_option("--seed", vopts.seed);
  ver->add_option("--gradient-hidden-dim", vopts.gradient_hidden_dim);
  ver->add_flag("--skip-gradient", skip_gradient);

  CLI11_PARSE(app, argc, argv);
  try {
    if (dump_cg >= 0) {
      so3::dump_cg_table(std::cout, dump_cg);
      return kOk;
    }
    if (*feat) return cmd_featurize(feat_in, feat_out, workers);
    if (*split) return cmd_split(split_in, split_out.empty() ? split_in : split_out, fractions, split_seed, balance);
    if (*tr) return cmd_train(tr_manifest, tr_features, tr_config, tr_out, tr_metrics, tr_seed, deterministic);
    if (*pr) return cmd_predict(pr_ckpt, pr_features, pr_manifest, pr_out);
    if (*ev) return cmd_eval(ev_ckpt, ev_features, ev_manifest, ev_split, ev_out);
    if (*ver) {
      vopts.gradient = !skip_gradient;
      return cmd_verify(vopts);
    }
    std::cout << app.help();
    return kOk;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return exit_code(e);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kFailure;
  }
}
