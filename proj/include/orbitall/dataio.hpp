#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "orbitall/molecule.hpp"
#include "orbitall/network.hpp"
#include "orbitall/scf.hpp"
#include "orbitall/training.hpp"

namespace orbitall {

/// Identifies the low-level engine in containers and checkpoints.
std::string engine_version();

// ---------------------------------------------------------------------------
// Extended XYZ

/// One geometry file: the system plus labels (eV) keyed by name
/// (energy_ev and the fmo_* targets). Unknown comment keys are kept verbatim.
struct XyzRecord {
  MolecularSystem system;
  std::map<std::string, double> labels;
  std::map<std::string, std::string> extra;
};

/// Line 1 atom count, line 2 key=value pairs, then "El x y z" rows in
/// angstrom. Throws ParseError (with the line number) on malformed input and
/// InvariantViolation when the electronic state is inconsistent.
XyzRecord parse_xyz(const std::string& text);
XyzRecord read_xyz(const std::filesystem::path& path);
std::string serialize_xyz(const XyzRecord& record);

// ---------------------------------------------------------------------------
// Dataset manifest

struct ManifestRecord {
  std::string id;
  std::string geometry;  // path relative to the manifest directory
  int charge = 0;
  int multiplicity = 1;
  std::optional<Eigen::Vector3d> field;
  std::map<std::string, double> labels;
  Species species = Species::neutral;
  std::string split;  // train, val, test or empty
  std::string parent;  // empty when absent
};

struct Manifest {
  std::vector<ManifestRecord> records;
};

Manifest read_manifest(const std::filesystem::path& path);
void write_manifest(const std::filesystem::path& path, const Manifest& manifest);

struct SplitFractions {
  double train = 0.8, val = 0.1, test = 0.1;
};

/// Deterministic train/val/test assignment. Records sharing a parent id land
/// in one split. With `balance_by_species` every split holds (up to one)
/// equal counts per species and the remainder is left unassigned.
/// Throws InsufficientData when a requested split would be empty.
Manifest split_dataset(const Manifest& manifest, const SplitFractions& fractions, std::uint64_t seed,
                       bool balance_by_species);

// ---------------------------------------------------------------------------
// QMM containers

struct QmmContainer {
  MolecularSystem system;
  QMMSet qmm;
  std::string engine_version;
};

/// "QMMSET1\n", u64 little-endian header length, JSON header, then the six
/// matrices as little-endian doubles in row-major order.
void write_qmm(const std::filesystem::path& path, const MolecularSystem& system, const QMMSet& qmm);
/// Rebuilds the AO layout from the stored geometry and checks it against the
/// header. Throws ChecksumMismatch when the basis checksum differs from
/// `table`, ParseError on a damaged file.
QmmContainer read_qmm(const std::filesystem::path& path, const BasisTable& table = BasisTable::minimal());

// ---------------------------------------------------------------------------
// Configuration

/// Flat TOML subset: [model] and [train] sections of key = value lines
/// named after the ModelConfig and TrainConfig fields; '#' comments.
struct RunConfig {
  ModelConfig model;
  TrainConfig train;
};
RunConfig parse_config(const std::string& text);
RunConfig read_config(const std::filesystem::path& path);
std::string serialize_config(const RunConfig& config);

// ---------------------------------------------------------------------------
// Checkpoints

struct CheckpointInfo {
  std::string engine_version;
  std::string basis_checksum;
  int training_step = 0;
  LabelMode mode = LabelMode::delta;
  Target target = Target::total_energy;
};

/// Directory holding manifest.json and tensors.bin.
void save_checkpoint(const std::filesystem::path& dir, const Model& model, const CheckpointInfo& info);
struct LoadedCheckpoint {
  Model model;
  CheckpointInfo info;
};
LoadedCheckpoint load_checkpoint(const std::filesystem::path& dir);

}  // namespace orbitall
