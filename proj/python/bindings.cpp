#include <sstream>

#include <fmt/format.h>
#include <pybind11/eigen.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "orbitall/dataio.hpp"
#include "orbitall/errors.hpp"
#include "orbitall/so3.hpp"
#include "orbitall/training.hpp"
#include "orbitall/units.hpp"

namespace py = pybind11;
using namespace orbitall;

namespace {

MolecularSystem make_system(const std::vector<int>& z, const Eigen::MatrixX3d& xyz, int charge, int multiplicity,
                            std::optional<Eigen::Vector3d> field) {
  if (xyz.rows() != static_cast<Eigen::Index>(z.size()))
    throw InvariantViolation(fmt::format("{} atomic numbers but {} coordinate rows", z.size(), xyz.rows()));
  MolecularSystem s;
  s.atomic_numbers = z;
  for (Eigen::Index i = 0; i < xyz.rows(); ++i) s.coordinates.emplace_back(xyz.row(i).transpose());
  s.charge = charge;
  s.multiplicity = multiplicity;
  s.field = field;
  s.validate();
  return s;
}

Eigen::MatrixX3d coordinates(const MolecularSystem& s) {
  Eigen::MatrixX3d out(s.size(), 3);
  for (std::size_t i = 0; i < s.size(); ++i) out.row(i) = s.coordinates[i].transpose();
  return out;
}

std::optional<double> to_ev(const std::optional<double>& hartree) {
  if (!hartree) return std::nullopt;
  return *hartree * units::kHartreeToEv;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "SCF features and the equivariant energy model";

  // Messages keep the "Kind: detail" form of the C++ errors.
  py::register_exception<Error>(m, "Error", PyExc_RuntimeError);

  m.attr("HARTREE_TO_EV") = units::kHartreeToEv;
  m.attr("ANGSTROM_TO_BOHR") = units::kAngstromToBohr;
  m.attr("CHEMICAL_ACCURACY_MEV") = units::kChemicalAccuracyMeV;
  m.def("engine_version", &engine_version);

  py::class_<MolecularSystem>(m, "System")
      .def(py::init(&make_system), py::arg("atomic_numbers"), py::arg("coordinates"), py::arg("charge") = 0,
           py::arg("multiplicity") = 1, py::arg("field") = std::nullopt,
           "Coordinates in bohr (n x 3), field in atomic units.")
      .def_readonly("atomic_numbers", &MolecularSystem::atomic_numbers)
      .def_property_readonly("coordinates", &coordinates)
      .def_readonly("charge", &MolecularSystem::charge)
      .def_readonly("multiplicity", &MolecularSystem::multiplicity)
      .def_readonly("field", &MolecularSystem::field)
      .def_property_readonly("electron_count", &MolecularSystem::electron_count)
      .def("__len__", &MolecularSystem::size);

  m.def(
      "read_xyz",
      [](const std::filesystem::path& path) {
        auto rec = read_xyz(path);
        return py::make_tuple(rec.system, rec.labels);
      },
      py::arg("path"), "Returns (System, labels in eV).");

  py::class_<ScfOutput>(m, "ScfOutput")
      .def_property_readonly("energy_ev", [](const ScfOutput& o) { return o.result.energy * units::kHartreeToEv; })
      .def_property_readonly("converged", [](const ScfOutput& o) { return o.result.converged; })
      .def_property_readonly("iterations", [](const ScfOutput& o) { return o.result.iterations; })
      .def_property_readonly("homo_lumo_ev",
                             [](const ScfOutput& o) {
                               std::array<std::optional<double>, 4> out;
                               for (int k = 0; k < 4; ++k) out[k] = to_ev(o.result.homo_lumo[k]);
                               return out;
                             })
      .def_property_readonly("n_ao", [](const ScfOutput& o) { return o.qmm.n_ao(); })
      .def_property_readonly("matrices", [](const ScfOutput& o) {
        py::dict out;
        for (int k = 0; k < QMMSet::kCount; ++k) out[py::str(std::string(QMMSet::kNames[k]))] = o.qmm[k];
        return out;
      });

  m.def(
      "run_scf",
      [](const MolecularSystem& s, bool raise_on_failure) {
        ScfOptions opts;
        opts.throw_on_failure = raise_on_failure;
        py::gil_scoped_release release;
        return run_scf(s, opts);
      },
      py::arg("system"), py::arg("raise_on_failure") = true);

  py::class_<Model>(m, "Model")
      .def(py::init([](int hidden_dim, std::uint64_t seed) {
             return Model(hidden_dim == 256 ? ModelConfig{} : ModelConfig::scaled(hidden_dim), seed);
           }),
           py::arg("hidden_dim") = 256, py::arg("seed") = 0)
      .def_static(
          "load", [](const std::filesystem::path& dir) { return load_checkpoint(dir).model; }, py::arg("checkpoint"))
      .def_property_readonly("parameter_count", &Model::parameter_count)
      .def(
          "predict",
          [](Model& model, const MolecularSystem& s, const ScfOutput& scf) {
            return model.predict(prepare_input(s, scf.qmm, model.config().aux_exponents));
          },
          py::arg("system"), py::arg("scf"), "Model output in eV (the correction in delta mode).");

  m.def(
      "spin_gaps",
      [](double s1_at_singlet, double s0_at_singlet, double s1_at_triplet, double s0_at_triplet) {
        const auto g = spin_gaps(s1_at_singlet, s0_at_singlet, s1_at_triplet, s0_at_triplet);
        return py::dict(py::arg("singlet") = g.singlet, py::arg("triplet") = g.triplet,
                        py::arg("adiabatic") = g.adiabatic);
      },
      py::arg("s1_at_singlet"), py::arg("s0_at_singlet"), py::arg("s1_at_triplet"), py::arg("s0_at_triplet"));

  m.def(
      "lr_schedule",
      [](int epoch, double max_lr, int warmup, int cosine) {
        TrainConfig c;
        c.max_lr = max_lr;
        c.warmup_epochs = warmup;
        c.cosine_epochs = cosine;
        return lr_schedule(epoch, c);
      },
      py::arg("epoch"), py::arg("max_lr") = 5e-4, py::arg("warmup_epochs") = 100, py::arg("cosine_epochs") = 200);

  m.def(
      "cg_table",
      [](int lmax) {
        std::ostringstream out;
        so3::dump_cg_table(out, lmax);
        return out.str();
      },
      py::arg("lmax"));
}
