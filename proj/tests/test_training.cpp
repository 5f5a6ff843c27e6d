#include <catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>

#include "fixtures.hpp"
#include "orbitall/errors.hpp"
#include "orbitall/training.hpp"

using namespace orbitall;
using Catch::Matchers::WithinAbs;
using Catch::Matchers::WithinRel;

namespace {

// Converged random molecules with a smooth synthetic label (eV) built from
// the low-level charges.
std::vector<Sample> toy_set(int n, std::uint64_t seed, int max_atoms = 5) {
  std::mt19937_64 rng(seed);
  std::vector<Sample> out;
  while (static_cast<int>(out.size()) < n) {
    const auto sys = fixtures::random_molecule(rng, max_atoms);
    ScfOptions o;
    o.throw_on_failure = false;
    const auto scf = run_scf(sys, o);
    if (!scf.result.converged) continue;
    Sample s;
    s.input = prepare_input(sys, scf.qmm);
    for (double q : scf.result.mulliken_charges) s.label.delta += 0.5 * q * q;
    s.label.species = species_of(sys.charge, sys.multiplicity);
    s.id = std::to_string(out.size());
    out.push_back(std::move(s));
  }
  return out;
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

TEST_CASE("delta labels") {
  const std::vector<Species> sp{Species::neutral, Species::cation};
  auto d = compute_delta_labels({-100.0, 5.0}, {-99.2, 5.0}, sp, LabelMode::delta);
  CHECK_THAT(d[0].delta, WithinAbs(-0.8, 1e-12));
  CHECK(d[0].delta == -100.0 - -99.2);
  CHECK(d[1].delta == 0.0);
  CHECK(d[1].species == Species::cation);
  auto direct = compute_delta_labels({-100.0, 5.0}, {std::nullopt, 5.0}, sp, LabelMode::direct);
  CHECK(direct[0].delta == -100.0);
  CHECK(direct[0].y_low == 0.0);
  CHECK_THROWS_AS(compute_delta_labels({-100.0}, {std::nullopt}, {Species::neutral}, LabelMode::delta), MissingLowLevel);

  CHECK(species_of(0, 1) == Species::neutral);
  CHECK(species_of(0, 3) == Species::radical);
  CHECK(species_of(1, 2) == Species::cation);
  CHECK(species_of(-1, 2) == Species::anion);
}

TEST_CASE("element bias regression") {
  SECTION("exact linear labels") {
    // Columns H, C; label = 2 * #H.
    Eigen::MatrixXd counts(4, 2);
    counts << 4, 1, 2, 2, 6, 2, 0, 3;
    const Eigen::VectorXd labels = 2.0 * counts.col(0);
    const auto fit = init_element_biases(counts, labels);
    CHECK_FALSE(fit.singular);
    CHECK_THAT(fit.bias[0], WithinAbs(2.0, 1e-12));
    CHECK_THAT(fit.bias[1], WithinAbs(0.0, 1e-12));
  }
  SECTION("single element") {
    Eigen::MatrixXd counts = Eigen::MatrixXd::Constant(3, 1, 2.0);
    Eigen::VectorXd labels(3);
    labels << 1.0, 2.0, 6.0;
    CHECK_THAT(init_element_biases(counts, labels).bias[0], WithinAbs(3.0 / 2.0, 1e-14));
  }
  SECTION("random design against the normal equations") {
    std::mt19937_64 rng(50);
    std::uniform_int_distribution<int> c(0, 6);
    std::normal_distribution<double> g;
    Eigen::MatrixXd counts(50, 4);
    Eigen::VectorXd labels(50);
    for (int i = 0; i < 50; ++i) {
      for (int j = 0; j < 4; ++j) counts(i, j) = c(rng);
      labels[i] = g(rng) * 10.0;
    }
    const Eigen::MatrixXd ata = counts.transpose() * counts;
    const Eigen::VectorXd oracle = ata.inverse() * (counts.transpose() * labels);
    CHECK((init_element_biases(counts, labels).bias - oracle).cwiseAbs().maxCoeff() < 1e-10);
  }
  SECTION("rank-deficient designs fall back to ridge and are flagged") {
    Eigen::MatrixXd counts(3, 2);
    counts << 1, 2, 2, 4, 3, 6;
    const auto fit = init_element_biases(counts, Eigen::Vector3d(1, 2, 3));
    CHECK(fit.singular);
    CHECK(fit.bias.allFinite());
    CHECK(((counts * fit.bias) - Eigen::Vector3d(1, 2, 3)).norm() < 1e-6);
    CHECK_THROWS_AS(init_element_biases(Eigen::MatrixXd::Ones(1, 2), Eigen::VectorXd::Ones(1)), InsufficientData);
  }
}

TEST_CASE("charge shifts") {
  const auto zero = init_charge_shifts({0, 1, 0}, Eigen::Vector3d::Zero());
  CHECK(zero.size() == 2);
  for (const auto& [q, v] : zero) CHECK(v == 0.0);
  Eigen::VectorXd r(4);
  r << 0.5, 1.5, -2.0, 0.0;
  const auto s = init_charge_shifts({1, 1, -1, -1}, r);
  CHECK(s.at(1) == 1.0);
  CHECK(s.at(-1) == -1.0);
  CHECK(s.count(0) == 0);
}

TEST_CASE("learning-rate schedule") {
  const TrainConfig c;
  CHECK(lr_schedule(0, c) == 0.0);
  CHECK_THAT(lr_schedule(50, c), WithinRel(2.5e-4, 1e-14));
  CHECK(lr_schedule(100, c) == 5e-4);
  CHECK_THAT(lr_schedule(200, c), WithinRel(2.5e-4, 1e-12));
  CHECK(lr_schedule(300, c) == 0.0);
  CHECK(c.total_epochs() == 300);
  for (int e = 1; e <= 100; ++e) CHECK(lr_schedule(e, c) > lr_schedule(e - 1, c));
  for (int e = 101; e <= 300; ++e) CHECK(lr_schedule(e, c) < lr_schedule(e - 1, c));
  CHECK_THROWS_AS(lr_schedule(-1, c), ConfigError);
}

TEST_CASE("Adam updates") {
  SECTION("zero gradient leaves parameters unchanged") {
    std::vector<ad::Parameter> ps{{"w", Eigen::MatrixXd::Constant(2, 2, 0.7), Eigen::MatrixXd::Zero(2, 2)}};
    AdamState st;
    for (int i = 0; i < 5; ++i) adam_step(ps, st, 1e-2);
    CHECK(ps[0].value == Eigen::MatrixXd::Constant(2, 2, 0.7));
  }
  SECTION("constant gradient moves by the learning rate") {
    std::vector<ad::Parameter> ps{{"w", Eigen::MatrixXd::Zero(1, 1), Eigen::MatrixXd::Constant(1, 1, 3.0)}};
    AdamState st;
    double last = 0.0;
    for (int i = 0; i < 200; ++i) {
      const double before = ps[0].value(0, 0);
      adam_step(ps, st, 1e-3);
      last = before - ps[0].value(0, 0);
    }
    CHECK_THAT(last, WithinRel(1e-3, 1e-8));
  }
  SECTION("two steps on a quadratic match a scalar hand computation") {
    // f = 0.5 x^2 + 2 y^2
    const double lr = 0.1, b1 = 0.9, b2 = 0.999, eps = 1e-8;
    std::vector<ad::Parameter> ps{{"xy", Eigen::Vector2d(1.0, -0.5), {}}};
    AdamState st;
    double x[2] = {1.0, -0.5}, m[2] = {0, 0}, v[2] = {0, 0};
    const double k[2] = {1.0, 4.0};
    for (int t = 1; t <= 2; ++t) {
      ps[0].grad = Eigen::Vector2d(k[0] * ps[0].value(0, 0), k[1] * ps[0].value(1, 0));
      adam_step(ps, st, lr, b1, b2, eps);
      for (int i = 0; i < 2; ++i) {
        const double g = k[i] * x[i];
        m[i] = b1 * m[i] + (1 - b1) * g;
        v[i] = b2 * v[i] + (1 - b2) * g * g;
        const double mh = m[i] / (1 - std::pow(b1, t)), vh = v[i] / (1 - std::pow(b2, t));
        x[i] -= lr * mh / (std::sqrt(vh) + eps);
      }
    }
    CHECK_THAT(ps[0].value(0, 0), WithinAbs(x[0], 1e-15));
    CHECK_THAT(ps[0].value(1, 0), WithinAbs(x[1], 1e-15));
  }
  SECTION("non-finite gradients abort before any update") {
    std::vector<ad::Parameter> ps{{"a", Eigen::MatrixXd::Ones(1, 1), Eigen::MatrixXd::Ones(1, 1)},
                                  {"b", Eigen::MatrixXd::Ones(1, 1), Eigen::MatrixXd::Constant(1, 1, NAN)}};
    AdamState st;
    try {
      adam_step(ps, st, 0.1);
      FAIL("expected NonFiniteGradient");
    } catch (const NonFiniteGradient& e) {
      CHECK(std::string(e.what()).find("'b'") != std::string::npos);
    }
    CHECK(ps[0].value(0, 0) == 1.0);
  }
}

TEST_CASE("evaluation metrics") {
  const std::vector<Species> sp{Species::neutral, Species::radical, Species::neutral, Species::anion};
  const std::vector<double> labels{1.0, 2.0, 3.0, 4.0};
  auto perfect = compute_metrics(labels, labels, sp);
  CHECK(perfect.mae_mev == 0.0);
  CHECK(perfect.within_chemical_accuracy == 1.0);

  CHECK(compute_metrics(std::vector<double>(4, 0.0434), std::vector<double>(4, 0.0), sp).within_chemical_accuracy == 0.0);

  // Errors 10, 20, 30, 50 meV.
  const std::vector<double> pred{1.01, 1.98, 3.03, 3.95};
  const auto m = compute_metrics(pred, labels, sp);
  CHECK_THAT(m.mae_mev, WithinAbs(27.5, 1e-9));
  CHECK_THAT(*m.mae_by_species[0], WithinAbs(20.0, 1e-9));
  CHECK_THAT(*m.mae_by_species[1], WithinAbs(20.0, 1e-9));
  CHECK_FALSE(m.mae_by_species[2].has_value());
  CHECK_THAT(*m.mae_by_species[3], WithinAbs(50.0, 1e-9));
  CHECK(m.within_chemical_accuracy == 0.75);
  CHECK(m.count == 4);
}

TEST_CASE("zero delta labels give zero loss at initialization") {
  auto data = toy_set(6, 3);
  for (auto& s : data) s.label.delta = 0.0;
  Model model(ModelConfig::scaled(16), 1);
  TrainConfig c;
  c.epochs = 3;
  c.batch_size = 4;
  const auto r = train(c, model, data, {});
  for (const auto& h : r.history) CHECK(h.train_loss == 0.0);
  CHECK(evaluate(model, data).metrics.mae_mev == 0.0);
}

TEST_CASE("deterministic runs write identical metric files") {
  const auto train_set = toy_set(8, 4), val = toy_set(3, 5);
  const auto dir = std::filesystem::temp_directory_path() / "orbitall_test_training";
  std::filesystem::create_directories(dir);
  TrainConfig c;
  c.warmup_epochs = 2;
  c.cosine_epochs = 4;
  c.batch_size = 3;
  c.max_lr = 1e-3;
  c.seed = 17;
  for (const char* name : {"a.csv", "b.csv"}) {
    Model model(ModelConfig::scaled(16), 2);
    write_metrics_csv((dir / name).string(), train(c, model, train_set, val).history);
  }
  const auto a = slurp(dir / "a.csv");
  CHECK(a == slurp(dir / "b.csv"));
  CHECK(a.rfind("epoch,lr,train_loss,val_mae_meV", 0) == 0);
  CHECK(std::count(a.begin(), a.end(), '\n') == 7);
  std::filesystem::remove_all(dir);
}

TEST_CASE("bias initialization writes the head") {
  auto data = toy_set(6, 6);
  data[0].input.charge = 1;
  Model model(ModelConfig::scaled(16), 1);
  TrainResult rep;
  initialize_output_biases(model, data, &rep);
  CHECK(rep.charge_shifts.size() == 2);
  CHECK(model.known_charges()[0 - Model::kMinCharge]);
  CHECK(model.known_charges()[1 - Model::kMinCharge]);
  CHECK_FALSE(model.known_charges()[-1 - Model::kMinCharge]);
  CHECK_THAT(model.parameter("head.b_q").value(1 - Model::kMinCharge, 0), WithinAbs(rep.charge_shifts.at(1), 0.0));
}

TEST_CASE("small training set is fitted to below 1 meV") {
  const auto data = toy_set(32, 5);
  Model model(ModelConfig::scaled(16), 1);
  TrainConfig c;
  c.max_lr = 2e-3;
  c.batch_size = 8;
  c.warmup_epochs = 50;
  c.cosine_epochs = 450;
  const auto r = train(c, model, data, {});
  REQUIRE(r.history.size() == 500);
  CHECK(r.history.back().train_loss < 1e-3 * r.history.front().train_loss);
  CHECK(evaluate(model, data).metrics.mae_mev < 1.0);
}
