#include <catch_amalgamated.hpp>

#include <random>

#include "orbitall/errors.hpp"
#include "orbitall/irreps.hpp"
#include "orbitall/so3.hpp"

using namespace orbitall;
using Catch::Matchers::WithinAbs;

namespace {

IrrepsFeature random_feature(const IrrepsSpec& spec, int n_atoms, std::mt19937_64& rng) {
  std::normal_distribution<double> g;
  IrrepsFeature h(spec, n_atoms);
  for (int i = 0; i < h.data.size(); ++i) h.data.data()[i] = g(rng);
  return h;
}

EvNormStats unit_stats(int channels) {
  return {Eigen::VectorXd::Constant(channels, 0.3), Eigen::VectorXd::Constant(channels, 1.7)};
}

}  // namespace

TEST_CASE("irreps spec layout") {
  const auto s = IrrepsSpec::standard();
  CHECK(s.count(0, 1) == 128);
  CHECK(s.count(4, 1) == 6);
  CHECK(s.count(3, -1) == 2);
  CHECK(s.count(4, -1) == 0);
  CHECK(s.channels() == 256);
  CHECK(s.components() == 128 + 24 + 3 * 56 + 5 * 28 + 7 * 14 + 9 * 6);
  CHECK(s.offset(0, 1) == 0);
  CHECK(s.offset(0, -1) == 128);
  CHECK(s.offset(1, 1) == 152);
  CHECK(s.index(1, 1, 2, -1) == 152 + 6);
  CHECK(s.channel_offset(1, -1) == 152 + 48);

  const auto small = IrrepsSpec::scaled(64);
  CHECK(small.channels() == 64);
  for (int l = 0; l <= IrrepsSpec::kMaxL; ++l)
    for (int p : {1, -1}) CHECK((small.count(l, p) > 0) == (s.count(l, p) > 0));
  CHECK(IrrepsSpec::scaled(256) == s);
  CHECK_THROWS_AS(IrrepsSpec::scaled(4), ConfigError);
}

TEST_CASE("rotate_feature") {
  std::mt19937_64 rng(3);
  const auto spec = IrrepsSpec::scaled(40);
  const auto h = random_feature(spec, 3, rng);
  CHECK((rotate_feature(h, Eigen::Matrix3d::Identity()).data - h.data).cwiseAbs().maxCoeff() < 1e-15);
  const Eigen::Matrix3d r1 = so3::random_rotation(rng), r2 = so3::random_rotation(rng);
  const auto rotated = rotate_feature(h, r1);
  for (int n = 0; n < spec.count(0, 1); ++n) CHECK(rotated.at(1, 0, 1, n, 0) == h.at(1, 0, 1, n, 0));
  const auto twice = rotate_feature(rotate_feature(h, r2), r1);
  CHECK((twice.data - rotate_feature(h, r1 * r2).data).cwiseAbs().maxCoeff() < 1e-10);
}

TEST_CASE("evnorm") {
  std::mt19937_64 rng(5);
  const auto spec = IrrepsSpec::scaled(48);
  const int c = spec.channels();
  const auto stats = unit_stats(c);
  const Eigen::VectorXd beta = Eigen::VectorXd::Constant(c, 1.0);

  SECTION("zero input") {
    const IrrepsFeature zero(spec, 2);
    const auto r = evnorm(zero, stats, beta);
    CHECK(r.direction.data.cwiseAbs().maxCoeff() == 0.0);
    CHECK((r.invariant.array() + 0.3 / 1.7).abs().maxCoeff() < 1e-15);
    CHECK(invariant_content(zero, 0.1).cwiseAbs().maxCoeff() == 0.0);
  }
  SECTION("scaling keeps direction ratios") {
    const auto h = random_feature(spec, 2, rng);
    IrrepsFeature h3 = h;
    h3.data *= 3.0;
    const auto a = evnorm(h, stats, beta), b = evnorm(h3, stats, beta);
    for (int l = 1; l <= IrrepsSpec::kMaxL; ++l)
      for (int n = 0; n < spec.count(l, 1); ++n)
        for (int m = -l + 1; m <= l; ++m)
          CHECK_THAT(a.direction.at(0, l, 1, n, m) / a.direction.at(0, l, 1, n, -l),
                     WithinAbs(b.direction.at(0, l, 1, n, m) / b.direction.at(0, l, 1, n, -l), 1e-9));
    CHECK((invariant_content(h, 0.1).array() >= 0.0).all());
  }
  SECTION("invariant and equivariant parts under 100 rotations") {
    const auto h = random_feature(spec, 4, rng);
    const auto ref = evnorm(h, stats, beta);
    double inv_dev = 0.0, eq_dev = 0.0;
    for (int t = 0; t < 100; ++t) {
      const Eigen::Matrix3d r = so3::random_rotation(rng);
      const auto out = evnorm(rotate_feature(h, r), stats, beta);
      inv_dev = std::max(inv_dev, (out.invariant - ref.invariant).cwiseAbs().maxCoeff());
      eq_dev = std::max(eq_dev, (out.direction.data - rotate_feature(ref.direction, r).data).cwiseAbs().maxCoeff());
    }
    CHECK(inv_dev < 1e-10);
    CHECK(eq_dev < 1e-10);
  }
  SECTION("closed form for a single vector channel") {
    IrrepsFeature h(spec, 1);
    h.at(0, 1, 1, 0, -1) = 3.0;
    h.at(0, 1, 1, 0, 1) = 4.0;
    const auto r = evnorm(h, stats, beta);
    const double norm = std::sqrt(25.0 + 0.01) - 0.1;
    CHECK_THAT(r.invariant(0, spec.channel_offset(1, 1)), WithinAbs((norm - 0.3) / 1.7, 1e-14));
    CHECK_THAT(r.direction.at(0, 1, 1, 0, 1), WithinAbs(4.0 / (norm + 1.0 + 0.1), 1e-14));
  }
}
