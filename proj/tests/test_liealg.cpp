#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <numbers>

#include "geoproj/error.hpp"
#include "geoproj/geometry.hpp"
#include "geoproj/liealg.hpp"
#include "support.hpp"

using namespace geoproj;
using namespace geoproj::lie;
using testsupport::random_rotation;

namespace {

constexpr double kPi = std::numbers::pi;

Mat3 rot_z(double a) {
  Mat3 r;
  r << std::cos(a), -std::sin(a), 0, std::sin(a), std::cos(a), 0, 0, 0, 1;
  return r;
}

double so3_residual(const Mat3& r) {
  return (r * r.transpose() - Mat3::Identity()).norm() + std::abs(r.determinant() - 1.0);
}

}  // namespace

TEST_CASE("hat matches the basis matrices") {
  Mat3 e3;
  e3 << 0, -1, 0, 1, 0, 0, 0, 0, 0;
  Mat3 e1;
  e1 << 0, 0, 0, 0, 0, -1, 0, 1, 0;
  CHECK(hat(Vec3(0, 0, 1)) == e3);
  CHECK(hat(Vec3(1, 0, 0)) == e1);
  CHECK(hat(Vec3::Zero()) == Mat3::Zero());
  CHECK(so3_basis(0) == e1);
  CHECK(so3_basis(2) == e3);
}

TEST_CASE("vee and hat are exact inverses") {
  std::mt19937_64 rng(11);
  for (int i = 0; i < 1000; ++i) {
    const Vec3 c = testsupport::gaussian(3, rng, 5.0);
    CHECK(vee(hat(c)) == c);
    const Mat3 s = testsupport::skew3(testsupport::gaussian(3, rng, 2.0));
    CHECK(hat(vee(s)) == s);
    CHECK((hat(c) + hat(c).transpose()).norm() == 0.0);
  }
}

TEST_CASE("exp_so3 closed form") {
  CHECK((exp_so3(Vec3(0, 0, kPi / 2)) - rot_z(kPi / 2)).norm() < 1e-15);
  CHECK(exp_so3(Vec3::Zero()) == Mat3::Identity());
  const Vec3 tiny(3e-8, -1e-8, 2e-8);
  CHECK((exp_so3(tiny) - testsupport::expm_reference(hat(tiny))).norm() < 1e-15);
}

TEST_CASE("exp_so3 agrees with a Pade exponential on 1000 random coordinates") {
  std::mt19937_64 rng(5);
  double worst = 0.0;
  for (int i = 0; i < 1000; ++i) {
    Vec3 c = testsupport::gaussian(3, rng);
    c *= testsupport::uniform(rng, 0.0, kPi) / c.norm();
    worst = std::max(worst, (exp_so3(c) - Mat3(testsupport::expm_reference(hat(c)))).norm());
  }
  CHECK(worst < 1e-10);
}

TEST_CASE("expm_taylor agrees with the reference on generic matrices") {
  std::mt19937_64 rng(8);
  for (int i = 0; i < 50; ++i) {
    Eigen::MatrixXd a = Eigen::MatrixXd::NullaryExpr(4, 4, [&] { return testsupport::uniform(rng, -2, 2); });
    const Eigen::MatrixXd ref = testsupport::expm_reference(a);
    CHECK((expm_taylor(a) - ref).norm() / ref.norm() < 1e-12);
  }
}

TEST_CASE("exp_so3 stays in SO(3) for large coordinates") {
  std::mt19937_64 rng(6);
  double worst = 0.0;
  for (int i = 0; i < 1000; ++i) {
    Vec3 c = testsupport::gaussian(3, rng);
    c *= testsupport::uniform(rng, 0.0, 10.0) / c.norm();
    worst = std::max(worst, so3_residual(exp_so3(c)));
  }
  CHECK(worst < 1e-12);
}

TEST_CASE("exp_se3 of a pure translation is exact") {
  const Vec3 u(0.3, -1.7, 2.5);
  Mat4 expect = Mat4::Identity();
  expect.block<3, 1>(0, 3) = u;
  CHECK(exp_se3(Vec3::Zero(), u) == expect);
}

TEST_CASE("exp_se3 agrees with the reference exponential") {
  std::mt19937_64 rng(9);
  for (int i = 0; i < 200; ++i) {
    const Vec3 c = testsupport::gaussian(3, rng, 1.0);
    const Vec3 u = testsupport::gaussian(3, rng, 2.0);
    Eigen::Matrix4d xi = Eigen::Matrix4d::Zero();
    xi.topLeftCorner<3, 3>() = hat(c);
    xi.block<3, 1>(0, 3) = u;
    CHECK((exp_se3(c, u) - Mat4(testsupport::expm_reference(xi))).norm() < 1e-12);
  }
}

TEST_CASE("lie_step examples") {
  const Eigen::VectorXd id = flatten(Mat3(Mat3::Identity()));
  CHECK((to_mat3(lie_step(id, So3Coords{Vec3(0, 0, kPi / 2)}, 1.0)) - rot_z(kPi / 2)).norm() < 1e-15);

  std::mt19937_64 rng(3);
  const Eigen::VectorXd g = flatten(random_rotation(rng));
  CHECK(lie_step(g, So3Coords{Vec3(1, 2, 3)}, 0.0) == g);

  const So3Coords c{Vec3(0, 0, 0.3)};
  const Eigen::VectorXd twice = lie_step(lie_step(id, c, 0.1), c, 0.1);
  CHECK((twice - lie_step(id, c, 0.2)).norm() < 1e-15);

  CHECK_THROWS_AS(lie_step(2.0 * id, c, 0.1), Error);
}

TEST_CASE("lie_step keeps group membership over 100 composed steps") {
  std::mt19937_64 rng(4);
  const ManifoldKernel so3 = ManifoldKernel::so3();
  const ManifoldKernel se3 = ManifoldKernel::se3();
  Eigen::VectorXd g = flatten(random_rotation(rng));
  Eigen::VectorXd h = random_point(se3, 17);
  double prev_g = residual_total(so3, g);
  double prev_h = residual_total(se3, h);
  for (int i = 0; i < 100; ++i) {
    g = lie_step(g, So3Coords{testsupport::gaussian(3, rng)}, 0.1);
    h = lie_step(h, Se3Coords{testsupport::gaussian(3, rng), testsupport::gaussian(3, rng)}, 0.1);
    const double rg = residual_total(so3, g);
    const double rh = residual_total(se3, h);
    CHECK(rg <= prev_g + 1e-12);
    CHECK(rh <= prev_h + 1e-12);
    CHECK(rg <= 1e-10);
    CHECK(rh <= 1e-10);
    prev_g = std::max(prev_g, rg);
    prev_h = std::max(prev_h, rh);
  }
}

TEST_CASE("geodesic distance on SO(3)") {
  const Mat3 id = Mat3::Identity();
  const auto d0 = geodesic_distance_so3(id, id);
  CHECK(d0.theta == 0.0);
  CHECK_FALSE(d0.axis_defined);

  const auto d = geodesic_distance_so3(id, rot_z(kPi / 2));
  CHECK(d.theta == doctest::Approx(kPi / 2).epsilon(1e-14));
  CHECK(d.axis_defined);
  CHECK((d.axis - Vec3(0, 0, 1)).norm() < 1e-14);

  CHECK_THROWS_AS(geodesic_distance_so3(id, rot_z(kPi)), Error);
}

TEST_CASE("exp(log(R)) round trip on 1000 random rotations") {
  std::mt19937_64 rng(12);
  int tested = 0;
  double worst = 0.0;
  while (tested < 1000) {
    const Mat3 r = random_rotation(rng);
    const auto d = geodesic_distance_so3(Mat3::Identity(), r);
    if (d.theta >= kPi - 0.1) continue;
    worst = std::max(worst, (exp_so3(log_so3(r)) - r).norm());
    ++tested;
  }
  CHECK(worst < 1e-10);
}

TEST_CASE("log_so3 near identity and near pi") {
  const Vec3 small(1e-9, -2e-9, 5e-10);
  CHECK((log_so3(exp_so3(small)) - small).norm() < 1e-20 + 1e-15 * small.norm());
  const Vec3 big = Vec3(1, 1, 0).normalized() * (kPi - 0.01);
  CHECK((log_so3(exp_so3(big)) - big).norm() < 1e-9);
}
