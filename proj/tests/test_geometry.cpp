#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <array>
#include <numbers>

#include "geoproj/error.hpp"
#include "geoproj/geometry.hpp"
#include "geometry_properties.hpp"
#include "support.hpp"

using namespace geoproj;
using Eigen::VectorXd;

namespace {

constexpr double kPi = std::numbers::pi;

VectorXd vec(std::initializer_list<double> v) {
  VectorXd out(static_cast<Eigen::Index>(v.size()));
  Eigen::Index i = 0;
  for (double x : v) out(i++) = x;
  return out;
}

VectorXd identity9() { return testsupport::flat_rowmajor(Eigen::Matrix3d::Identity()); }

ErrorCode code_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.code();
  }
  FAIL("expected an exception");
  return ErrorCode::Config;
}

}  // namespace

TEST_CASE("kernel dimensions and names") {
  CHECK(ManifoldKernel::sphere(3).ambient_dim() == 3);
  CHECK(ManifoldKernel::sphere(3).intrinsic_dim() == 2);
  CHECK(ManifoldKernel::so3().ambient_dim() == 9);
  CHECK(ManifoldKernel::so3().intrinsic_dim() == 3);
  CHECK(ManifoldKernel::se3().ambient_dim() == 16);
  CHECK(ManifoldKernel::se3().intrinsic_dim() == 6);
  CHECK(ManifoldKernel::disk().ambient_dim() == 2);
  const auto p = ManifoldKernel::product({ManifoldKernel::sphere(3), ManifoldKernel::so3()});
  CHECK(p.ambient_dim() == 12);
  CHECK(p.intrinsic_dim() == 5);
  CHECK_THROWS(ManifoldKernel::sphere(1));
  for (const auto& k : testsupport::property_kernels()) CHECK(ManifoldKernel::parse(k.name()) == k);
  CHECK(ManifoldKernel::parse("circle") == ManifoldKernel::sphere(2));
  CHECK(ManifoldKernel::power(ManifoldKernel::so3(), 10).ambient_dim() == 90);
}

TEST_CASE("metric_project examples") {
  CHECK(metric_project(ManifoldKernel::sphere(3), vec({0, 0, 2})) == vec({0, 0, 1}));
  CHECK(metric_project(ManifoldKernel::disk(), vec({0.5, 0})) == vec({0.5, 0}));
  CHECK(metric_project(ManifoldKernel::disk(), vec({3, 4})).isApprox(vec({0.6, 0.8}), 1e-15));
  const VectorXd d = testsupport::flat_rowmajor(Eigen::Vector3d(2, 1, 1).asDiagonal().toDenseMatrix());
  CHECK((metric_project(ManifoldKernel::so3(), d) - identity9()).norm() < 1e-14);
  CHECK(code_of([] { metric_project(ManifoldKernel::sphere(3), VectorXd::Zero(3)); }) == ErrorCode::ZeroInput);
  CHECK(code_of([] { metric_project(ManifoldKernel::so3(), VectorXd::Zero(9)); }) == ErrorCode::SingularRotationBlock);
}

TEST_CASE("SO(3) projection of a reflection is the nearest rotation") {
  // diag(1, 1, -1): polar factor is a reflection; the nearest rotation flips
  // the smallest singular direction.
  Eigen::Matrix3d y = Eigen::Vector3d(3.0, 2.0, -1.0).asDiagonal();
  const Eigen::Matrix3d r = testsupport::mat3_rowmajor(metric_project(ManifoldKernel::so3(), testsupport::flat_rowmajor(y)));
  CHECK((r - Eigen::Matrix3d(Eigen::Vector3d(1, 1, 1).asDiagonal())).norm() < 1e-14);
  // Brute force over a rotation sample: nothing is closer.
  std::mt19937_64 rng(2);
  for (int i = 0; i < 2000; ++i) {
    CHECK((y - r).norm() <= (y - testsupport::random_rotation(rng)).norm() + 1e-12);
  }
}

TEST_CASE("SE(3) projection keeps the translation") {
  Eigen::Matrix4d g = Eigen::Matrix4d::Zero();
  g.topLeftCorner<3, 3>() = 1.3 * Eigen::Matrix3d::Identity();
  g.block<3, 1>(0, 3) = Eigen::Vector3d(1, 2, 3);
  g(3, 0) = 0.2;
  g(3, 3) = 0.7;
  const Eigen::Matrix4d p = testsupport::mat4_rowmajor(metric_project(ManifoldKernel::se3(), testsupport::flat_rowmajor(g)));
  Eigen::Matrix4d expect = Eigen::Matrix4d::Identity();
  expect.block<3, 1>(0, 3) = Eigen::Vector3d(1, 2, 3);
  CHECK((p - expect).norm() < 1e-14);
}

TEST_CASE("tangent_project examples") {
  const auto s = ManifoldKernel::sphere(3);
  CHECK(tangent_project(s, vec({1, 0, 0}), vec({1, 1, 0})) == vec({0, 1, 0}));
  const auto d = ManifoldKernel::disk();
  CHECK(tangent_project(d, vec({0.3, 0.2}), vec({5, -7})) == vec({5, -7}));
  CHECK(tangent_project(d, vec({1, 0}), vec({1, 1})) == vec({0, 1}));
  CHECK(tangent_project(d, vec({1, 0}), vec({-1, 1})) == vec({-1, 1}));
  CHECK(code_of([&] { tangent_project(s, vec({2, 0, 0}), vec({1, 1, 0})); }) == ErrorCode::OffManifoldBase);
}

TEST_CASE("exp_map examples") {
  const auto s = ManifoldKernel::sphere(3);
  CHECK((exp_map(s, vec({1, 0, 0}), vec({0, kPi / 2, 0})) - vec({0, 1, 0})).norm() < 1e-15);
  std::mt19937_64 rng(1);
  for (int i = 0; i < 20; ++i) {
    const VectorXd x = random_point(s, rng);
    CHECK(exp_map(s, x, VectorXd::Zero(3)) == x);
  }
  const VectorXd v = testsupport::flat_rowmajor(testsupport::skew3({0, 0, kPi / 2}));
  Eigen::Matrix3d rz;
  rz << 0, -1, 0, 1, 0, 0, 0, 0, 1;
  CHECK((exp_map(ManifoldKernel::so3(), identity9(), v) - testsupport::flat_rowmajor(rz)).norm() < 1e-15);
  CHECK(code_of([] { exp_map(ManifoldKernel::disk(), vec({0, 0}), vec({1, 0})); }) == ErrorCode::UnsupportedManifold);
  CHECK(code_of([&] { exp_map(s, vec({1, 0, 0}), vec({1, 0, 0})); }) == ErrorCode::OffTangent);
}

TEST_CASE("constraint_residual examples") {
  const auto r = constraint_residual(ManifoldKernel::so3(), identity9());
  CHECK(r.total == 0.0);
  CHECK(constraint_residual(ManifoldKernel::sphere(3), vec({0, 0, 2})).total == 1.0);
  const auto big = constraint_residual(ManifoldKernel::so3(), 1.1 * identity9());
  const double expect = 0.21 * std::sqrt(3.0) + 0.331;
  CHECK(big.total == doctest::Approx(expect).epsilon(1e-13));
  CHECK(big.total == doctest::Approx(0.694730).epsilon(1e-6));
  CHECK(big.part("orth") + big.part("det") == doctest::Approx(big.total).epsilon(1e-15));
  CHECK(constraint_residual(ManifoldKernel::disk(), vec({0.2, 0.1})).total == 0.0);
  CHECK(constraint_residual(ManifoldKernel::disk(), vec({3, 4})).total == doctest::Approx(4.0));
  Eigen::Matrix4d g = Eigen::Matrix4d::Identity();
  g(3, 1) = -0.25;
  CHECK(constraint_residual(ManifoldKernel::se3(), testsupport::flat_rowmajor(g)).part("row") == 0.25);
}

TEST_CASE("residual parts are nonnegative and sum to the total") {
  std::mt19937_64 rng(21);
  for (const auto& m : testsupport::property_kernels()) {
    for (int i = 0; i < 100; ++i) {
      const VectorXd y = testsupport::near_point(m, rng);
      const auto r = constraint_residual(m, y);
      double sum = 0.0;
      for (const auto& [name, v] : r.parts) {
        CHECK(v >= 0.0);
        sum += v;
      }
      CHECK(r.total == doctest::Approx(sum).epsilon(1e-14));
      CHECK(residual_total(m, y) == doctest::Approx(r.total).epsilon(1e-14));
    }
  }
}

TEST_CASE("random_point lands on the kernel") {
  std::mt19937_64 rng(3);
  for (const auto& m : testsupport::property_kernels()) {
    for (int i = 0; i < 200; ++i) CHECK(residual_total(m, random_point(m, rng)) <= 1e-10);
  }
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    CHECK(std::abs(random_point(ManifoldKernel::sphere(3), seed).norm() - 1.0) <= 1e-12);
  }
  CHECK(random_point(ManifoldKernel::so3(), 7) == random_point(ManifoldKernel::so3(), 7));
}

TEST_CASE("sphere samples fill every octant evenly") {
  std::mt19937_64 rng(99);
  std::array<int, 8> counts{};
  const int n = 10000;
  for (int i = 0; i < n; ++i) {
    const VectorXd x = random_point(ManifoldKernel::sphere(3), rng);
    counts[(x(0) > 0) + 2 * (x(1) > 0) + 4 * (x(2) > 0)]++;
  }
  for (int c : counts) {
    CHECK(c >= 0.09 * n);
    CHECK(c <= 0.16 * n);
  }
}

TEST_CASE("disk samples are uniform in area") {
  std::mt19937_64 rng(98);
  int inner = 0;
  const int n = 10000;
  for (int i = 0; i < n; ++i) inner += random_point(ManifoldKernel::disk(), rng).norm() < std::sqrt(0.5);
  CHECK(std::abs(inner - n / 2) < 6 * std::sqrt(n * 0.25));
}

TEST_CASE("sphere log and distance") {
  const VectorXd p = vec({0, 0, 1});
  const VectorXd q = vec({std::sin(0.7), 0, std::cos(0.7)});
  CHECK(sphere_distance(p, q) == doctest::Approx(0.7).epsilon(1e-14));
  CHECK(sphere_log(p, q).norm() == doctest::Approx(0.7).epsilon(1e-14));
  CHECK(sphere_log(p, p).norm() == 0.0);
  CHECK(code_of([&] { sphere_log(p, -p); }) == ErrorCode::CutLocus);
  const VectorXd r = vec({std::sin(1e-9), 0, std::cos(1e-9)});
  CHECK(sphere_distance(p, r) == doctest::Approx(1e-9).epsilon(1e-6));
}

TEST_CASE("fuzzed geometry properties") {
  for (const auto& r : testsupport::run_geometry_properties(1000, 2024)) {
    INFO(r.kernel << " " << r.property << " worst " << r.worst);
    CHECK(r.pass());
  }
}
