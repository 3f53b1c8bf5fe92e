#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <fstream>
#include <numbers>

#include "geoproj/dynamics.hpp"
#include "geoproj/error.hpp"
#include "support.hpp"

using namespace geoproj;
using namespace geoproj::dyn;
using Eigen::Vector3d;
using Eigen::VectorXd;

namespace {

constexpr double kPi = std::numbers::pi;

VectorXd v2(double a, double b) { return Eigen::Vector2d(a, b); }

// Bracketed Cucker-Smale term written as a rotation of a_k by -theta/2
// about n_ki, evaluated with Eigen's angle-axis type.
std::vector<Vector3d> cs_oracle(const CuckerSmaleState& s, double kappa) {
  const std::size_t n = s.rotations.size();
  std::vector<Vector3d> out(n, Vector3d::Zero());
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t k = 0; k < n; ++k) {
      const Eigen::AngleAxisd rel(Eigen::Matrix3d(s.rotations[k].transpose() * s.rotations[i]));
      const double theta = std::abs(rel.angle());
      const double w = theta < kPi - 1e-6 ? std::cos(theta / 2) : 0.0;
      const Vector3d turned = Eigen::AngleAxisd(-theta / 2, rel.angle() < 0 ? Vector3d(-rel.axis()) : rel.axis()) * s.velocities[k];
      out[i] += w * (turned - s.velocities[i]);
    }
    out[i] *= kappa / static_cast<double>(n);
  }
  return out;
}

CuckerSmaleState random_cs_state(int n, std::mt19937_64& rng, double spread) {
  CuckerSmaleState s;
  for (int i = 0; i < n; ++i) {
    s.rotations.push_back(lie::exp_so3(testsupport::gaussian(3, rng, spread)));
    s.velocities.push_back(testsupport::gaussian(3, rng));
  }
  return s;
}

// Smooth field on R^3 used for convergence-order checks.
CustomField smooth_field() {
  return CustomField("smooth", [](double, const VectorXd& x) {
    return VectorXd(Vector3d(std::sin(x(1)) + 0.3 * x(2), std::cos(x(0)) * x(2), x(0) * x(1) - 0.5));
  });
}

}  // namespace

TEST_CASE("disk flow saturates at the boundary and then rotates") {
  const auto disk = ManifoldKernel::disk();
  const DiskRotExpandField f(0.3);
  const auto traj = projected_euler_flow(disk, f, v2(0.1, 0), 0.01, 2000);
  REQUIRE(traj.size() == 2001);
  double prev = 0.0;
  bool reached = false;
  for (const auto& x : traj) {
    CHECK(x.norm() >= prev - 1e-15);
    CHECK(residual_total(disk, x) <= 1e-9);
    prev = x.norm();
    if (std::abs(x.norm() - 1.0) <= 1e-9) reached = true;
  }
  CHECK(reached);
  // On the boundary only the rotation survives: the angle advances by ~dt.
  const VectorXd& a = traj[1990];
  const VectorXd& b = traj[2000];
  CHECK(std::abs(b.norm() - 1.0) <= 1e-12);
  const double dangle = std::atan2(a(0) * b(1) - a(1) * b(0), a.dot(b));
  CHECK(dangle == doctest::Approx(0.1).epsilon(1e-3));
}

TEST_CASE("constant zero field leaves every kernel at rest") {
  std::mt19937_64 rng(1);
  for (const auto& m : {ManifoldKernel::sphere(3), ManifoldKernel::so3(), ManifoldKernel::disk(), ManifoldKernel::se3()}) {
    const VectorXd x0 = random_point(m, rng);
    const ConstantField zero(VectorXd::Zero(m.ambient_dim()));
    const auto traj = projected_euler_flow(m, zero, x0, 0.1, 20);
    for (const auto& x : traj) CHECK((x - metric_project(m, x0)).norm() <= 1e-14);
  }
}

TEST_CASE("pure rotation on the disk returns after one period") {
  const auto traj = projected_euler_flow(ManifoldKernel::disk(), DiskRotExpandField(0.0), v2(1, 0), 1e-3, 6284);
  CHECK((traj.back() - v2(1, 0)).norm() <= 1e-2);
  // Projected Euler on the unit circle is exactly a rotation by atan(dt) per step.
  const double angle = 6284 * std::atan(1e-3);
  CHECK((traj.back() - v2(std::cos(angle), std::sin(angle))).norm() <= 1e-9);
}

TEST_CASE("projected disk flow stays bounded") {
  for (double alpha : {0.1, 0.3, 1.0}) {
    for (double dt : {1e-2, 3e-3}) {
      std::mt19937_64 rng(static_cast<std::uint64_t>(alpha * 100 + dt * 1e4));
      for (int s = 0; s < 5; ++s) {
        const auto traj = projected_euler_flow(ManifoldKernel::disk(), DiskRotExpandField(alpha),
                                               random_point(ManifoldKernel::disk(), rng), dt, 500);
        for (const auto& x : traj) CHECK(x.norm() <= 1.0 + 1e-12);
      }
    }
  }
}

TEST_CASE("disk field Lipschitz constant") {
  CHECK(DiskRotExpandField(0.3).lipschitz() == doctest::Approx(std::sqrt(1.09)).epsilon(1e-14));
  CHECK(DiskRotExpandField(0.3)(0.0, v2(1, 0)) == v2(0.3, 1));
}

TEST_CASE("sphere grid field at a node is the projected node vector") {
  const SphereGridField f(5);
  for (int i : {1, 17, 40, 62}) {
    for (int j : {0, 33, 127}) {
      const double th = f.theta_at(i), ph = f.phi_at(j);
      const Vector3d p(std::sin(th) * std::cos(ph), std::sin(th) * std::sin(ph), std::cos(th));
      CHECK(std::abs(f.node(i, j).norm() - 1.0) <= 1e-12);
      const VectorXd expect = tangent_project(ManifoldKernel::sphere(3), p, f.node(i, j));
      CHECK((sphere_field_eval(f, p) - expect).norm() <= 1e-10);
    }
  }
}

TEST_CASE("sphere grid field is tangent and Lipschitz") {
  const SphereGridField f(11);
  const auto s2 = ManifoldKernel::sphere(3);
  std::mt19937_64 rng(7);
  auto worst_ratio = [&](double sep) {
    double worst = 0.0;
    for (int k = 0; k < 10000; ++k) {
      const VectorXd p = random_point(s2, rng);
      const VectorXd q = metric_project(s2, p + testsupport::gaussian(3, rng, sep));
      const VectorXd fp = sphere_field_eval(f, p);
      CHECK(std::abs(fp.dot(p)) <= 1e-10);
      worst = std::max(worst, (fp - sphere_field_eval(f, q)).norm() / (p - q).norm());
    }
    return worst;
  };
  // Unit-normalized nodes turn sharply around the zeros every tangent field
  // on S^2 must have, so C is the max over a fitting set; fresh pairs, also
  // at 100x smaller separation, must stay within 3C.
  const double c = worst_ratio(1e-3);
  const double fresh = worst_ratio(1e-3);
  const double close = worst_ratio(1e-5);
  INFO("fitted C " << c << " fresh " << fresh << " close " << close);
  CHECK(fresh <= 3.0 * c);
  CHECK(close <= 3.0 * c);

  // Points on a tiny ring around each pole see nearly the same vector.
  for (double z : {1.0, -1.0}) {
    const VectorXd base = sphere_field_eval(f, Vector3d(0, 0, z));
    for (int k = 0; k < 16; ++k) {
      const double ph = 2 * kPi * k / 16;
      const VectorXd p = Vector3d(1e-3 * std::cos(ph), 1e-3 * std::sin(ph), z).normalized();
      CHECK((sphere_field_eval(f, p) - base).norm() <= 3.0 * c * 1e-3);
    }
  }
}

TEST_CASE("rk2 retraction step") {
  const SphereGridField f(3);
  std::mt19937_64 rng(4);
  const auto s2 = ManifoldKernel::sphere(3);
  for (int k = 0; k < 200; ++k) {
    const VectorXd p = random_point(s2, rng);
    CHECK(rk2_retraction_step(f, p, 0.0) == p);
    CHECK(std::abs(rk2_retraction_step(f, p, 0.05).norm() - 1.0) <= 1e-12);
  }
}

TEST_CASE("rk2 step against the exponential map has third-order local error") {
  std::mt19937_64 rng(5);
  const auto s2 = ManifoldKernel::sphere(3);
  for (int k = 0; k < 10; ++k) {
    const VectorXd p = random_point(s2, rng);
    const VectorXd v = tangent_project(s2, p, testsupport::gaussian(3, rng)).normalized();
    const ConstantField f(v);
    auto err = [&](double dt) { return (rk2_retraction_step(f, p, dt) - exp_map(s2, p, dt * v)).norm(); };
    const double ratio = err(0.02) / err(0.01);
    INFO("ratio " << ratio);
    CHECK(ratio >= 6.0);
    CHECK(ratio <= 10.0);
  }
}

TEST_CASE("step-size convergence against a fine reference") {
  const auto s2 = ManifoldKernel::sphere(3);
  const CustomField f = smooth_field();
  const VectorXd p0 = Vector3d(0.3, -0.5, 0.8).normalized();
  const double horizon = 0.5;
  auto euler_end = [&](int steps) { return projected_euler_flow(s2, f, p0, horizon / steps, steps).back(); };
  auto rk2_end = [&](int steps) { return rk2_sphere_flow(f, p0, horizon / steps, steps).back(); };

  const int base = 50;
  const VectorXd euler_ref = euler_end(16 * base);
  const double e1 = (euler_end(base) - euler_ref).norm();
  const double e2 = (euler_end(2 * base) - euler_ref).norm();
  INFO("euler ratio " << e1 / e2);
  CHECK(e1 / e2 >= 1.7);
  CHECK(e1 / e2 <= 2.6);

  const VectorXd rk_ref = rk2_end(16 * base);
  const double r1 = (rk2_end(base) - rk_ref).norm();
  const double r2 = (rk2_end(2 * base) - rk_ref).norm();
  INFO("rk2 ratio " << r1 / r2);
  CHECK(r1 / r2 >= 3.5);
  CHECK(r1 / r2 <= 8.5);
}

TEST_CASE("so3 trace field") {
  const VectorXd id = lie::flatten(lie::Mat3(lie::Mat3::Identity()));
  const So3TraceField f;
  const lie::Mat3 expect = 6.0 * lie::hat(Vector3d(1, 1, 1));
  CHECK((lie::to_mat3(f(0.0, id)) - expect).norm() <= 1e-14);

  std::mt19937_64 rng(8);
  const auto so3 = ManifoldKernel::so3();
  for (int k = 0; k < 5; ++k) {
    const VectorXd x0 = lie::flatten(testsupport::random_rotation(rng));
    const auto traj = so3_trace_flow(x0, 1e-3, 100);
    CHECK(traj.size() == 101);
    double worst = 0.0;
    for (const auto& x : traj) worst = std::max(worst, residual_total(so3, x));
    CHECK(worst <= 1e-9);

    VectorXd raw = x0;
    for (int i = 0; i < 100; ++i) raw += 1e-3 * f(0.0, raw);
    CHECK(residual_total(so3, raw) > 1e-6);
  }
}

TEST_CASE("Cucker-Smale weight") {
  CHECK(cucker_smale_weight(0.0) == 1.0);
  CHECK(cucker_smale_weight(kPi / 2) == doctest::Approx(std::cos(kPi / 4)));
  CHECK(cucker_smale_weight(kPi) == 0.0);
}

TEST_CASE("Cucker-Smale hand examples") {
  CuckerSmaleState one{{lie::exp_so3(Vector3d(0.2, 0.1, -0.4))}, {Vector3d(1, 2, 3)}};
  const auto r1 = cucker_smale_rhs(one, 1.0);
  CHECK(r1.velocity_rates[0].norm() <= 1e-15);
  CHECK((r1.rotation_rates[0] - one.rotations[0] * lie::hat(Vector3d(1, 2, 3))).norm() <= 1e-15);

  const lie::Mat3 r = lie::exp_so3(Vector3d(0.5, -0.3, 0.1));
  CuckerSmaleState same{{r, r}, {Vector3d(1, -1, 2), Vector3d(1, -1, 2)}};
  const auto r2 = cucker_smale_rhs(same, 1.0);
  CHECK(r2.velocity_rates[0].norm() <= 1e-15);
  CHECK(r2.velocity_rates[1].norm() <= 1e-15);

  const lie::Mat3 id = lie::Mat3::Identity();
  CuckerSmaleState pair{{id, id}, {Vector3d(1, 0, 0), Vector3d::Zero()}};
  const auto r3 = cucker_smale_rhs(pair, 1.0);
  // (kappa / N) * [phi_11 * 0 + phi_12 * (a_2 - a_1)] with N = 2.
  CHECK((r3.velocity_rates[0] - Vector3d(-0.5, 0, 0)).norm() <= 1e-15);
  CHECK((r3.velocity_rates[1] - Vector3d(0.5, 0, 0)).norm() <= 1e-15);
}

TEST_CASE("Cucker-Smale rhs agrees with an angle-axis oracle") {
  std::mt19937_64 rng(10);
  for (int trial = 0; trial < 50; ++trial) {
    const auto s = random_cs_state(6, rng, 0.8);
    const double kappa = testsupport::uniform(rng, 0.1, 3.0);
    const auto got = cucker_smale_rhs(s, kappa);
    const auto want = cs_oracle(s, kappa);
    for (std::size_t i = 0; i < want.size(); ++i) CHECK((got.velocity_rates[i] - want[i]).norm() <= 1e-12);
  }
}

TEST_CASE("Cucker-Smale integration keeps rotations feasible") {
  std::mt19937_64 rng(11);
  auto s = random_cs_state(10, rng, 1.0);
  const auto so3 = ManifoldKernel::so3();
  for (int step = 0; step < 100; ++step) {
    s = cucker_smale_step(s, 1.0, 0.01);
    for (const auto& r : s.rotations) CHECK(residual_total(so3, lie::flatten(r)) <= 1e-9);
  }
}

TEST_CASE("Cucker-Smale velocity disagreement is nonincreasing at theta = 0") {
  const lie::Mat3 id = lie::Mat3::Identity();
  CuckerSmaleState s{{id, id}, {Vector3d(1, 0.5, -0.2), Vector3d(-0.3, 0.2, 0.4)}};
  double prev = (s.velocities[0] - s.velocities[1]).norm();
  for (int step = 0; step < 1000; ++step) {
    s = cucker_smale_step(s, 1.0, 0.01);
    const double gap = (s.velocities[0] - s.velocities[1]).norm();
    CHECK(gap <= prev + 1e-15);
    prev = gap;
  }
}

TEST_CASE("backbone frames") {
  const lie::Mat4 t = frame_from_backbone({Vector3d(0, 1, 0), Vector3d(0, 0, 0), Vector3d(1, 0, 0)});
  CHECK(t == lie::Mat4::Identity());
  CHECK_THROWS_AS(frame_from_backbone({Vector3d(2, 0, 0), Vector3d(0, 0, 0), Vector3d(1, 0, 0)}), Error);
  try {
    frame_from_backbone({Vector3d(2, 0, 0), Vector3d(0, 0, 0), Vector3d(1, 0, 0)});
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::DegenerateTriad);
  }

  const auto se3 = ManifoldKernel::se3();
  const auto frames = synthetic_se3_chain(64, 3);
  CHECK(frames.size() == 64);
  for (const auto& f : frames) CHECK(residual_total(se3, f) <= 1e-10);
  // Consecutive C-alpha atoms sit about 3.8 A apart.
  for (std::size_t i = 0; i + 1 < frames.size(); ++i) {
    const double gap = (lie::to_mat4(frames[i]).block<3, 1>(0, 3) - lie::to_mat4(frames[i + 1]).block<3, 1>(0, 3)).norm();
    CHECK(gap == doctest::Approx(3.8).epsilon(0.05));
  }
  CHECK_THROWS_AS(synthetic_se3_chain(1, 0), Error);
}

TEST_CASE("backbone reader") {
  const std::string dir = testsupport::scratch_dir("backbone");
  const std::string path = dir + "/atoms.txt";
  {
    std::ofstream out(path);
    out << "# N CA C\n0 1 0  0 0 0  1 0 0\n1 2 3 4 5 6 7 8 10 # second\n";
  }
  const auto atoms = read_backbone_atoms(path);
  REQUIRE(atoms.size() == 2);
  CHECK(frame_from_backbone(atoms[0]) == lie::Mat4::Identity());
  CHECK(atoms[1].c == Vector3d(7, 8, 10));
}

TEST_CASE("make_pairs") {
  for (const std::string name : {"sphere", "so3", "disk", "cs", "protein", "circle"}) {
    GeneratorSpec g;
    g.name = name;
    const auto ds = make_pairs(g, 100, 42);
    const auto m = ds.kernel();
    CHECK(ds.size() == 100);
    double worst = 0.0;
    for (int i = 0; i < ds.size(); ++i) {
      worst = std::max(worst, residual_total(m, ds.x0.row(i).transpose()));
      worst = std::max(worst, residual_total(m, ds.xT.row(i).transpose()));
    }
    INFO(name << " worst residual " << worst);
    CHECK(worst <= 1e-9);

    const auto again = make_pairs(g, 100, 42);
    CHECK(again.x0 == ds.x0);
    CHECK(again.xT == ds.xT);
    CHECK(again.splits == ds.splits);
  }
  GeneratorSpec g;
  g.name = "sphere";
  g.horizon = 0.0;
  const auto still = make_pairs(g, 30, 1);
  CHECK(still.x0 == still.xT);
}

TEST_CASE("splits are disjoint and near 80/10/10") {
  const auto s = assign_splits(1000, 9);
  GeneratorSpec g;
  g.name = "disk";
  int counts[3] = {0, 0, 0};
  for (Split x : s) counts[static_cast<int>(x)]++;
  CHECK(counts[0] == 800);
  CHECK(counts[1] == 100);
  CHECK(counts[2] == 100);
  CHECK(assign_splits(1000, 9) == s);
  CHECK(assign_splits(1000, 10) != s);
}

TEST_CASE("dataset CSV round trip is exact") {
  GeneratorSpec g;
  g.name = "so3";
  const auto ds = make_pairs(g, 25, 7);
  const std::string dir = testsupport::scratch_dir("dataset");
  const std::string csv = dir + "/so3.csv";
  save_dataset(ds, csv, manifest_path_for(csv));
  const auto back = load_dataset(csv);
  CHECK(back.x0 == ds.x0);
  CHECK(back.xT == ds.xT);
  CHECK(back.splits == ds.splits);
  CHECK(back.generator.name == "so3");
  CHECK(back.seed == 7);
}
