#pragma once

// Fuzzed invariants of the constraint-set kernels, shared by the unit tests
// and the acceptance runner.

#include <algorithm>
#include <numbers>
#include <string>
#include <vector>

#include "geoproj/geometry.hpp"
#include "support.hpp"

namespace testsupport {

struct PropertyResult {
  std::string kernel;
  std::string property;
  int samples = 0;
  double worst = 0.0;
  double tolerance = 0.0;
  bool pass() const { return worst <= tolerance; }
};

inline std::vector<geoproj::ManifoldKernel> property_kernels() {
  using geoproj::ManifoldKernel;
  return {ManifoldKernel::sphere(2),
          ManifoldKernel::sphere(3),
          ManifoldKernel::sphere(6),
          ManifoldKernel::so3(),
          ManifoldKernel::se3(),
          ManifoldKernel::disk(),
          ManifoldKernel::product({ManifoldKernel::sphere(3), ManifoldKernel::so3()})};
}

// A point near M within the regime where the projection is unique.
inline Eigen::VectorXd near_point(const geoproj::ManifoldKernel& m, std::mt19937_64& rng) {
  using geoproj::KernelKind;
  switch (m.kind()) {
    case KernelKind::Sphere: {
      Eigen::VectorXd g = gaussian(m.ambient_dim(), rng);
      return g.normalized() * uniform(rng, 0.2, 1.8);
    }
    case KernelKind::Disk:
      return Eigen::Vector2d(uniform(rng, -2, 2), uniform(rng, -2, 2));
    case KernelKind::SO3: {
      Eigen::Matrix3d e = Eigen::Matrix3d::NullaryExpr([&] { return uniform(rng, -1, 1); });
      e *= uniform(rng, 0.0, 0.5) / e.norm();
      return flat_rowmajor(random_rotation(rng) + e);
    }
    case KernelKind::SE3: {
      Eigen::Matrix4d g = Eigen::Matrix4d::Zero();
      Eigen::Matrix3d e = Eigen::Matrix3d::NullaryExpr([&] { return uniform(rng, -1, 1); });
      e *= uniform(rng, 0.0, 0.5) / e.norm();
      g.topLeftCorner<3, 3>() = random_rotation(rng) + e;
      g.block<3, 1>(0, 3) = gaussian(3, rng, 2.0);
      g.block<1, 4>(3, 0) = gaussian(4, rng, 0.3).transpose();
      return flat_rowmajor(g);
    }
    case KernelKind::Product: {
      Eigen::VectorXd y(m.ambient_dim());
      const auto off = m.factor_offsets();
      for (std::size_t i = 0; i < m.factors().size(); ++i) {
        y.segment(off[i], m.factors()[i].ambient_dim()) = near_point(m.factors()[i], rng);
      }
      return y;
    }
  }
  return {};
}

// Sup-norm violation of the tangent-cone condition for v at x, computed
// directly from the matrix structure of each factor.
inline double tangent_violation(const geoproj::ManifoldKernel& m, const Eigen::VectorXd& x, const Eigen::VectorXd& v) {
  using geoproj::KernelKind;
  switch (m.kind()) {
    case KernelKind::Sphere: return std::abs(x.dot(v));
    case KernelKind::Disk:
      if (std::abs(x.norm() - 1.0) <= geoproj::kDiskBoundaryTol) return std::max(0.0, x.dot(v));
      return 0.0;
    case KernelKind::SO3: {
      const Eigen::Matrix3d a = mat3_rowmajor(v) * mat3_rowmajor(x).transpose();
      return (a + a.transpose()).cwiseAbs().maxCoeff();
    }
    case KernelKind::SE3: {
      const Eigen::Matrix4d xi = mat4_rowmajor(v) * mat4_rowmajor(x).inverse();
      const Eigen::Matrix3d a = xi.topLeftCorner<3, 3>();
      return std::max((a + a.transpose()).cwiseAbs().maxCoeff(), xi.row(3).cwiseAbs().maxCoeff());
    }
    case KernelKind::Product: {
      double w = 0.0;
      const auto off = m.factor_offsets();
      for (std::size_t i = 0; i < m.factors().size(); ++i) {
        const int d = m.factors()[i].ambient_dim();
        w = std::max(w, tangent_violation(m.factors()[i], x.segment(off[i], d), v.segment(off[i], d)));
      }
      return w;
    }
  }
  return 0.0;
}

inline std::vector<PropertyResult> run_geometry_properties(int samples, std::uint64_t seed) {
  using namespace geoproj;
  std::vector<PropertyResult> out;
  std::mt19937_64 rng(seed);

  for (const auto& m : property_kernels()) {
    const std::string name = m.name();
    PropertyResult idem{name, "idempotence", samples, 0.0, 1e-12};
    PropertyResult nonexp{name, "residual_nonexpansive", samples, 0.0, 1e-12};
    PropertyResult feas{name, "projection_feasible", samples, 0.0,
                        (m.kind() == KernelKind::SO3 || m.kind() == KernelKind::SE3 || m.kind() == KernelKind::Product)
                            ? 1e-9
                            : 1e-12};
    PropertyResult tang{name, "tangency", samples, 0.0, 1e-12};
    for (int s = 0; s < samples; ++s) {
      const Eigen::VectorXd y = near_point(m, rng);
      const Eigen::VectorXd p = metric_project(m, y);
      idem.worst = std::max(idem.worst, (metric_project(m, p) - p).cwiseAbs().maxCoeff());
      nonexp.worst = std::max(nonexp.worst, residual_total(m, p) - residual_total(m, y));
      feas.worst = std::max(feas.worst, residual_total(m, p));

      const Eigen::VectorXd x = random_point(m, rng);
      Eigen::VectorXd xb = x;
      if (m.kind() == KernelKind::Disk && s % 2 == 0) xb = x.normalized();
      const Eigen::VectorXd u = gaussian(m.ambient_dim(), rng);
      tang.worst = std::max(tang.worst, tangent_violation(m, xb, tangent_project(m, xb, u)));
    }
    out.push_back(idem);
    out.push_back(nonexp);
    out.push_back(feas);
    out.push_back(tang);

    if (m.has_exp()) {
      PropertyResult ex{name, "exp_feasible", samples, 0.0, 1e-10};
      for (int s = 0; s < samples; ++s) {
        const Eigen::VectorXd x = random_point(m, rng);
        Eigen::VectorXd v = tangent_project(m, x, gaussian(m.ambient_dim(), rng));
        if (v.norm() > 0) v *= uniform(rng, 0.0, std::numbers::pi) / v.norm();
        ex.worst = std::max(ex.worst, residual_total(m, exp_map(m, x, v)));
      }
      out.push_back(ex);
    }

    if (m.kind() == KernelKind::Sphere || m.kind() == KernelKind::Disk) {
      const int probes = std::min(samples, 200);
      PropertyResult nearest{name, "nearest_point", probes, 0.0, 1e-12};
      std::vector<Eigen::VectorXd> zs;
      for (int k = 0; k < 1000; ++k) zs.push_back(random_point(m, rng));
      for (int s = 0; s < probes; ++s) {
        const Eigen::VectorXd y = near_point(m, rng);
        const double dp = (y - metric_project(m, y)).norm();
        for (const auto& z : zs) nearest.worst = std::max(nearest.worst, dp - (y - z).norm());
      }
      out.push_back(nearest);
    }

    if (m.kind() == KernelKind::Sphere) {
      PropertyResult rt{name, "log_exp_roundtrip", samples, 0.0, 1e-10};
      for (int s = 0; s < samples; ++s) {
        const Eigen::VectorXd p = random_point(m, rng);
        const Eigen::VectorXd q = random_point(m, rng);
        if (sphere_distance(p, q) > std::numbers::pi - 0.1) continue;
        rt.worst = std::max(rt.worst, (exp_map(m, p, sphere_log(p, q)) - q).norm());
      }
      out.push_back(rt);
    }
    if (m.kind() == KernelKind::SO3) {
      PropertyResult rt{name, "log_exp_roundtrip", samples, 0.0, 1e-10};
      for (int s = 0; s < samples; ++s) {
        const Eigen::Matrix3d r = random_rotation(rng);
        const auto d = lie::geodesic_distance_so3_unchecked(Eigen::Matrix3d::Identity(), r);
        if (d.theta > std::numbers::pi - 0.1) continue;
        rt.worst = std::max(rt.worst, (lie::exp_so3(lie::log_so3(r)) - r).norm());
      }
      out.push_back(rt);
    }
  }
  return out;
}

}  // namespace testsupport
