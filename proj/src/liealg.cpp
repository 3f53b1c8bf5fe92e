#include "geoproj/liealg.hpp"

#include <cmath>
#include <numbers>

#include "geoproj/error.hpp"
#include "geoproj/geometry.hpp"

namespace geoproj::lie {

namespace {

constexpr double kCutLocusTol = 1e-9;

// sin(t)/t and (1 - cos t)/t^2 with a series branch near zero.
void rodrigues_coeffs(double theta, double& a, double& b) {
  if (theta < kSmallAngle) {
    const double t2 = theta * theta;
    a = 1.0 - t2 / 6.0;
    b = 0.5 - t2 / 24.0;
  } else {
    a = std::sin(theta) / theta;
    b = (1.0 - std::cos(theta)) / (theta * theta);
  }
}

}  // namespace

Mat3 hat(const Vec3& c) {
  Mat3 k;
  k << 0.0, -c.z(), c.y(),
       c.z(), 0.0, -c.x(),
       -c.y(), c.x(), 0.0;
  return k;
}

Vec3 vee(const Mat3& s) { return Vec3(s(2, 1), s(0, 2), s(1, 0)); }

Mat3 so3_basis(int i) { return hat(Vec3::Unit(i)); }

Mat3 exp_so3(const Vec3& c) {
  const double theta = c.norm();
  double a = 0.0;
  double b = 0.0;
  rodrigues_coeffs(theta, a, b);
  const Mat3 k = hat(c);
  return Mat3::Identity() + a * k + b * (k * k);
}

Mat3 so3_left_jacobian(const Vec3& c) {
  const double theta = c.norm();
  double b = 0.0;
  double cc = 0.0;
  if (theta < kSmallAngle) {
    const double t2 = theta * theta;
    b = 0.5 - t2 / 24.0;
    cc = 1.0 / 6.0 - t2 / 120.0;
  } else {
    const double t2 = theta * theta;
    b = (1.0 - std::cos(theta)) / t2;
    cc = (theta - std::sin(theta)) / (t2 * theta);
  }
  const Mat3 k = hat(c);
  return Mat3::Identity() + b * k + cc * (k * k);
}

Mat4 exp_se3(const Vec3& c, const Vec3& u) {
  Mat4 g = Mat4::Identity();
  g.topLeftCorner<3, 3>() = exp_so3(c);
  g.topRightCorner<3, 1>() = so3_left_jacobian(c) * u;
  return g;
}

Eigen::MatrixXd expm_taylor(const Eigen::MatrixXd& a) {
  const auto n = a.rows();
  const double norm = a.cwiseAbs().colwise().sum().maxCoeff();
  int squarings = 0;
  if (norm > 0.5) squarings = static_cast<int>(std::ceil(std::log2(norm / 0.5)));
  const Eigen::MatrixXd scaled = a / std::ldexp(1.0, squarings);

  Eigen::MatrixXd result = Eigen::MatrixXd::Identity(n, n);
  Eigen::MatrixXd term = Eigen::MatrixXd::Identity(n, n);
  for (int k = 1; k <= 12; ++k) {
    term = term * scaled / static_cast<double>(k);
    result += term;
  }
  for (int s = 0; s < squarings; ++s) result = result * result;
  return result;
}

namespace {

// theta in [0, pi] and the unit axis, robust across the whole range.
So3Distance rotation_angle_axis(const Mat3& r) {
  So3Distance out;
  const Vec3 w = 0.5 * vee(r - r.transpose());  // sin(theta) * axis
  const double s = w.norm();
  const double c = 0.5 * (r.trace() - 1.0);
  out.theta = std::atan2(s, c);
  if (out.theta == 0.0) return out;

  if (c > 0.0) {
    out.axis = w / s;
  } else {
    // (R + R^T)/2 = cos(theta) I + (1 - cos(theta)) n n^T
    const Mat3 sym = 0.5 * (r + r.transpose()) - c * Mat3::Identity();
    int col = 0;
    sym.diagonal().maxCoeff(&col);
    Vec3 n = sym.col(col);
    n.normalize();
    if (n.dot(w) < 0.0) n = -n;
    out.axis = n;
  }
  out.axis_defined = true;
  return out;
}

}  // namespace

So3Distance geodesic_distance_so3_unchecked(const Mat3& r1, const Mat3& r2) {
  So3Distance d = rotation_angle_axis(r1.transpose() * r2);
  if (d.theta >= std::numbers::pi - kCutLocusTol) {
    d.theta = std::numbers::pi;
    d.axis_defined = false;
  }
  return d;
}

So3Distance geodesic_distance_so3(const Mat3& r1, const Mat3& r2) {
  const ManifoldKernel so3 = ManifoldKernel::so3();
  if (!on_manifold(so3, flatten(r1)) || !on_manifold(so3, flatten(r2))) {
    throw Error(ErrorCode::OffManifoldBase, "geodesic_distance_so3 expects rotations");
  }
  So3Distance d = rotation_angle_axis(r1.transpose() * r2);
  if (d.theta >= std::numbers::pi - kCutLocusTol) {
    throw Error(ErrorCode::CutLocus, "rotation angle is pi; the logarithm is multivalued");
  }
  return d;
}

Vec3 log_so3(const Mat3& r) {
  const So3Distance d = rotation_angle_axis(r);
  if (d.theta >= std::numbers::pi - kCutLocusTol) {
    throw Error(ErrorCode::CutLocus, "rotation angle is pi; the logarithm is multivalued");
  }
  if (!d.axis_defined) return Vec3::Zero();
  return d.theta * d.axis;
}

Eigen::VectorXd lie_step(const Eigen::VectorXd& g, const LieCoords& coords, double dt) {
  if (const auto* so3c = std::get_if<So3Coords>(&coords)) {
    if (g.size() != 9 || !on_manifold(ManifoldKernel::so3(), g)) {
      throw Error(ErrorCode::OffManifoldBase, "lie_step: base point is not in SO(3)");
    }
    if (dt == 0.0) return g;
    return flatten(Mat3(exp_so3(dt * so3c->c) * to_mat3(g)));
  }
  const auto& se3c = std::get<Se3Coords>(coords);
  if (g.size() != 16 || !on_manifold(ManifoldKernel::se3(), g)) {
    throw Error(ErrorCode::OffManifoldBase, "lie_step: base point is not in SE(3)");
  }
  if (dt == 0.0) return g;
  return flatten(Mat4(exp_se3(dt * se3c.c, dt * se3c.u) * to_mat4(g)));
}

Mat3 to_mat3(const Eigen::Ref<const Eigen::VectorXd>& flat) {
  return Eigen::Map<const RowMat3>(flat.data());
}

Mat4 to_mat4(const Eigen::Ref<const Eigen::VectorXd>& flat) {
  return Eigen::Map<const RowMat4>(flat.data());
}

Eigen::VectorXd flatten(const Mat3& m) {
  Eigen::VectorXd out(9);
  Eigen::Map<RowMat3>(out.data()) = m;
  return out;
}

Eigen::VectorXd flatten(const Mat4& m) {
  Eigen::VectorXd out(16);
  Eigen::Map<RowMat4>(out.data()) = m;
  return out;
}

}  // namespace geoproj::lie
