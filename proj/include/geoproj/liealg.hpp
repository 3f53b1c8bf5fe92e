#pragma once

// so(3) / se(3) coordinates, hat/vee maps and closed-form exponentials.
//
// Matrices that live in an ambient vector are stored row-major: a 3x3
// rotation is R^9, a 4x4 rigid transform is R^16.

#include <Eigen/Dense>

#include <variant>

namespace geoproj::lie {

using Mat3 = Eigen::Matrix3d;
using Mat4 = Eigen::Matrix4d;
using Vec3 = Eigen::Vector3d;
using RowMat3 = Eigen::Matrix<double, 3, 3, Eigen::RowMajor>;
using RowMat4 = Eigen::Matrix<double, 4, 4, Eigen::RowMajor>;

/// Coefficients in the basis (E1, E2, E3) of so(3).
struct So3Coords {
  Vec3 c = Vec3::Zero();
};

/// Rotation coefficients c (basis E_i embedded top-left) and translation
/// coefficients u (basis T_i) of se(3).
struct Se3Coords {
  Vec3 c = Vec3::Zero();
  Vec3 u = Vec3::Zero();
};

using LieCoords = std::variant<So3Coords, Se3Coords>;

/// Rodrigues / V-matrix series cut-over.
inline constexpr double kSmallAngle = 1e-6;

Mat3 hat(const Vec3& c);
Vec3 vee(const Mat3& skew);

/// Basis element E_i (i in 0..2), identical to hat(unit_i).
Mat3 so3_basis(int i);

Mat3 exp_so3(const Vec3& c);
/// [[exp_so3(c), V(c) u], [0, 1]]
Mat4 exp_se3(const Vec3& c, const Vec3& u);

/// Left Jacobian V(c) = I + (1 - cos t)/t^2 K + (t - sin t)/t^3 K^2.
Mat3 so3_left_jacobian(const Vec3& c);

/// Scaling-and-squaring Taylor exponential (degree 12, squares until the
/// scaled 1-norm is <= 0.5). Works for any square matrix.
Eigen::MatrixXd expm_taylor(const Eigen::MatrixXd& a);

/// Principal logarithm of a rotation: theta * axis with theta in [0, pi).
/// Throws CutLocus within 1e-9 of pi.
Vec3 log_so3(const Mat3& r);

struct So3Distance {
  double theta = 0.0;
  Vec3 axis = Vec3::Zero();
  /// False when theta == 0 (every axis works).
  bool axis_defined = false;
};

/// theta = ||log(R1^T R2)||. Throws CutLocus when theta is within 1e-9 of pi.
So3Distance geodesic_distance_so3(const Mat3& r1, const Mat3& r2);

/// Same as geodesic_distance_so3 but never throws: near the cut locus it
/// returns theta = pi with axis_defined = false.
So3Distance geodesic_distance_so3_unchecked(const Mat3& r1, const Mat3& r2);

/// g+ = exp(dt * xi) * g with xi built from the coordinates. g is R^9 for
/// So3Coords and R^16 for Se3Coords; it must lie on the group within 1e-8.
Eigen::VectorXd lie_step(const Eigen::VectorXd& g, const LieCoords& coords, double dt);

// Row-major flattening helpers.
Mat3 to_mat3(const Eigen::Ref<const Eigen::VectorXd>& flat);
Mat4 to_mat4(const Eigen::Ref<const Eigen::VectorXd>& flat);
Eigen::VectorXd flatten(const Mat3& m);
Eigen::VectorXd flatten(const Mat4& m);

}  // namespace geoproj::lie
