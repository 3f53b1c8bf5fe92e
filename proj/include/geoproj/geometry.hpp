#pragma once

// Constraint-set kernels: spheres, SO(3), SE(3), the closed unit disk and
// finite products of those. Every kernel works on flat ambient vectors.

#include <Eigen/Dense>

#include <cstdint>
#include <random>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "geoproj/liealg.hpp"

namespace geoproj {

using AmbientVector = Eigen::VectorXd;

/// Precondition tolerance for "x lies on M".
inline constexpr double kOnManifoldTol = 1e-8;
/// |‖x‖ - 1| below this puts a disk point on the boundary.
inline constexpr double kDiskBoundaryTol = 1e-10;

enum class KernelKind { Sphere, SO3, SE3, Disk, Product };

class ManifoldKernel {
 public:
  static ManifoldKernel sphere(int ambient_dim);
  static ManifoldKernel so3();
  static ManifoldKernel se3();
  static ManifoldKernel disk();
  static ManifoldKernel product(std::vector<ManifoldKernel> factors);
  /// M x M x ... x M (n copies).
  static ManifoldKernel power(const ManifoldKernel& factor, int n);

  /// Parses "sphere:3", "circle", "so3", "se3", "disk", "so3^10" and
  /// "product(sphere:3,so3)". Inverse of name().
  static ManifoldKernel parse(std::string_view text);

  KernelKind kind() const noexcept { return kind_; }
  int ambient_dim() const noexcept { return ambient_dim_; }
  int intrinsic_dim() const noexcept { return intrinsic_dim_; }
  /// Width of the coordinate vector an Exp head must produce: intrinsic
  /// dimension for groups, ambient dimension (projected onto the tangent
  /// space afterwards) for spheres.
  int exp_coord_dim() const;
  bool has_exp() const;
  bool is_group() const;
  std::string name() const;

  const std::vector<ManifoldKernel>& factors() const noexcept { return factors_; }
  /// Offsets of each factor inside the ambient vector (products only).
  std::vector<int> factor_offsets() const;

  bool operator==(const ManifoldKernel& other) const;

 private:
  ManifoldKernel(KernelKind kind, int ambient, int intrinsic)
      : kind_(kind), ambient_dim_(ambient), intrinsic_dim_(intrinsic) {}

  KernelKind kind_;
  int ambient_dim_;
  int intrinsic_dim_;
  std::vector<ManifoldKernel> factors_;
};

struct ConstraintResidual {
  double total = 0.0;
  std::vector<std::pair<std::string, double>> parts;

  double part(std::string_view name) const;
};

AmbientVector metric_project(const ManifoldKernel& m, const AmbientVector& y);

AmbientVector tangent_project(const ManifoldKernel& m, const AmbientVector& x,
                              const AmbientVector& u);

AmbientVector exp_map(const ManifoldKernel& m, const AmbientVector& x,
                      const AmbientVector& v);

ConstraintResidual constraint_residual(const ManifoldKernel& m, const AmbientVector& y);

/// Fast path for the scalar total only.
double residual_total(const ManifoldKernel& m, const AmbientVector& y);

bool on_manifold(const ManifoldKernel& m, const AmbientVector& x,
                 double tol = kOnManifoldTol);

/// True when v lies in T_M(x) within tol (tangent cone for the disk).
bool in_tangent_cone(const ManifoldKernel& m, const AmbientVector& x,
                     const AmbientVector& v, double tol = kOnManifoldTol);

AmbientVector random_point(const ManifoldKernel& m, std::uint64_t seed);
AmbientVector random_point(const ManifoldKernel& m, std::mt19937_64& rng);

/// Minimizing geodesic length on a sphere, accurate for tiny angles.
double sphere_distance(const AmbientVector& a, const AmbientVector& b);

/// Minimizing logarithm on a sphere: the tangent vector at p of length
/// sphere_distance(p, q) pointing to q. Throws CutLocus for q = -p.
AmbientVector sphere_log(const AmbientVector& p, const AmbientVector& q);

/// Frobenius-nearest rotation U diag(1, 1, det(UV^T)) V^T.
lie::Mat3 nearest_rotation(const lie::Mat3& a);

/// SplitMix64 mixing step used to derive independent seeds.
std::uint64_t mix_seed(std::uint64_t x) noexcept;

}  // namespace geoproj
