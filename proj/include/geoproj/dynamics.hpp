#pragma once

// Vector fields, integrators and the synthetic dataset generators
// (sphere, SO(3), disk, Cucker-Smale on SO(3)^N, SE(3) backbone frames).

#include <Eigen/Dense>

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "geoproj/geometry.hpp"

namespace geoproj::dyn {

using Trajectory = std::vector<AmbientVector>;

class VectorField {
 public:
  virtual ~VectorField() = default;
  virtual AmbientVector operator()(double t, const AmbientVector& x) const = 0;
  virtual std::string name() const = 0;
};

class ConstantField final : public VectorField {
 public:
  explicit ConstantField(AmbientVector v) : v_(std::move(v)) {}
  AmbientVector operator()(double, const AmbientVector&) const override { return v_; }
  std::string name() const override { return "constant"; }

 private:
  AmbientVector v_;
};

/// F(x) = J x + alpha x on R^2, J the quarter-turn.
class DiskRotExpandField final : public VectorField {
 public:
  explicit DiskRotExpandField(double alpha) : alpha_(alpha) {}
  AmbientVector operator()(double t, const AmbientVector& x) const override;
  std::string name() const override { return "disk_rot_expand"; }
  double alpha() const noexcept { return alpha_; }
  /// Operator norm of J + alpha I, i.e. the Lipschitz constant.
  double lipschitz() const;

 private:
  double alpha_;
};

/// dX/dt = tr(X^2 + I) (E1 + E2 + E3) X on row-major R^9.
class So3TraceField final : public VectorField {
 public:
  AmbientVector operator()(double t, const AmbientVector& x) const override;
  std::string name() const override { return "so3_trace"; }
};

class CustomField final : public VectorField {
 public:
  using Fn = std::function<AmbientVector(double, const AmbientVector&)>;
  CustomField(std::string name, Fn fn) : name_(std::move(name)), fn_(std::move(fn)) {}
  AmbientVector operator()(double t, const AmbientVector& x) const override { return fn_(t, x); }
  std::string name() const override { return name_; }

 private:
  std::string name_;
  Fn fn_;
};

/// Smooth random unit-speed field on S^2 stored on a (theta, phi) grid.
///
/// The generating field W(p) = sum_m A_m cos(k_m . p + phase_m) has three
/// modes with integer wave vectors |k| entries <= 2 and amplitudes in
/// [-1, 1]; the stored vector at each node is its normalized tangential
/// part a d_theta r + b d_phi r. Evaluation interpolates the
/// Cartesian components bilinearly (periodic in phi, theta clamped to
/// [eps, pi - eps]) and projects onto the tangent plane.
class SphereGridField final : public VectorField {
 public:
  static constexpr int kThetaNodes = 64;
  static constexpr int kPhiNodes = 128;
  static constexpr double kPoleEps = 1e-4;

  explicit SphereGridField(std::uint64_t seed);

  AmbientVector operator()(double t, const AmbientVector& p) const override;
  std::string name() const override { return "sphere_grid"; }

  /// Interpolated ambient vector before the tangent projection.
  Eigen::Vector3d interpolate(const Eigen::Vector3d& p) const;
  /// Stored unit vector at grid node (i, j).
  Eigen::Vector3d node(int i, int j) const { return nodes_[static_cast<std::size_t>(i * kPhiNodes + j)]; }
  double theta_at(int i) const;
  double phi_at(int j) const;
  std::uint64_t seed() const noexcept { return seed_; }

 private:
  std::uint64_t seed_;
  std::vector<Eigen::Vector3d> nodes_;
};

AmbientVector sphere_field_eval(const SphereGridField& f, const AmbientVector& p);

/// x_{i+1} = P_M(x_i + dt F(t_i, x_i)); returns steps + 1 states.
Trajectory projected_euler_flow(const ManifoldKernel& m, const VectorField& f,
                                const AmbientVector& x0, double dt, int steps);

/// Explicit midpoint step with the radial retraction at the midpoint and at
/// the end. The field's ambient output is projected onto the tangent plane.
AmbientVector rk2_retraction_step(const VectorField& f, const AmbientVector& p, double dt,
                                  double t = 0.0);

Trajectory rk2_sphere_flow(const VectorField& f, const AmbientVector& p0, double dt, int steps);

/// Projected-Euler integration of So3TraceField with SVD projection.
Trajectory so3_trace_flow(const AmbientVector& x0, double dt, int steps);

// ---------------------------------------------------------------------------
// Cucker-Smale alignment on SO(3)^N.

struct CuckerSmaleState {
  std::vector<lie::Mat3> rotations;
  std::vector<lie::Vec3> velocities;  // body frame
};

struct CuckerSmaleRates {
  std::vector<lie::Mat3> rotation_rates;
  std::vector<lie::Vec3> velocity_rates;
};

/// phi(theta) = cos(theta / 2), zero once theta >= pi - 1e-6.
double cucker_smale_weight(double theta);

CuckerSmaleRates cucker_smale_rhs(const CuckerSmaleState& s, double kappa);

/// R_i <- exp(dt hat(R_i a_i)) R_i, a_i <- a_i + dt da_i.
CuckerSmaleState cucker_smale_step(const CuckerSmaleState& s, double kappa, double dt);

/// Deterministic initial body velocity used by the dataset generator:
/// a_i = vee(skew(R_i)).
lie::Vec3 cucker_smale_initial_velocity(const lie::Mat3& r);

// ---------------------------------------------------------------------------
// SE(3) backbone frames.

struct BackboneAtoms {
  Eigen::Vector3d n;
  Eigen::Vector3d ca;
  Eigen::Vector3d c;
};

/// Gram-Schmidt frame of the N-CA-C triad: columns e1, e2, e1 x e2, origin CA.
lie::Mat4 frame_from_backbone(const BackboneAtoms& atoms);

/// Synthetic backbone with ideal bond lengths/angles and random
/// helix/sheet torsions, placed under a random rigid motion.
std::vector<BackboneAtoms> synthetic_backbone(int n_residues, std::uint64_t seed);

/// Row-major SE(3) frames of a synthetic backbone. n_residues >= 2.
std::vector<AmbientVector> synthetic_se3_chain(int n_residues, std::uint64_t seed);

/// Whitespace-separated coordinates, nine numbers (N, CA, C) per residue,
/// '#' starts a comment.
std::vector<BackboneAtoms> read_backbone_atoms(const std::string& path);

// ---------------------------------------------------------------------------
// Datasets.

enum class Split { Train, Val, Test };
std::string to_string(Split s);
Split parse_split(const std::string& s);

struct GeneratorSpec {
  std::string name;          // sphere | so3 | disk | cs | protein | circle
  double horizon = -1.0;     // < 0 selects the generator default
  double dt = -1.0;          // <= 0 selects the generator default
  double alpha = 0.3;        // disk expansion rate
  double kappa = 1.0;        // Cucker-Smale coupling
  int agents = 10;           // Cucker-Smale N
  int chain_length = 64;     // protein residues per synthetic chain
  std::uint64_t field_seed = 0;  // sphere grid field

  /// Fills default horizon/dt for the named generator.
  GeneratorSpec resolved() const;
  ManifoldKernel kernel() const;
};

struct TrajectoryDataset {
  GeneratorSpec generator;
  std::uint64_t seed = 0;
  Eigen::MatrixXd x0;  // n x d
  Eigen::MatrixXd xT;  // n x d
  std::vector<Split> splits;

  int size() const { return static_cast<int>(x0.rows()); }
  int dim() const { return static_cast<int>(x0.cols()); }
  ManifoldKernel kernel() const { return generator.kernel(); }
  /// Row indices belonging to one split, ascending.
  std::vector<int> indices(Split s) const;
};

/// Splits n items 80/10/10 by ranking a seeded hash of each index.
std::vector<Split> assign_splits(int n, std::uint64_t seed);

/// Endpoint map x0 -> xT of one generator (not defined for protein/circle,
/// which are not flows of a state).
AmbientVector evolve(const GeneratorSpec& g, const AmbientVector& x0);

TrajectoryDataset make_pairs(const GeneratorSpec& g, int n_trajectories, std::uint64_t seed);

/// CSV with header x0_0..x0_{d-1},xT_0..xT_{d-1},split plus the JSON manifest.
void save_dataset(const TrajectoryDataset& ds, const std::string& csv_path,
                  const std::string& manifest_path);
/// Reads the CSV and, when present, the sibling manifest (same stem, .json).
TrajectoryDataset load_dataset(const std::string& csv_path);

std::string manifest_path_for(const std::string& csv_path);

}  // namespace geoproj::dyn
