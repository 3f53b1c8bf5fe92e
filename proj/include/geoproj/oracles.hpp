#pragma once

// Numerical checks of the approximation results: heat-kernel projection
// rate, the Gronwall bound for projected flows, the 2-epsilon bound for
// final projection, and the exponential-map representation.

#include <Eigen/Dense>

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include <json.hpp>

#include "geoproj/geometry.hpp"

namespace geoproj::oracle {

using Json = nlohmann::json;

enum class HeatManifold { Circle, Sphere };
HeatManifold parse_heat_manifold(const std::string& s);
std::string to_string(HeatManifold m);

/// grad_x log u_t(x) for the unit circle in R^2 or the unit sphere in R^3
/// with u_t the Gaussian (variance t) average over the uniform measure.
/// Circle: trapezoid rule with `nodes` points. Sphere: `nodes` controls the
/// polar resolution (Gauss-Legendre panels graded toward x's direction)
/// and the azimuthal trapezoid. Throws OutOfReach when dist(x, M) > 1.
Eigen::VectorXd heat_score_exact(HeatManifold m, const Eigen::VectorXd& x, double t, int nodes = 8192);

Eigen::VectorXd heat_project_exact(HeatManifold m, const Eigen::VectorXd& x);

struct RateFit {
  std::vector<double> t;
  std::vector<double> error;
  double slope = 0.0;
  double intercept = 0.0;
  double threshold = 0.45;
  bool pass = false;
  Json to_json() const;
};

/// Least-squares slope of log(error) against log(t).
void fit_rate(RateFit& fit);

/// `count` log-spaced points in [lo, hi].
std::vector<double> log_grid(double lo, double hi, int count);

RateFit verify_varadhan_rate(HeatManifold m, const Eigen::VectorXd& x, const std::vector<double>& t_grid,
                             int nodes = 8192);

struct GronwallConstants {
  double lipschitz = 0.0;  // L
  double sup_field = 0.0;  // U
  double reach = 1.0;      // alpha
  double horizon = 1.0;    // T
};

/// delta / L_a (exp(L_a T) - 1), L_a = L + 4 U^2 / alpha + 1.
double gronwall_bound_theorem(double delta, const GronwallConstants& c);
/// delta sqrt((exp(a T) - 1) / a), a = 2 L + 2 U^2 / alpha + 1.
double gronwall_bound_proof(double delta, const GronwallConstants& c);

struct BoundCheck {
  std::string name;
  double delta = 0.0;
  GronwallConstants constants;
  double measured = 0.0;
  double bound_theorem = 0.0;
  double bound_proof = 0.0;
  double bound = 0.0;  // the larger of the two
  bool pass = false;
  Json to_json() const;
};

struct GronwallOptions {
  double field_alpha = 0.3;  // DiskRotExpand expansion rate
  double dt = 1e-4;
  int samples = 200;
  std::uint64_t seed = 0;
};

/// Disk, F = DiskRotExpand, f = F + delta w with w(x) = (cos(x1 + x2),
/// sin(x1 + x2)). Both projected flows share the integrator; the sup over
/// sampled x0 of the endpoint gap is compared with the bound.
BoundCheck verify_gronwall_bound(double delta, double horizon, const GronwallOptions& opt = {});

/// Lipschitz and sup constants of the perturbed pair for a given delta.
GronwallConstants gronwall_constants(double delta, double horizon, double field_alpha);

enum class PerturbMode { Random, Radial, Tangential };
PerturbMode parse_perturb_mode(const std::string& s);
std::string to_string(PerturbMode m);

struct FaaCheck {
  std::string manifold;
  double eps = 0.0;
  std::string mode;
  int samples = 0;
  double max_error = 0.0;
  double bound = 0.0;
  bool pass = false;
  Json to_json() const;
};

/// F(x) sampled uniformly on M, f(x) = F(x) + eps u(x) with |u| = 1, and
/// max |F(x) - P_M(f(x))| compared with 2 eps + 1e-12.
FaaCheck verify_faa_2eps(const ManifoldKernel& m, double eps, PerturbMode mode = PerturbMode::Random,
                         int samples = 1000, std::uint64_t seed = 0);

struct ExpCheck {
  int grid = 0;
  double max_error = 0.0;
  double max_log_norm = 0.0;
  double tolerance = 1e-10;
  bool pass = false;
  Json to_json() const;
};

using SphereMap = std::function<Eigen::Vector3d(double, double)>;

/// Default smooth map [0,1]^2 -> S^2 in spherical coordinates about e3,
/// staying at least 0.5 rad away from -e3.
SphereMap smooth_sphere_map();

/// f(x) = log_p F(x) on a grid x grid lattice of [0,1]^2; checks
/// dist(F(x), exp_p f(x)) <= 1e-10 and |f(x)| <= pi - 0.1. Throws
/// AntipodeHit when some F(x) comes within 0.1 of -p.
ExpCheck verify_exp_representation(const Eigen::Vector3d& p, const SphereMap& f, int grid = 50);

}  // namespace geoproj::oracle
