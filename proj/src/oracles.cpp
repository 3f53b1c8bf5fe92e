#include "geoproj/oracles.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>

#include "geoproj/dynamics.hpp"
#include "geoproj/error.hpp"

namespace geoproj::oracle {

namespace {

constexpr double kPi = std::numbers::pi;

// Gauss-Legendre nodes and weights on [-1, 1].
void gauss_legendre(int n, std::vector<double>& x, std::vector<double>& w) {
  x.assign(static_cast<std::size_t>(n), 0.0);
  w.assign(static_cast<std::size_t>(n), 0.0);
  for (int i = 0; i < (n + 1) / 2; ++i) {
    double z = std::cos(kPi * (i + 0.75) / (n + 0.5));
    double dp = 0.0;
    for (int it = 0; it < 100; ++it) {
      double p0 = 1.0, p1 = z;
      for (int k = 2; k <= n; ++k) {
        const double p2 = ((2.0 * k - 1.0) * z * p1 - (k - 1.0) * p0) / k;
        p0 = p1;
        p1 = p2;
      }
      dp = n * (z * p1 - p0) / (z * z - 1.0);
      const double dz = p1 / dp;
      z -= dz;
      if (std::abs(dz) < 1e-16) break;
    }
    x[static_cast<std::size_t>(i)] = -z;
    x[static_cast<std::size_t>(n - 1 - i)] = z;
    w[static_cast<std::size_t>(i)] = w[static_cast<std::size_t>(n - 1 - i)] = 2.0 / ((1.0 - z * z) * dp * dp);
  }
}

void check_reach(HeatManifold m, const Eigen::VectorXd& x) {
  const int d = m == HeatManifold::Circle ? 2 : 3;
  if (x.size() != d) throw Error(ErrorCode::DimensionMismatch, "heat score: expected a point in R^" + std::to_string(d));
  if (!x.allFinite()) throw Error(ErrorCode::Config, "heat score: non-finite point");
  if (std::abs(x.norm() - 1.0) > 1.0) throw Error(ErrorCode::OutOfReach, "point is farther than the reach from " + to_string(m));
}

// The quadratures below return mean(y) - x/|x| under the weights
// exp(x.y / t). The radial part is accumulated as the weighted mean of
// 1 - cos a = 2 sin^2(a/2), which keeps full relative precision as t -> 0
// where the score divides the offset by t.

Eigen::VectorXd circle_offset(const Eigen::Vector2d& x, double t, int nodes) {
  const double r = x.norm();
  const Eigen::Vector2d e1 = x / r;
  const Eigen::Vector2d e2(-e1(1), e1(0));
  double z = 0.0, radial = 0.0, across = 0.0;
  for (int j = 0; j < nodes; ++j) {
    const double a = 2.0 * kPi * j / nodes;
    const double s = std::sin(0.5 * a);
    const double w = std::exp(-2.0 * r * s * s / t);  // exp(r (cos a - 1) / t)
    z += w;
    radial += w * 2.0 * s * s;
    across += w * std::sin(a);
  }
  return (-radial * e1 + across * e2) / z;
}

Eigen::VectorXd sphere_offset(const Eigen::Vector3d& x, double t, int nodes) {
  const double r = x.norm();
  // Orthonormal frame with e3 along x.
  const Eigen::Vector3d e3 = x / r;
  const Eigen::Vector3d helper = std::abs(e3(0)) < 0.9 ? Eigen::Vector3d::UnitX() : Eigen::Vector3d::UnitY();
  const Eigen::Vector3d e1 = (helper - helper.dot(e3) * e3).normalized();
  const Eigen::Vector3d e2 = e3.cross(e1);

  // Polar panels: geometric edges scaled by the concentration width.
  const double width = std::sqrt(t / r);
  std::vector<double> edges{0.0};
  for (double e = 0.25 * width; e < kPi; e *= 2.0) edges.push_back(e);
  edges.push_back(kPi);
  const int order = std::max(16, nodes / 256);
  const int n_phi = std::max(16, nodes / 128);
  std::vector<double> gx, gw;
  gauss_legendre(order, gx, gw);

  double z = 0.0, radial = 0.0, c1 = 0.0, c2 = 0.0;
  for (std::size_t p = 0; p + 1 < edges.size(); ++p) {
    const double lo = edges[p], hi = edges[p + 1];
    for (int k = 0; k < order; ++k) {
      const double th = 0.5 * (hi - lo) * gx[static_cast<std::size_t>(k)] + 0.5 * (hi + lo);
      const double s = std::sin(0.5 * th);
      const double st = std::sin(th);
      const double w_th = 0.5 * (hi - lo) * gw[static_cast<std::size_t>(k)] * st * std::exp(-2.0 * r * s * s / t);
      if (w_th == 0.0) continue;
      for (int j = 0; j < n_phi; ++j) {
        const double ph = 2.0 * kPi * j / n_phi;
        const double w = w_th / n_phi;
        z += w;
        radial += w * 2.0 * s * s;
        c1 += w * st * std::cos(ph);
        c2 += w * st * std::sin(ph);
      }
    }
  }
  return (c1 * e1 + c2 * e2 - radial * e3) / z;
}

}  // namespace

HeatManifold parse_heat_manifold(const std::string& s) {
  if (s == "circle") return HeatManifold::Circle;
  if (s == "sphere") return HeatManifold::Sphere;
  throw Error(ErrorCode::Config, "heat manifold must be circle or sphere, got '" + s + "'");
}

std::string to_string(HeatManifold m) { return m == HeatManifold::Circle ? "circle" : "sphere"; }

Eigen::VectorXd heat_score_exact(HeatManifold m, const Eigen::VectorXd& x, double t, int nodes) {
  if (!(t > 0.0)) throw Error(ErrorCode::Config, "heat score: t must be positive");
  if (nodes < 8) throw Error(ErrorCode::Config, "heat score: too few quadrature nodes");
  check_reach(m, x);
  if (x.norm() == 0.0) return Eigen::VectorXd::Zero(x.size());
  const double r = x.norm();
  const Eigen::VectorXd offset = m == HeatManifold::Circle ? circle_offset(x, t, nodes) : sphere_offset(x, t, nodes);
  return ((1.0 - r) / r * x + offset) / t;
}

Eigen::VectorXd heat_project_exact(HeatManifold m, const Eigen::VectorXd& x) {
  check_reach(m, x);
  const double n = x.norm();
  if (n == 0.0) throw Error(ErrorCode::ZeroInput, "projection of the center is not unique");
  return x / n;
}

// ---------------------------------------------------------------------------
// Rate fit

Json RateFit::to_json() const {
  return Json{{"check", "varadhan"}, {"t", t},         {"error", error}, {"slope", slope},
              {"intercept", intercept}, {"threshold", threshold}, {"pass", pass}};
}

void fit_rate(RateFit& fit) {
  const std::size_t n = fit.t.size();
  if (n < 2 || fit.error.size() != n) throw Error(ErrorCode::Config, "fit_rate: need matching samples");
  double sx = 0, sy = 0, sxx = 0, sxy = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const double lx = std::log(fit.t[i]);
    const double ly = std::log(std::max(fit.error[i], 1e-300));
    sx += lx;
    sy += ly;
    sxx += lx * lx;
    sxy += lx * ly;
  }
  const double dn = static_cast<double>(n);
  fit.slope = (dn * sxy - sx * sy) / (dn * sxx - sx * sx);
  fit.intercept = (sy - fit.slope * sx) / dn;
  fit.pass = fit.slope >= fit.threshold;
}

std::vector<double> log_grid(double lo, double hi, int count) {
  if (!(lo > 0.0) || !(hi > lo) || count < 2) throw Error(ErrorCode::Config, "log_grid: invalid range");
  std::vector<double> g(static_cast<std::size_t>(count));
  for (int i = 0; i < count; ++i) {
    g[static_cast<std::size_t>(i)] = std::exp(std::log(lo) + (std::log(hi) - std::log(lo)) * i / (count - 1));
  }
  return g;
}

RateFit verify_varadhan_rate(HeatManifold m, const Eigen::VectorXd& x, const std::vector<double>& t_grid, int nodes) {
  RateFit fit;
  const Eigen::VectorXd target = heat_project_exact(m, x);
  for (double t : t_grid) {
    const Eigen::VectorXd s = heat_score_exact(m, x, t, nodes);
    fit.t.push_back(t);
    fit.error.push_back((x + t * s - target).norm());
  }
  fit_rate(fit);
  return fit;
}

// ---------------------------------------------------------------------------
// Gronwall

double gronwall_bound_theorem(double delta, const GronwallConstants& c) {
  const double la = c.lipschitz + 4.0 * c.sup_field * c.sup_field / c.reach + 1.0;
  return delta / la * std::expm1(la * c.horizon);
}

double gronwall_bound_proof(double delta, const GronwallConstants& c) {
  const double a = 2.0 * c.lipschitz + 2.0 * c.sup_field * c.sup_field / c.reach + 1.0;
  return delta * std::sqrt(std::expm1(a * c.horizon) / a);
}

GronwallConstants gronwall_constants(double delta, double horizon, double field_alpha) {
  const double lf = std::sqrt(1.0 + field_alpha * field_alpha);  // |J + alpha I|, also sup |F| on the disk
  GronwallConstants c;
  c.lipschitz = std::max(lf, lf + delta * std::sqrt(2.0));
  c.sup_field = lf + delta;
  c.reach = 1.0;
  c.horizon = horizon;
  return c;
}

Json BoundCheck::to_json() const {
  return Json{{"check", name},
              {"delta", delta},
              {"constants",
               {{"L", constants.lipschitz}, {"U", constants.sup_field}, {"alpha", constants.reach}, {"T", constants.horizon}}},
              {"measured", measured},
              {"bound_theorem", bound_theorem},
              {"bound_proof", bound_proof},
              {"bound", bound},
              {"pass", pass}};
}

BoundCheck verify_gronwall_bound(double delta, double horizon, const GronwallOptions& opt) {
  if (delta < 0.0 || !(horizon > 0.0) || !(opt.dt > 0.0) || opt.samples < 1) {
    throw Error(ErrorCode::Config, "gronwall: invalid delta, horizon, dt or sample count");
  }
  BoundCheck out;
  out.name = "gronwall";
  out.delta = delta;
  out.constants = gronwall_constants(delta, horizon, opt.field_alpha);
  out.bound_theorem = gronwall_bound_theorem(delta, out.constants);
  out.bound_proof = gronwall_bound_proof(delta, out.constants);
  out.bound = std::max(out.bound_theorem, out.bound_proof);

  const ManifoldKernel disk = ManifoldKernel::disk();
  const dyn::DiskRotExpandField field(opt.field_alpha);
  const dyn::CustomField perturbed("disk_rot_expand_perturbed", [&](double t, const AmbientVector& x) {
    AmbientVector v = field(t, x);
    const double s = x(0) + x(1);
    v(0) += delta * std::cos(s);
    v(1) += delta * std::sin(s);
    return v;
  });
  const int steps = static_cast<int>(std::llround(horizon / opt.dt));
  const double dt = horizon / steps;
  std::mt19937_64 rng(mix_seed(opt.seed ^ 0x6a09e667ULL));
  double worst = 0.0;
  for (int i = 0; i < opt.samples; ++i) {
    const AmbientVector x0 = random_point(disk, rng);
    const auto a = dyn::projected_euler_flow(disk, field, x0, dt, steps);
    const auto b = dyn::projected_euler_flow(disk, perturbed, x0, dt, steps);
    worst = std::max(worst, (a.back() - b.back()).norm());
  }
  out.measured = worst;
  out.pass = delta == 0.0 ? worst <= 1e-12 : worst <= out.bound;
  return out;
}

// ---------------------------------------------------------------------------
// Final projection

PerturbMode parse_perturb_mode(const std::string& s) {
  if (s == "random") return PerturbMode::Random;
  if (s == "radial") return PerturbMode::Radial;
  if (s == "tangential") return PerturbMode::Tangential;
  throw Error(ErrorCode::Config, "perturbation mode must be random, radial or tangential");
}

std::string to_string(PerturbMode m) {
  switch (m) {
    case PerturbMode::Random: return "random";
    case PerturbMode::Radial: return "radial";
    case PerturbMode::Tangential: return "tangential";
  }
  return "?";
}

Json FaaCheck::to_json() const {
  return Json{{"check", "faa_2eps"}, {"manifold", manifold}, {"eps", eps},   {"mode", mode},
              {"samples", samples},  {"max_error", max_error}, {"bound", bound}, {"pass", pass}};
}

FaaCheck verify_faa_2eps(const ManifoldKernel& m, double eps, PerturbMode mode, int samples, std::uint64_t seed) {
  if (eps < 0.0 || samples < 1) throw Error(ErrorCode::Config, "faa_2eps: eps must be >= 0 and samples >= 1");
  const bool sphere = m.kind() == KernelKind::Sphere;
  if (!sphere && m.kind() != KernelKind::Disk) {
    throw Error(ErrorCode::UnsupportedManifold, "faa_2eps supports spheres and the disk");
  }
  if (sphere && eps >= 1.0) throw Error(ErrorCode::OutOfReach, "eps must stay below the sphere's reach");
  FaaCheck out;
  out.manifold = m.name();
  out.eps = eps;
  out.mode = to_string(mode);
  out.samples = samples;
  out.bound = 2.0 * eps + 1e-12;
  std::mt19937_64 rng(mix_seed(seed ^ 0xbb67ae85ULL));
  std::normal_distribution<double> gauss;
  const int d = m.ambient_dim();
  for (int i = 0; i < samples; ++i) {
    const AmbientVector f = random_point(m, rng);
    AmbientVector g(d);
    for (int k = 0; k < d; ++k) g(k) = gauss(rng);
    AmbientVector u;
    switch (mode) {
      case PerturbMode::Random:
        u = g;
        break;
      case PerturbMode::Radial:
        u = f.norm() > 0.0 ? AmbientVector(f) : g;
        break;
      case PerturbMode::Tangential:
        u = f.norm() > 0.0 ? AmbientVector(g - g.dot(f) / f.squaredNorm() * f) : g;
        break;
    }
    u.normalize();
    const AmbientVector p = metric_project(m, f + eps * u);
    out.max_error = std::max(out.max_error, (f - p).norm());
  }
  out.pass = out.max_error <= out.bound;
  return out;
}

// ---------------------------------------------------------------------------
// Exponential-map representation

Json ExpCheck::to_json() const {
  return Json{{"check", "exp_representation"}, {"grid", grid},       {"max_error", max_error},
              {"max_log_norm", max_log_norm},  {"tolerance", tolerance}, {"pass", pass}};
}

SphereMap smooth_sphere_map() {
  return [](double x1, double x2) {
    const double th = 0.3 + 2.0 * x1 + 0.25 * std::sin(2.0 * kPi * x2) * x1;
    const double ph = 2.0 * kPi * x2 + 0.5 * std::sin(kPi * x1);
    return Eigen::Vector3d(std::sin(th) * std::cos(ph), std::sin(th) * std::sin(ph), std::cos(th));
  };
}

ExpCheck verify_exp_representation(const Eigen::Vector3d& p, const SphereMap& f, int grid) {
  if (grid < 2) throw Error(ErrorCode::Config, "exp_representation: grid must be >= 2");
  if (std::abs(p.norm() - 1.0) > kOnManifoldTol) throw Error(ErrorCode::OffManifoldBase, "base point off the sphere");
  const ManifoldKernel s2 = ManifoldKernel::sphere(3);
  const AmbientVector base = p;
  ExpCheck out;
  out.grid = grid;
  for (int i = 0; i < grid; ++i) {
    for (int j = 0; j < grid; ++j) {
      const double x1 = static_cast<double>(i) / (grid - 1);
      const double x2 = static_cast<double>(j) / (grid - 1);
      const AmbientVector target = f(x1, x2);
      if (std::abs(target.norm() - 1.0) > kOnManifoldTol) {
        throw Error(ErrorCode::OffManifoldBase, "F(x) is not on the sphere");
      }
      const double theta = sphere_distance(base, target);
      if (theta > kPi - 0.1) throw Error(ErrorCode::AntipodeHit, "F(x) within 0.1 of the antipode of p");
      const AmbientVector v = sphere_log(base, target);
      const AmbientVector back = exp_map(s2, base, v);
      out.max_error = std::max(out.max_error, sphere_distance(back, target));
      out.max_log_norm = std::max(out.max_log_norm, v.norm());
    }
  }
  out.pass = out.max_error <= out.tolerance && out.max_log_norm <= kPi - 0.1;
  return out;
}

}  // namespace geoproj::oracle
